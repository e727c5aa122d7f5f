"""The workloads a scenario can run: plain job lists, a ray-tracing task farm and a coupled two-stage run.

Every workload talks to the grid only through a user's :class:`GridClient`;
the world object is used for the user's proxy, the clock and the index
address, never to reach into a host.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from ..collective.broker import discover_and_rank
from ..collective.coalloc import CONFIRMED, Leg, co_reserve_end_to_end, request_co_reservation
from ..collective.index import failure_events
from ..collective.replica import replica_locate, replica_register, replica_select
from ..errors import Deadline, GridError, PartialFailure, Starvation, TransportError, Unreachable, ValidationError
from ..resource import client as rc
from ..resource.types import JobRequest, TransferRequest
from ..wire.transport import EndpointAddress
from .scenario import WorkloadSpec

log = logging.getLogger(__name__)

DATA_PAYLOAD_TYPES = frozenset({"CHUNK", "DATA", "PUT"})

Progress = Callable[[float], None]


def _noop(_fraction: float) -> None:
    pass


def _check_deadline(world, what: str) -> None:
    if world.now() > world.deadline:
        raise Deadline(f"{what} unfinished at t={world.now():.3f}", deadline=world.deadline)


def wait_for_job(world, client, host: EndpointAddress, job_id: str, poll: float = 1.0):
    """Poll a job until it is terminal; transport errors are retried until the deadline."""
    while True:
        try:
            record = rc.job_status(client, host, job_id)
            if record.terminal:
                return record
        except TransportError:
            pass
        _check_deadline(world, f"job {job_id}")
        world.sleep(poll)


# -- plain jobs ---------------------------------------------------------------
def run_jobs(world, workload: WorkloadSpec, *, index: int = 0, progress: Progress = _noop) -> dict:
    """Submit a list of jobs, each to a named host or to the best-ranked match.

    ``params.jobs`` lists job records; without it ``tasks`` copies of a
    default job go round-robin over ``params.hosts``.
    """
    params = workload.params
    client = world.client(workload.owner)
    poll = float(params.get("poll", 1.0))
    jobs = list(params.get("jobs", []))
    if not jobs:
        hosts = list(params.get("hosts", []))
        for i in range(workload.tasks):
            job: dict[str, Any] = {
                "executable": params.get("executable", "/bin/work"),
                "work_units": params.get("work_units", 1.0),
            }
            if hosts:
                job["host"] = hosts[i % len(hosts)]
            elif "requirements" in params:
                job["requirements"] = params["requirements"]
            jobs.append(job)

    tasks: list[dict] = []
    running: list[tuple[dict, EndpointAddress, str]] = []
    enquired: set[str] = set()
    for i, job in enumerate(jobs):
        name = job.get("name", f"w{index}-j{i}")
        constraints = dict(job.get("constraints", {}))
        if "problem_size" in job:
            constraints["problem_size"] = job["problem_size"]
        outcome: dict[str, Any] = {"task": name, "workload": index, "state": "pending", "attempts": []}
        tasks.append(outcome)
        if "host" in job:
            endpoint = str(world.resolve(job["host"]))
            if endpoint not in enquired:
                # enquire before the first submission, as a user would check the resource is up
                try:
                    rc.query_info(client, EndpointAddress.parse(endpoint), vo=job.get("vo", workload.vo))
                except GridError as exc:
                    log.info("enquiry of %s failed: %s", endpoint, exc)
                enquired.add(endpoint)
            candidates = [endpoint]
        else:
            if world.index is None:
                raise ValidationError(f"workloads[{index}].jobs[{i}]", "no host given and no index to search")
            reqs = dict(job.get("requirements", {}))
            reqs.setdefault("type", "compute")
            candidates = [r["endpoint"] for r in discover_and_rank(client, world.index.address, reqs)]
        if not candidates:
            outcome.update(state="unplaced", error={"code": "Starvation", "message": "no matching host"})
            continue
        for attempt, endpoint in enumerate(candidates, 1):
            request_id = job.get("request_id", f"{name}#{attempt}")
            req = JobRequest(
                request_id=request_id,
                executable=job.get("executable", "/bin/work"),
                work_units=job.get("work_units", 1.0),
                vo=job.get("vo", workload.vo),
                inputs=tuple(job.get("inputs", ())),
                constraints=constraints,
            )
            host = EndpointAddress.parse(endpoint)
            entry = {"attempt": attempt, "request_id": request_id, "host": host.name}
            outcome["attempts"].append(entry)
            try:
                job_id, _ = rc.allocate(client, host, req)
            except GridError as exc:
                entry["outcome"] = exc.code
                outcome.update(state="denied" if exc.code == "Denied" else "failed", host=host.name,
                               error=exc.to_record())
                continue
            entry["outcome"] = "allocated"
            outcome.update(state="allocated", host=host.name, job_id=job_id)
            outcome.pop("error", None)
            running.append((outcome, host, job_id))
            break

    for n, (outcome, host, job_id) in enumerate(running, 1):
        record = wait_for_job(world, client, host, job_id, poll)
        outcome.update(state=record.state, finished_at=record.transitions[-1][1])
        progress(n / len(running))
    return {"kind": "jobs", "workload": index, "tasks": tasks}


# -- ray tracing ----------------------------------------------------------------
def work_units_for(spec: Any, count: int, seed: int, index: int) -> dict[str, float]:
    """Per-task work: a constant, or uniform over [lo, hi] drawn from the scenario seed."""
    names = [f"w{index}-t{i:04d}" for i in range(count)]
    if isinstance(spec, (list, tuple)):
        lo, hi = float(spec[0]), float(spec[1])
        rng = random.Random(f"{seed}/{index}")
        return {name: round(rng.uniform(lo, hi), 3) for name in names}
    return {name: spec for name in names}


@dataclass
class _Task:
    name: str
    attempts: list[dict] = field(default_factory=list)
    active: dict | None = None  # the attempt in flight
    done: dict | None = None
    avoid: set[str] = field(default_factory=set)


def _register_replicas(client, catalog: EndpointAddress, replicas: Mapping[str, Any], world) -> None:
    for logical, copies in sorted(replicas.items()):
        for copy in copies:
            storage, path = copy[0], copy[1]
            latency = copy[2] if len(copy) > 2 else None
            replica_register(client, catalog, logical, world.resolve(storage), path, latency=latency)


def run_raytrace(world, workload: WorkloadSpec, *, index: int = 0, progress: Progress = _noop) -> dict:
    """High-throughput task farm with failover.

    Each host gets at most as many of our tasks as it has slots. When the
    failure monitor reports a host DOWN, its tasks go back to the pending
    pool and are submitted again under a fresh request id; the attempt
    lineage is kept per task.
    """
    params = workload.params
    client = world.client(workload.owner)
    if world.index is None:
        raise ValidationError(f"workloads[{index}]", "raytrace needs an index")
    index_addr = world.index.address
    poll = float(params.get("poll", 1.0))
    grace = float(params.get("starvation_grace", 30.0))
    work_units = params.get("work_units", 1.0)
    requirements = dict(params.get("requirements", {}))
    requirements.setdefault("type", "compute")
    executable = params.get("executable", "/bin/raytrace")
    inputs = list(params.get("inputs", []))

    # stage from the cheapest registered copy of the executable and the inputs
    stage_from = None
    if "catalog" in params:
        catalog = world.resolve(params["catalog"])
        if "replicas" in params:
            _register_replicas(client, catalog, params["replicas"], world)
        logicals = [params.get("executable_logical", executable)] + list(params.get("input_logicals", inputs))
        copies = [replica_select(replica_locate(client, catalog, name), params.get("hints")) for name in logicals]
        sources = {c["endpoint"] for c in copies}
        if len(sources) != 1:
            raise ValidationError(f"workloads[{index}].replicas", "executable and inputs must share one storage copy")
        stage_from = (copies[0]["endpoint"], tuple(c["path"] for c in copies))

    tasks = [_Task(f"w{index}-t{i:04d}") for i in range(workload.tasks)]
    units = work_units_for(work_units, workload.tasks, world.scenario.seed, index)
    pending = list(tasks)
    per_host_active: dict[str, int] = {}
    events_seen = 0
    down: set[str] = set()
    duplicates = 0
    starving_since: float | None = None
    done_count = 0

    suspect: dict[str, float] = {}

    def is_suspect(cand: Mapping[str, Any]) -> bool:
        since = suspect.get(cand["endpoint"])
        if since is None:
            return False
        if world.now() - float(cand.get("staleness", 0.0)) > since:
            del suspect[cand["endpoint"]]  # registered again after we saw it fail
            return False
        return True

    def fail_attempt(task: _Task, reason: str) -> None:
        attempt = task.active
        assert attempt is not None
        attempt.update(outcome=reason, ended_at=world.now())
        per_host_active[attempt["endpoint"]] -= 1
        task.active = None
        pending.append(task)

    while done_count < len(tasks):
        _check_deadline(world, f"raytrace workload {index}")

        # failure monitor: requeue everything in flight on a host that went DOWN
        try:
            events = failure_events(client, index_addr)
        except TransportError:
            events = []
        for event in events[events_seen:]:
            if event["kind"] != "DOWN":
                continue
            down.add(event["resource"])
            for task in tasks:
                if task.active is not None and task.active["host"] == event["resource"]:
                    fail_attempt(task, "host-down")
        events_seen = max(events_seen, len(events))

        # dispatch pending tasks onto free capacity
        if pending:
            try:
                ranked = discover_and_rank(client, index_addr, requirements)
            except TransportError:
                ranked = []
            candidates = [c for c in ranked if not is_suspect(c)]
            placed = False
            pending.sort(key=lambda t: t.name)
            for cand in candidates:
                endpoint = cand["endpoint"]
                free = int(cand.get("capacity") or 0) - per_host_active.get(endpoint, 0)
                while free > 0 and pending and endpoint not in suspect:
                    task = next((t for t in pending if endpoint not in t.avoid), None)
                    if task is None:
                        break
                    pending.remove(task)
                    number = len(task.attempts) + 1
                    request_id = task.name if number == 1 else f"{task.name}#{number}"
                    req = JobRequest(request_id, executable, units[task.name], vo=workload.vo, inputs=tuple(inputs),
                                     stage_from=stage_from)
                    started = world.now()
                    try:
                        job_id, _ = rc.allocate(client, EndpointAddress.parse(endpoint), req)
                    except Unreachable:
                        # never delivered, so not an attempt; stop using the host until it re-registers
                        suspect[endpoint] = world.now()
                        pending.insert(0, task)
                        break
                    except GridError as exc:
                        task.avoid.add(endpoint)
                        task.attempts.append({"attempt": number, "request_id": request_id, "host": cand["name"],
                                              "endpoint": endpoint, "started_at": started, "outcome": exc.code,
                                              "ended_at": world.now()})
                        pending.append(task)
                        break
                    attempt = {"attempt": number, "request_id": request_id, "host": cand["name"],
                               "endpoint": endpoint, "started_at": started, "job_id": job_id}
                    task.attempts.append(attempt)
                    task.active = attempt
                    per_host_active[endpoint] = per_host_active.get(endpoint, 0) + 1
                    placed = True
                    free -= 1
            busy = any(t.active is not None for t in tasks)
            if not placed and not busy and pending:
                if not candidates:
                    starving_since = starving_since if starving_since is not None else world.now()
                    if world.now() - starving_since >= grace:
                        raise Starvation(f"no eligible host for {len(pending)} task(s)", pending=len(pending))
                elif all(all(c["endpoint"] in t.avoid for c in candidates) for t in pending):
                    raise Starvation(f"every candidate refused {pending[0].name}", task=pending[0].name)
            else:
                starving_since = None

        # monitor tasks in flight
        for task in tasks:
            attempt = task.active
            if attempt is None or "job_id" not in attempt:
                continue
            try:
                record = rc.job_status(client, EndpointAddress.parse(attempt["endpoint"]), attempt["job_id"])
            except TransportError:
                # the failure monitor decides whether the host is gone; meanwhile send it nothing new
                suspect.setdefault(attempt["endpoint"], world.now())
                continue
            except GridError as exc:
                fail_attempt(task, exc.code)
                continue
            if not record.terminal:
                continue
            if record.state == "done":
                attempt.update(outcome="done", ended_at=record.transitions[-1][1], output=record.output)
                per_host_active[attempt["endpoint"]] -= 1
                task.active = None
                if task.done is not None:
                    duplicates += 1
                    continue
                task.done = attempt
                done_count += 1
                progress(done_count / len(tasks))
            else:
                fail_attempt(task, record.state)

        if done_count < len(tasks):
            world.sleep(poll)

    per_host: dict[str, int] = {}
    outcomes = []
    for task in tasks:
        assert task.done is not None
        per_host[task.done["host"]] = per_host.get(task.done["host"], 0) + 1
        outcomes.append(
            {
                "task": task.name,
                "workload": index,
                "state": "done",
                "host": task.done["host"],
                "job_id": task.done["job_id"],
                "attempts": [{k: v for k, v in a.items() if k != "endpoint"} for a in task.attempts],
            }
        )
    return {
        "kind": "raytrace",
        "workload": index,
        "tasks": outcomes,
        "per_host": dict(sorted(per_host.items())),
        "done_records": done_count,
        "duplicate_done": duplicates,
        "down": sorted(down),
    }


# -- coupled two-stage simulation ----------------------------------------------
def _client_data_messages(world, client) -> int:
    trace = getattr(world.net, "trace", [])
    return sum(1 for e in trace if e.touches(client.address) and e.message_type in DATA_PAYLOAD_TYPES)


def run_coupled(world, workload: WorkloadSpec, *, index: int = 0, progress: Progress = _noop) -> dict:
    """Stage A in org 1, third-party copy of its output to org 2, stage B in org 2.

    Both compute windows are co-reserved before anything runs.
    """
    params = workload.params
    client = world.client(workload.owner)
    hosts = list(params.get("hosts", []))
    if len(hosts) != 2:
        raise ValidationError(f"workloads[{index}].hosts", "coupled runs need exactly two compute hosts")
    host_a, host_b = (world.host(h) for h in hosts)
    if host_a.org == host_b.org:
        raise ValidationError(f"workloads[{index}].hosts", "the two stages must run in different organizations")
    storage = world.host(params["storage"]) if "storage" in params else host_b
    poll = float(params.get("poll", 1.0))
    start = world.now() + float(params.get("window_start", 1.0))
    length = float(params.get("window", 600.0))
    stage_a = dict(params.get("stage_a", {}))
    stage_b = dict(params.get("stage_b", {}))
    outcome: dict[str, Any] = {"kind": "coupled", "workload": index, "tasks": []}
    base = params.get("request_id", f"w{index}-coupled")
    progress(0.0)

    legs = [Leg(str(host_a.address), start, start + length), Leg(str(host_b.address), start, start + length)]
    if world.coalloc is not None:
        plan = request_co_reservation(client, world.coalloc.address, legs, vo=workload.vo, request_id=f"{base}/plan")
    else:
        plan = co_reserve_end_to_end(client, legs, f"{base}/plan", vo=workload.vo, index=world.index and world.index.address)
    if plan.state != CONFIRMED or len(plan.confirmed) != 2:
        raise GridError(f"co-reservation ended {plan.state}")
    reserved_at = world.now()
    outcome["plan"] = {"plan_id": plan.plan_id, "state": plan.state, "confirmed_at": reserved_at,
                       "reservations": [plan.reservation_id(0), plan.reservation_id(1)]}
    progress(0.25)

    # stage A
    req_a = JobRequest(f"{base}/a", stage_a.get("executable", "/bin/solver-a"), stage_a.get("work_units", 5.0),
                       vo=workload.vo, reservation_id=plan.reservation_id(0))
    job_a, _ = rc.allocate(client, host_a.address, req_a)
    rec_a = wait_for_job(world, client, host_a.address, job_a, poll)
    started_a = next((t for s, t in rec_a.transitions if s == "running"), None)
    outcome["tasks"].append({"task": f"{base}/a", "workload": index, "state": rec_a.state, "host": host_a.name,
                             "job_id": job_a, "started_at": started_a})
    if rec_a.state != "done":
        raise GridError(f"stage A ended {rec_a.state}", job=job_a)
    progress(0.5)

    # third-party transfer of stage A's output; retried under a new id after transport trouble
    dest_path = params.get("dest_path", "/coupled/stage-a.out")
    transfers = []
    attempt = 0
    while True:
        attempt += 1
        request_id = f"{base}/xfer" if attempt == 1 else f"{base}/xfer#{attempt}"
        req = TransferRequest(request_id, str(host_a.address), rec_a.output, str(storage.address), dest_path,
                              streams=int(params.get("streams", 2)))
        try:
            report = rc.transfer(client, req, vo=workload.vo)
            transfers.append({"request_id": request_id, "outcome": "done", "bytes": report.bytes_moved})
            break
        except (TransportError, PartialFailure) as exc:
            transfers.append({"request_id": request_id, "outcome": exc.code})
            _check_deadline(world, "coupled transfer")
            world.sleep(float(params.get("retry_interval", 5.0)))
    outcome["transfers"] = transfers
    progress(0.75)

    # stage B consumes the copy, staged from org 2's storage
    req_b = JobRequest(f"{base}/b", stage_b.get("executable", "/bin/solver-b"), stage_b.get("work_units", 5.0),
                       vo=workload.vo, inputs=(dest_path,), stage_from=(str(storage.address), (dest_path,)),
                       reservation_id=plan.reservation_id(1))
    job_b, _ = rc.allocate(client, host_b.address, req_b)
    rec_b = wait_for_job(world, client, host_b.address, job_b, poll)
    outcome["tasks"].append({"task": f"{base}/b", "workload": index, "state": rec_b.state, "host": host_b.name,
                             "job_id": job_b})
    outcome["client_data_messages"] = _client_data_messages(world, client)
    outcome["dest_path"] = dest_path
    outcome["dest_size"] = rc.stat(client, storage.address, dest_path, vo=workload.vo)
    outcome["reserved_before_stage_a"] = started_a is not None and reserved_at <= started_a
    progress(1.0)
    return outcome


RUNNERS = {"jobs": run_jobs, "raytrace": run_raytrace, "coupled": run_coupled}
