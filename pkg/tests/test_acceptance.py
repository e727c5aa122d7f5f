"""Acceptance gate: one test per criterion, each printed as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
Everything here runs on the deterministic simulated transport.
"""
from __future__ import annotations

import itertools
import random
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE, ALICE, CRASH_AT_30, POLICY_GRID, coupled_record, raytrace_record, scenario, world
from gridkit.collective.broker import discover_and_rank
from gridkit.collective.cas import request_capability
from gridkit.collective.coalloc import CONFIRMED, Leg, coallocate
from gridkit.collective.index import IndexService, index_query
from gridkit.connectivity.capability import verify_capability
from gridkit.connectivity.credentials import (
    CertificateAuthority,
    Identity,
    TrustStore,
    create_proxy,
    encode_chain,
    verify_chain,
)
from gridkit.connectivity.endpoint import GridClient
from gridkit.connectivity.signing import DigestSigner
from gridkit.errors import DestDenied, Denied, GridError, NothingGranted
from gridkit.fabric.descriptor import ResourceDescriptor
from gridkit.harness import GridWorld, run_scenario
from gridkit.ids import IdSource
from gridkit.resource import client as rc
from gridkit.resource.types import JobRequest, TransferRequest
from gridkit.wire import EndpointAddress, SimNet
from gridkit.wire.codec import encode_value
from gridkit.wire.transport import DROP, DUPLICATE, UNREACHABLE

UNIVERSE = ("compute:submit", "storage:read", "storage:write", "info:query")
ABOVE_FABRIC = {"auth", "grrp", "info", "mgmt", "data"}


@contextmanager
def criterion(number: int, title: str):
    started = time.perf_counter()
    try:
        yield
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title, time.perf_counter() - started)
        raise
    ACCEPTANCE[number] = ("PASS", title, time.perf_counter() - started)


# -- 1 ------------------------------------------------------------------------------------------
def test_c01_single_sign_on():
    record = {
        "name": "sso",
        "seed": 21,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}],
             "hosts": [{"name": "a1", "slots": 2, "files": {"/bin/work": "x"}},
                       {"name": "a2", "slots": 2, "files": {"/bin/work": "x"}}]},
            {"name": "B", "hosts": [{"name": "b1", "slots": 2, "files": {"/bin/work": "x"}}]},
        ],
        "services": {"index": {"org": "A", "name": "giis"}},
        "workloads": [{"kind": "jobs", "owner": ALICE,
                       "jobs": [{"name": f"j-{h}", "host": h} for h in ("a1", "a2", "b1")]}],
    }
    with criterion(1, "single sign-on: one unlock, three allocations"):
        report = run_scenario(scenario(record))
        assert report.proxy_inits == {ALICE: 1}
        assert report.secret_use == {ALICE: 1}
        done = [t for t in report.tasks if t["state"] == "done"]
        assert sorted(t["host"] for t in done) == ["a1", "a2", "b1"]


# -- 2 ------------------------------------------------------------------------------------------
SUBSETS = [frozenset(c) for n in range(len(UNIVERSE) + 1) for c in itertools.combinations(UNIVERSE, n)]


def _brute_intersection(restrictions) -> frozenset:
    return frozenset(r for r in UNIVERSE if all(r in s for s in restrictions))


def test_c02_restricted_delegation():
    with criterion(2, "restricted delegation: exhaustive chains and end-to-end put denial"):
        assert len(SUBSETS) == 16
        signer = DigestSigner(8)
        ca = CertificateAuthority.create("/ca=Grid", signer)
        trust = TrustStore.of(ca)
        root = ca.issue(Identity(ALICE), UNIVERSE, 0.0, 10_000.0)
        checked = 0

        def walk(node, restrictions):
            nonlocal checked
            for subset in SUBSETS:
                chain = restrictions + [subset]
                child = create_proxy(node, subset, 5000, signer, 1.0)
                subject, rights = verify_chain(child, trust, 2.0, signer)
                assert subject.name == ALICE
                assert frozenset(rights) == _brute_intersection(chain), chain
                checked += 1
                if len(chain) < 4:
                    walk(child, chain)

        walk(root, [])
        assert checked == 16 + 16**2 + 16**3 + 16**4

        record = {
            "name": "no-write",
            "seed": 2,
            "organizations": [{
                "name": "A",
                "users": [{"name": "alice", "proxy_rights": ["compute:submit", "storage:read", "info:query"]},
                          {"name": "bob"}],
                "hosts": [{"name": "s1", "kind": "storage", "files": {"/in": "hello"}},
                          {"name": "s2", "kind": "storage"}],
            }],
        }
        g = world(record)
        s1, s2 = str(g.host("s1").address), str(g.host("s2").address)
        alice = g.client(ALICE)
        assert "storage:write" not in alice.credential.rights
        with pytest.raises(Denied):
            rc.put(alice, g.host("s2").address, "/x", b"1")
        with pytest.raises(DestDenied) as info:
            rc.transfer(alice, TransferRequest("t-alice", s1, "/in", s2, "/out"))
        assert info.value.detail["cause"] == "Denied"
        assert not g.host("s2").storage.exists("/x")
        assert not g.host("s2").storage.exists("/out")
        bob = g.client("/org=A/user=bob")
        rc.put(bob, g.host("s2").address, "/x", b"1")
        rc.transfer(bob, TransferRequest("t-bob", s1, "/in", s2, "/out"))
        assert g.host("s2").storage.get_file("/out") == b"hello"


# -- 3 ------------------------------------------------------------------------------------------
def _artifacts(host) -> dict[str, bytes]:
    return {
        "trust": encode_value(host.trust.to_record()),
        "gridmap": host.gridmap.dumps().encode(),
        "policy": encode_value([rule.to_record() for rule in host.policy]),
        "credential": encode_chain(host.credential),
    }


def test_c03_user_based_trust():
    record = coupled_record(b_policy=[{"principal": ALICE}])
    ha, hb = record["organizations"][0]["hosts"][0], record["organizations"][1]["hosts"][0]
    ha.update(gridmap={ALICE: "alice"}, policy=[{"principal": "/org=A/*"}])
    hb["gridmap"] = {ALICE: "guest7"}
    with criterion(3, "user-based trust: local verification, only the CA anchor shared"):
        g = GridWorld(scenario(record))
        report = run_scenario(g.scenario, world=g)
        [w] = report.workloads
        assert w["plan"]["state"] == "confirmed"
        assert [t["state"] for t in report.tasks] == ["done", "done"]
        assert {j.account for j in g.host("hb").jobs.values()} == {"guest7"}
        assert {j.account for j in g.host("ha").jobs.values()} == {"alice"}

        before = g.net.position
        verify_chain(g.proxy_for(ALICE), g.host("hb").trust, g.now(), g.signer)
        assert g.net.position == before

        a_side, b_side = _artifacts(g.host("ha")), _artifacts(g.host("hb"))
        shared = {kind for kind in a_side if a_side[kind] and a_side[kind] == b_side[kind]}
        assert shared == {"trust"}
        assert a_side["trust"] == encode_value(g.trust_store().to_record())
        assert len(g.host("hb").trust.to_record()) == 1
        for blob in b_side.values():
            assert b"/org=A/host=" not in blob and b"/org=A/service=" not in blob
        for blob in a_side.values():
            assert b"/org=B/" not in blob


# -- 4 ------------------------------------------------------------------------------------------
def test_c04_soft_state_lapse():
    with criterion(4, "soft state: unrefreshed registration gone by ttl + 1 s, one DOWN"):
        # a bare registration made at t=0 and never refreshed
        signer = DigestSigner(17)
        ca = CertificateAuthority.create("/ca=Grid", signer)
        net = SimNet()
        trust = TrustStore.of(ca)
        ids = IdSource(4)
        index = IndexService(EndpointAddress("A", "index", "giis"),
                             ca.issue(Identity("/org=A/service=giis", "service"), ["*"], 0.0, 3600.0),
                             trust, signer, net, ids, sweep_period=1.0)
        index.start()
        host = GridClient(net, EndpointAddress("A", "resource-host", "h1"),
                          ca.issue(Identity("/org=A/host=h1", "service"), ["*"], 0.0, 3600.0), trust, signer, ids)
        proxy = create_proxy(ca.issue(Identity(ALICE), ["*"], 0.0, 3600.0), ["info:query"], 3600, signer, 0.0)
        reader = GridClient(net, EndpointAddress("A", "client", "alice"), proxy, trust, signer, ids)
        granted = rc.register(host, index.address, ResourceDescriptor("h1", "A", "compute", 2), 10.0)
        registered_at = granted["deadline"] - 10.0
        net.clock.run_until(deadline=registered_at + 9.9)
        assert [r["name"] for r in index_query(reader, index.address)] == ["h1"]
        net.clock.run_until(deadline=registered_at + 11.0)
        assert index_query(reader, index.address) == []
        assert [e["kind"] for e in index.monitor.events] == ["DOWN"]
        assert index.monitor.events[0]["t"] <= registered_at + 11.0

        # a live host whose refresh due at the 10 s mark never happens
        record = {"name": "lapse", "seed": 4,
                  "organizations": [{"name": "A", "users": [{"name": "alice"}],
                                     "hosts": [{"name": "h1", "ttl": 10, "refresh_interval": 10}]}],
                  "services": {"index": {"org": "A", "name": "giis", "sweep_period": 1.0}}}
        g = world(record)
        entry = g.index.entries["h1"]
        registered_at = entry.deadline - 10.0
        g.clock.run_until(deadline=registered_at + 9.5)
        g.host("h1").registrar.stop()
        g.clock.run_until(deadline=registered_at + 11.0)
        assert "h1" not in g.index.entries
        assert index_query(g.client(ALICE), g.index.address) == []
        downs = [e for e in g.index.monitor.events if e["kind"] == "DOWN"]
        assert [e["resource"] for e in downs] == ["h1"]
        assert downs[0]["t"] <= registered_at + 11.0
        g.sleep(30)
        assert len([e for e in g.index.monitor.events if e["kind"] == "DOWN"]) == 1


# -- 5 ------------------------------------------------------------------------------------------
ALLOC_GRID = {
    "name": "exactly-once",
    "seed": 5,
    "organizations": [{"name": "A", "users": [{"name": "alice"}],
                       "hosts": [{"name": "h1", "slots": 2, "files": {"/bin/work": "x"}}]}],
}


def _allocate_with_retries(g, job: JobRequest) -> list[str]:
    h1 = g.host("h1").address
    ids = []
    for _ in range(3):
        try:
            ids.append(rc.allocate(g.client(ALICE), h1, job)[0])
            break
        except GridError:
            continue
    g.sleep(60)  # let delayed and duplicated copies land
    ids.append(rc.allocate(g.client(ALICE), h1, job)[0])
    return ids


def test_c05_exactly_once_allocation():
    job = JobRequest("c5", "/bin/work", 1)
    with criterion(5, "exactly-once allocation under drop, duplicate and reorder"):
        baseline = world(ALLOC_GRID)
        start = baseline.net.position
        rc.allocate(baseline.client(ALICE), baseline.host("h1").address, job)
        exchange = baseline.net.trace[start:]
        assert [e.message_type for e in exchange] == ["HELLO", "CHALLENGE", "PROOF", "ESTABLISHED",
                                                      "ALLOCATE", "ALLOCATED"]
        runs = 0
        for offset in range(len(exchange)):
            for fault in (DROP, DUPLICATE, ("delay", baseline.net.reorder_delay)):
                g = world(ALLOC_GRID)
                assert g.net.position == start
                g.net.inject_at(start + offset, fault)
                ids = _allocate_with_retries(g, job)
                host = g.host("h1")
                tasks = {j.task_id for j in host.jobs.values() if j.request_id == "c5"}
                starts = [e for e in host.compute.start_events() if e["task"] in tasks]
                assert len(host.jobs) == 1, (offset, fault)
                assert len(starts) == 1, (offset, fault)
                assert len(set(ids)) == 1, (offset, fault, ids)
                runs += 1
        assert runs == 18


# -- 6 ------------------------------------------------------------------------------------------
def _transfer_grid(size: int, data: bytes) -> dict:
    return {
        "name": f"xfer-{size}",
        "seed": 6,
        "organizations": [{"name": "A", "users": [{"name": "alice"}],
                           "hosts": [{"name": "s1", "kind": "storage", "files": {"/src": data}},
                                     {"name": "s2", "kind": "storage"}]}],
    }


def test_c06_third_party_transfer():
    rng = random.Random(64)
    with criterion(6, "third-party transfer: exhaustive sizes, ranges and streams"):
        total = 0
        for size in range(65):
            data = rng.randbytes(size)
            g = world(_transfer_grid(size, data))
            alice = g.client(ALICE)
            src, dst = str(g.host("s1").address), str(g.host("s2").address)
            dest = g.host("s2").storage
            for offset in range(size + 1):
                for length in range(size - offset + 1):
                    expected = data[offset:offset + length]
                    for streams in range(1, 5):
                        total += 1
                        path = f"/o{total}"
                        rc.transfer(alice, TransferRequest(f"x{total}", src, "/src", dst, path, offset, length,
                                                           streams))
                        assert dest.get_file(path) == expected, (size, offset, length, streams)
                        dest.delete(path)
            client = str(g.user_address(ALICE))
            touching = [e for e in g.net.trace if e.protocol == "data" and client in (e.src, e.dst)]
            assert {e.message_type for e in touching} <= {"XFER", "DONE"}
        assert total == 4 * sum((s + 1) * (s + 2) // 2 for s in range(65))


# -- 7 ------------------------------------------------------------------------------------------
def coalloc_grid() -> dict:
    return {
        "name": "coalloc",
        "seed": 9,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}],
             "hosts": [{"name": "h1", "slots": 2}, {"name": "h2", "slots": 4}]},
            {"name": "B", "hosts": [{"name": "h3", "slots": 2}]},
        ],
    }


def _legs(g) -> list[Leg]:
    return [Leg(str(g.host(n).address), 100.0, 200.0) for n in ("h1", "h2", "h3")]


def _plan_outcome(g) -> str:
    holds = [[h for h in g.host(n).calendar.holds() if h.holder == ALICE] for n in ("h1", "h2", "h3")]
    if all(len(h) == 1 and h[0].state == "confirmed" for h in holds):
        return "all-confirmed"
    if all(not h for h in holds):
        return "all-released"
    return "mixed"


def test_c07_coallocation_atomicity():
    with criterion(7, "co-allocation atomicity: Unreachable at every position, no mixed outcome"):
        baseline = world(coalloc_grid())
        start = baseline.net.position
        assert coallocate(baseline.client(ALICE), _legs(baseline), "c7").state == CONFIRMED
        positions = range(start, baseline.net.position)
        assert len(positions) >= 12
        outcomes = []
        for pos in positions:
            g = world(coalloc_grid())
            g.net.inject_at(pos, UNREACHABLE)
            plan = coallocate(g.client(ALICE), _legs(g), "c7")
            g.sleep(max(g.host(n).calendar.hold_timeout for n in ("h1", "h2", "h3")) + 1)
            outcome = _plan_outcome(g)
            assert outcome != "mixed", pos
            assert (plan.state == CONFIRMED) == (outcome == "all-confirmed"), pos
            outcomes.append(outcome)
        assert "all-released" in outcomes


# -- 8 ------------------------------------------------------------------------------------------
CAS_RIGHTS = {"P": {"compute:submit", "storage:read"}, "Q": {"info:query"}, "R": set(UNIVERSE)}


def cas_grid() -> dict:
    return {
        "name": "cas",
        "seed": 8,
        "organizations": [{"name": "A", "users": [{"name": "alice"}],
                           "hosts": [{"name": "h1", "slots": 2, "files": {"/bin/work": "x"},
                                      "trust_community_ca": True, "gridmap": {}}]}],
        "vos": [{"name": vo, "roster": [ALICE], "rights": sorted(rights)} for vo, rights in CAS_RIGHTS.items()],
        "services": {"cas": {"org": "A", "name": "cas"}},
    }


def test_c08_capability_soundness():
    rng = random.Random(500)
    with criterion(8, "capability soundness: grants within community rights, expiry checked locally"):
        g = world(cas_grid())
        alice = g.client(ALICE)
        granted = 0
        for _ in range(500):
            vo = rng.choice(sorted(CAS_RIGHTS))
            requested = rng.sample(UNIVERSE + ("*",), rng.randint(1, 5))
            try:
                cap = request_capability(alice, g.cas.address, vo, requested)
            except NothingGranted:
                assert not (set(requested) & CAS_RIGHTS[vo]) and "*" not in requested
                continue
            granted += 1
            assert cap.operations <= CAS_RIGHTS[vo]
            assert cap.operations
        assert granted > 250

        cap = request_capability(alice, g.cas.address, "P", ["compute:submit"], lifetime=60)
        h1 = g.host("h1")
        rc.allocate(alice, h1.address, JobRequest("cap-1", "/bin/work", 1, vo="P"), capability=cap)
        g.sleep(120)
        assert not verify_capability(cap, h1.community_trust, g.now(), g.signer, "h1", ALICE)
        before = g.net.position
        with pytest.raises(Denied):
            rc.allocate(alice, h1.address, JobRequest("cap-2", "/bin/work", 1, vo="P"), capability=cap)
        cas = str(g.cas.address)
        assert all(cas not in (e.src, e.dst) for e in g.net.trace[before:])
        assert [j.request_id for j in h1.jobs.values()] == ["cap-1"]


# -- 9 ------------------------------------------------------------------------------------------
def test_c09_raytrace_failover():
    with criterion(9, "ray-tracing failover: 100 tasks, crash at 30%, replayable"):
        report = run_scenario(scenario(raytrace_record(faults=CRASH_AT_30)))
        [w] = report.workloads
        assert w["done_records"] == 100
        assert w["duplicate_done"] == 0
        assert len({t["task"] for t in report.tasks}) == 100
        assert all(t["state"] == "done" for t in report.tasks)
        interrupted = [t for t in report.tasks if any(a.get("outcome") == "host-down" for a in t["attempts"])]
        assert interrupted
        assert all(len(t["attempts"]) == 2 for t in interrupted)
        assert all(len(t["attempts"]) == 1 for t in report.tasks if t not in interrupted)
        again = run_scenario(scenario(raytrace_record(faults=CRASH_AT_30)))
        assert again.to_bytes() == report.to_bytes()


# -- 10 -----------------------------------------------------------------------------------------
def fabric_variants_grid() -> dict:
    return {
        "name": "hourglass",
        "seed": 10,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}],
             "hosts": [{"name": "one-slot", "slots": 1, "files": {"/bin/work": "x"}},
                       {"name": "small-store", "kind": "storage", "storage_bytes": 64, "files": {"/d": "abc"}}]},
            {"name": "B",
             "hosts": [{"name": "eight-slot", "slots": 8, "slot_speed": 4.0, "calendar": False,
                        "files": {"/bin/work": "x"}},
                       {"name": "large-store", "kind": "storage", "storage_bytes": 10_000_000,
                        "bandwidth_Bps": 100_000_000}]},
        ],
        "services": {"index": {"org": "A", "name": "giis"}},
    }


def test_c10_hourglass_universality():
    with criterion(10, "hourglass: one code path over two compute and two storage fabrics"):
        g = world(fabric_variants_grid())
        alice = g.client(ALICE)
        compute = discover_and_rank(alice, g.index.address, {"type": "compute"})
        storage = discover_and_rank(alice, g.index.address, {"type": "storage"})
        assert sorted(r["name"] for r in compute) == ["eight-slot", "one-slot"]
        assert sorted(r["name"] for r in storage) == ["large-store", "small-store"]
        for rec in compute:
            host = g.host(rec["name"]).address
            job_id, _ = rc.allocate(alice, host, JobRequest(f"hg-{rec['name']}", "/bin/work", 2))
            g.sleep(5)
            assert rc.job_status(alice, host, job_id).state == "done"
        for rec in storage:
            host = g.host(rec["name"]).address
            rc.put(alice, host, "/note", b"xy")
            assert rc.get(alice, host, "/note") == b"xy"
            [info] = rc.query_info(alice, host)
            assert info["free_bytes"] == g.host(rec["name"]).storage.enquire().free_bytes
        small, large = (str(g.host(n).address) for n in ("small-store", "large-store"))
        rc.transfer(alice, TransferRequest("hg-x1", small, "/d", large, "/d"))
        rc.transfer(alice, TransferRequest("hg-x2", large, "/d", small, "/d2"))
        assert g.host("small-store").storage.get_file("/d2") == b"abc"
        assert {e.protocol for e in g.net.trace} <= ABOVE_FABRIC


# -- 11 -----------------------------------------------------------------------------------------
def test_c11_policy_fixtures():
    with criterion(11, "policy fixtures: VO P simple problems only, VO Q certified only"):
        report = run_scenario(scenario(POLICY_GRID))
        p_jobs = {t["task"]: t for t in report.tasks if t["workload"] == 0}
        assert p_jobs["p-big"]["state"] == "denied"
        assert p_jobs["p-big"]["error"]["code"] == "Denied"
        assert p_jobs["p-small"]["state"] == "done"
        assert p_jobs["p-small"]["host"] == "simsvc"
        q_jobs = [t for t in report.tasks if t["workload"] == 1]
        assert len(q_jobs) == 3
        assert all(t["state"] == "done" and t["host"] == "c1" for t in q_jobs)
        decisions = {(d["host"], d["request_id"], d["effect"]) for d in report.decisions
                     if d["operation"] == "compute:submit"}
        assert ("simsvc", "p-big#1", "deny") in decisions
        assert ("simsvc", "p-small#1", "allow") in decisions
        assert {h for h, _, effect in decisions if effect == "allow"} == {"simsvc", "c1"}
        assert [d["request_id"] for d in report.denied()] == ["p-big#1"]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
