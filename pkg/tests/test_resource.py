from __future__ import annotations

import random

import pytest

from conftest import world
from gridkit.collective.index import IndexService, index_query
from gridkit.connectivity.credentials import create_proxy
from gridkit.connectivity.endpoint import GridClient
from gridkit.errors import (
    AuthFailed,
    Denied,
    NoMapping,
    NotOwner,
    SourceDenied,
    StagingFailed,
    TtlOutOfRange,
    UnknownJob,
)
from gridkit.fabric.descriptor import ResourceDescriptor
from gridkit.resource import client as rc
from gridkit.resource.types import JobRequest, TransferRequest, chunk_ranges
from gridkit.wire import EndpointAddress
from gridkit.wire.transport import DROP

ALICE = "/org=A/user=alice"
BOB = "/org=B/user=bob"


# -- soft-state registration ------------------------------------------------------------------
@pytest.fixture
def index(pki):
    cred = pki.issue("/org=A/service=giis", kind="service")
    svc = IndexService(EndpointAddress("A", "index", "giis"), cred, pki.trust, pki.signer, pki.net, pki.ids,
                       sweep_period=1.0)
    svc.start()
    return svc


def _registrant(pki, org="A", name="h1"):
    cred = pki.issue(f"/org={org}/host={name}", kind="service")
    return GridClient(pki.net, EndpointAddress(org, "resource-host", name), cred, pki.trust, pki.signer, pki.ids)


def _reader(pki):
    proxy = create_proxy(pki.issue(ALICE), ["info:query"], 3600, pki.signer, 0.0)
    return GridClient(pki.net, EndpointAddress("A", "client", "alice"), proxy, pki.trust, pki.signer, pki.ids)


DESC = ResourceDescriptor("h1", "A", "compute", 2, free_slots=2)


def _names(pki, index) -> list[str]:
    return [r["name"] for r in index_query(_reader(pki), index.address)]


def test_registration_lapses_without_refresh(pki, index):
    rc.register(_registrant(pki), index.address, DESC, 10.0)
    pki.net.clock.run_until(deadline=5.0)
    assert _names(pki, index) == ["h1"]
    pki.net.clock.run_until(deadline=11.5)
    assert _names(pki, index) == []
    assert [e["kind"] for e in index.monitor.events] == ["DOWN"]


def test_refresh_extends_the_deadline(pki, index):
    host = _registrant(pki)
    assert rc.register(host, index.address, DESC, 10.0)["generation"] == 1
    pki.net.clock.run_until(deadline=8.0)
    assert rc.refresh(host, index.address, DESC, 10.0)["generation"] == 2
    pki.net.clock.run_until(deadline=15.0)
    assert _names(pki, index) == ["h1"]


def test_duplicate_register_is_one_entry(pki, index):
    host = _registrant(pki)
    first = rc.register(host, index.address, DESC, 10.0, request_id="reg-1")
    again = rc.register(host, index.address, DESC, 10.0, request_id="reg-1")
    assert first == again
    assert len(index.entries) == 1
    assert index.entries["h1"].generation == 1


def test_registration_checks(pki, index):
    with pytest.raises(TtlOutOfRange):
        rc.register(_registrant(pki), index.address, DESC, 0.5)
    with pytest.raises(AuthFailed):
        rc.register(_registrant(pki, org="B"), index.address, DESC, 10.0)
    with pytest.raises(AuthFailed):
        rc.register(_reader(pki), index.address, DESC, 10.0)


# -- a small grid for the remaining protocols ----------------------------------------------------------
def grid_record(**host_overrides) -> dict:
    h1 = {"name": "h1", "slots": 2, "files": {"/bin/work": "x"},
          "policy": [{"principal": "/org=A/*", "conditions": [["problem_size", "<=", 100]]},
                     {"principal": "/org=A/*", "operation": "info:query"},
                     {"principal": "/org=A/*", "operation": "storage:read"},
                     {"principal": "/org=A/*", "operation": "storage:write"}]}
    h1.update(host_overrides)
    return {
        "name": "resource-grid",
        "seed": 4,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}, {"name": "carol", "rights": ["compute:submit"]}],
             "hosts": [h1,
                       {"name": "s1", "kind": "storage", "files": {"/data/in": bytes(range(100))}},
                       {"name": "s2", "kind": "storage", "storage_bytes": 10_000}]},
            {"name": "B", "users": [{"name": "bob"}]},
        ],
    }


@pytest.fixture
def grid():
    return world(grid_record())


def _job(rid="r1", units=3, **kw) -> JobRequest:
    return JobRequest(rid, "/bin/work", units, constraints=kw.pop("constraints", {"problem_size": 10}), **kw)


def test_query_info_agrees_with_fabric(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1")
    rc.allocate(alice, h1.address, _job())
    [record] = rc.query_info(alice, h1.address, {"type": "compute"})
    assert record["free_slots"] == h1.compute.enquire().free_slots == 1
    assert record["policy"]["rules"] == 4
    assert rc.query_info(alice, h1.address, {"type": "storage"}) == []
    with pytest.raises(Denied):
        rc.query_info(grid.client("/org=A/user=carol"), grid.host("s1").address)


def test_job_runs_to_done_with_output(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1").address
    job_id, record = rc.allocate(alice, h1, _job())
    assert record.state in ("queued", "running")
    grid.sleep(10)
    done = rc.job_status(alice, h1, job_id)
    assert done.state == "done"
    assert done.account == "alice"
    assert grid.host("h1").storage.exists(done.output)
    assert [s for s, _ in done.transitions] == ["staged", "queued", "running", "done"]


def test_lost_response_retry_is_exactly_once(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1")
    rc.query_info(alice, h1.address)  # session in place, so the next two messages are the allocate pair
    pos = grid.net.position
    grid.net.inject_at(pos + 1, DROP)
    job_id, _ = rc.allocate(alice, h1.address, _job("once"))
    allocs = [e for e in grid.net.trace if e.message_type == "ALLOCATE"]
    assert len(allocs) == 2
    assert len(h1.jobs) == 1
    assert len(h1.compute.start_events()) == 1
    assert rc.allocate(alice, h1.address, _job("once"))[0] == job_id
    assert len(h1.compute.start_events()) == 1


def test_oversized_problem_is_denied_with_no_fabric_change(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1")
    with pytest.raises(Denied) as info:
        rc.allocate(alice, h1.address, _job(constraints={"problem_size": 500}))
    assert info.value.detail["rule"] is None
    assert info.value.stage == "policy"
    assert h1.compute.start_events() == []
    assert h1.decisions[-1]["effect"] == "deny"


def test_unmapped_identity_is_refused():
    g = world(grid_record(gridmap={ALICE: "alice"}))
    with pytest.raises(NoMapping) as info:
        rc.allocate(g.client(BOB), g.host("h1").address, _job())
    assert info.value.stage == "mapping"
    assert g.host("h1").compute.start_events() == []


def test_status_and_cancel_ownership(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1").address
    job_id, _ = rc.allocate(alice, h1, _job(units=100))
    with pytest.raises(NotOwner):
        rc.job_status(grid.client("/org=A/user=carol"), h1, job_id)
    with pytest.raises(UnknownJob):
        rc.job_status(alice, h1, "job-nope")
    first = rc.cancel(alice, h1, job_id)
    second = rc.cancel(alice, h1, job_id)
    assert first.state == second.state == "cancelled"
    assert first.transitions == second.transitions


def test_staging_runs_under_delegation(grid):
    alice = grid.client(ALICE)
    h1 = grid.host("h1")
    job = _job(stage_from=(str(grid.host("s1").address), ("/data/in",)), inputs=("/data/in",))
    job_id, _ = rc.allocate(alice, h1.address, job)
    assert h1.storage.get_file("/data/in") == bytes(range(100))
    staged_get = [d for d in grid.host("s1").decisions if d["operation"] == "storage:read"]
    assert staged_get and staged_get[-1]["principal"] == ALICE
    bad = _job("r2", stage_from=(str(grid.host("s1").address), ("/data/missing",)))
    with pytest.raises(StagingFailed) as info:
        rc.allocate(alice, h1.address, bad)
    assert info.value.detail["cause"] == "NotFound"


# -- transfers ---------------------------------------------------------------------------------
def test_chunk_ranges_partition():
    assert chunk_ranges(10, 20, 3) == [(10, 6), (16, 6), (22, 8)]
    for length in range(0, 30):
        for streams in range(1, 5):
            pieces = chunk_ranges(0, length, streams)
            covered = [i for start, size in pieces for i in range(start, start + size)]
            assert covered == list(range(length))


def _xfer(grid, rid, offset=0, length=None, streams=1, dst_path="/copy"):
    req = TransferRequest(rid, str(grid.host("s1").address), "/data/in", str(grid.host("s2").address), dst_path,
                          offset, length, streams)
    return rc.transfer(grid.client(ALICE), req)


def test_full_and_partial_parallel_transfers(grid):
    report = _xfer(grid, "t1")
    assert report.bytes_moved == 100
    assert grid.host("s2").storage.get_file("/copy") == bytes(range(100))
    report = _xfer(grid, "t2", 10, 20, 3, "/part")
    assert report.chunks == 3
    assert grid.host("s2").storage.get_file("/part") == bytes(range(100))[10:30]


def test_third_party_data_never_touches_the_client(grid):
    _xfer(grid, "t3", 5, 50, 4)
    client = str(grid.user_address(ALICE))
    data_msgs = [e for e in grid.net.trace if e.protocol == "data" and e.message_type == "CHUNK"]
    assert len(data_msgs) >= 4
    assert all(client not in (e.src, e.dst) for e in data_msgs)
    client_data = [e for e in grid.net.trace if e.protocol == "data" and client in (e.src, e.dst)]
    assert {e.message_type for e in client_data} <= {"XFER", "DONE"}


def test_transfer_integrity_exhaustive_small():
    g = world(grid_record())
    rng = random.Random(12)
    src = g.host("s1").storage
    n = 0
    for size in (0, 1, 7, 64):
        data = rng.randbytes(size)
        src.put_file(f"/f{size}", data)
        for offset in range(0, size + 2, max(1, size // 6)):
            for length in sorted({0, 1, size // 2, size + 1}):
                for streams in range(1, 5):
                    n += 1
                    req = TransferRequest(f"x{n}", str(g.host("s1").address), f"/f{size}",
                                          str(g.host("s2").address), f"/o{n}", offset, length, streams)
                    rc.transfer(g.client(ALICE), req)
                    assert g.host("s2").storage.get_file(f"/o{n}") == data[offset:offset + length]
                    g.host("s2").storage.delete(f"/o{n}")


def test_source_refusal_is_reported_as_source_denied():
    record = grid_record()
    record["organizations"][0]["hosts"][1]["policy"] = [{"principal": "/org=A/*"}]
    g = world(record)
    req = TransferRequest("t", str(g.host("s1").address), "/data/in", str(g.host("s2").address), "/x")
    with pytest.raises(SourceDenied):
        rc.transfer(g.client(BOB), req)
    assert not g.host("s2").storage.exists("/x")


def test_same_client_code_drives_every_fabric_variant():
    record = grid_record()
    record["organizations"][0]["hosts"] += [
        {"name": "big", "slots": 8, "files": {"/bin/work": "x"}},
        {"name": "tiny", "slots": 1, "files": {"/bin/work": "x"}},
    ]
    g = world(record)
    alice = g.client(ALICE)
    for name in ("h1", "big", "tiny"):
        job_id, _ = rc.allocate(alice, g.host(name).address, _job(f"n-{name}"))
        g.sleep(5)
        assert rc.job_status(alice, g.host(name).address, job_id).state == "done"
    for name, expect in (("s1", 1_000_000 - 100), ("s2", 10_000)):
        [rec] = rc.query_info(alice, g.host(name).address)
        assert rec["free_bytes"] == expect
