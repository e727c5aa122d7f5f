from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import world
from gridkit.collective.broker import discover_and_rank, normalize_requirements, rank_candidates, satisfies
from gridkit.collective.cas import request_capability
from gridkit.collective.coalloc import (
    CONFIRMED,
    Leg,
    co_reserve_end_to_end,
    coallocate,
    request_co_reservation,
)
from gridkit.collective.index import failure_events, index_query
from gridkit.collective.replica import replica_locate, replica_register, replica_select
from gridkit.connectivity.capability import verify_capability
from gridkit.errors import (
    AbortedTwice,
    Denied,
    NothingGranted,
    NotMember,
    SizeMismatch,
    UnknownLogical,
    UnknownView,
    ValidationError,
)
from gridkit.policy import PolicyRule
from gridkit.resource import client as rc
from gridkit.resource.types import JobRequest
from gridkit.wire.transport import UNREACHABLE

ALICE = "/org=A/user=alice"
BOB = "/org=B/user=bob"


def vo_record(**extra) -> dict:
    record = {
        "name": "vo-grid",
        "seed": 9,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}],
             "hosts": [{"name": "h1", "slots": 2, "files": {"/bin/work": "x"}, "ttl": 10},
                       {"name": "h2", "slots": 4, "tags": ["certified"], "files": {"/bin/work": "x"}, "ttl": 10},
                       {"name": "cat", "kind": "catalog", "ttl": 10}]},
            {"name": "B", "users": [{"name": "bob"}],
             "hosts": [{"name": "h3", "slots": 2, "files": {"/bin/work": "x"}, "ttl": 10},
                       {"name": "s1", "kind": "storage", "files": {"/d/a": "0123456789", "/d/b": "xyz"}, "ttl": 10},
                       {"name": "s2", "kind": "storage", "files": {"/d/a": "0123456789"}, "ttl": 10}]},
        ],
        "vos": [{"name": "P", "roster": [ALICE], "rights": ["compute:submit", "storage:read"]}],
        "services": {
            "index": {"org": "A", "name": "giis", "views": {"certified": {"type": "compute", "tag": "certified"}}},
            "cas": {"org": "A", "name": "cas"},
            "coalloc": {"org": "A", "name": "duroc", "policy": [{"principal": "/org=A/*"}]},
        },
    }
    record.update(extra)
    return record


@pytest.fixture
def grid():
    return world(vo_record())


# -- index and discovery ----------------------------------------------------------------------
def test_certified_filter_picks_the_certified_host(grid):
    alice = grid.client(ALICE)
    found = index_query(alice, grid.index.address, {"type": "compute", "tag": "certified"})
    assert [r["name"] for r in found] == ["h2"]
    assert all(r["staleness"] >= 0 for r in found)


def test_view_equals_direct_filter(grid):
    alice = grid.client(ALICE)

    def strip(records):
        return [{k: v for k, v in r.items() if k != "staleness"} for r in records]

    direct = index_query(alice, grid.index.address, {"type": "compute", "tag": "certified"})
    assert strip(index_query(alice, grid.index.address, view="certified")) == strip(direct)
    with pytest.raises(UnknownView):
        index_query(alice, grid.index.address, view="nope")


def test_index_empties_after_every_ttl_lapses(grid):
    grid.shutdown()
    assert grid.index.live() == []
    assert sorted(e["resource"] for e in grid.index.monitor.events if e["kind"] == "DOWN") == sorted(grid.hosts)


def test_discover_and_rank(grid):
    alice = grid.client(ALICE)
    ranked = discover_and_rank(alice, grid.index.address, {"type": "compute"})
    assert [r["name"] for r in ranked] == ["h2", "h1", "h3"]
    assert [r["name"] for r in discover_and_rank(alice, grid.index.address, {"type": "compute", "min_slots": 3})] \
        == ["h2"]


def test_identical_idle_hosts_rank_by_name():
    records = [{"name": n, "type": "compute", "free_slots": 2, "queue_length": 0} for n in ("b", "a", "c")]
    assert [r["name"] for r in rank_candidates(records)] == ["a", "b", "c"]


def test_fifty_random_descriptors_rank_like_a_reference_sort():
    rng = random.Random(50)
    records = [
        {"name": f"h{i:02d}", "type": rng.choice(["compute", "storage"]), "free_slots": rng.randint(0, 4),
         "queue_length": rng.randint(0, 3), "tags": rng.sample(["certified", "gpu"], rng.randint(0, 2))}
        for i in range(50)
    ]
    reqs = {"type": "compute", "min_slots": 1, "max_queue": 2}
    expected = [r for r in records if r["type"] == "compute" and r["free_slots"] >= 1 and r["queue_length"] <= 2]
    expected.sort(key=lambda r: r["name"])
    expected.sort(key=lambda r: r["queue_length"])
    expected.sort(key=lambda r: r["free_slots"], reverse=True)
    assert rank_candidates(records, reqs) == expected
    shuffled = records[:]
    rng.shuffle(shuffled)
    assert rank_candidates(shuffled, reqs) == expected


def test_satisfies_requirements():
    rec = {"name": "h", "type": "compute", "free_slots": 2, "queue_length": 5, "tags": ["certified"]}
    assert satisfies(rec, {"tags": ["certified"], "min_slots": 2})
    assert not satisfies(rec, {"max_queue": 4})
    assert not satisfies(rec, {"exclude": ["h"]})
    assert satisfies(rec, {"tag": "certified"})
    assert not satisfies(rec, {"tag": "gpu"})


def test_unknown_requirement_is_rejected():
    assert normalize_requirements({"tag": "a", "tags": ["b"]}) == {"tags": ["a", "b"]}
    assert normalize_requirements({"tags": "a"}) == {"tags": ["a"]}
    with pytest.raises(ValidationError) as info:
        normalize_requirements({"certified": True})
    assert info.value.detail["path"] == "requirements.certified"


# -- failure monitor --------------------------------------------------------------------------------
def test_healthy_run_has_no_events(grid):
    grid.sleep(60)
    assert failure_events(grid.client(ALICE), grid.index.address) == []


def test_down_after_host_stops_refreshing(grid):
    h1 = grid.host("h1")
    h1.registrar.stop()
    stopped = grid.now()
    grid.sleep(15)
    downs = [e for e in grid.index.monitor.events if e["kind"] == "DOWN"]
    assert [e["resource"] for e in downs] == ["h1"]
    assert downs[0]["t"] <= stopped + 10 + 1 + 1e-9


def test_overload_needs_two_consecutive_hot_refreshes():
    from gridkit.collective.index import FailureMonitor
    from gridkit.fabric.descriptor import ResourceDescriptor

    hot = ResourceDescriptor("h", "A", "compute", 1, queue_length=20)
    cool = ResourceDescriptor("h", "A", "compute", 1, queue_length=0)
    mon = FailureMonitor(overload_queue=10)
    mon.on_refresh("h", hot, 1)
    mon.on_refresh("h", cool, 2)
    mon.on_refresh("h", hot, 3)
    assert mon.events == []
    mon.on_refresh("h", hot, 4)
    assert [e["kind"] for e in mon.events] == ["OVERLOAD"]


# -- co-allocation -----------------------------------------------------------------------------
def three_legs(grid, window=(100.0, 200.0)) -> list[Leg]:
    return [Leg(str(grid.host(n).address), *window) for n in ("h1", "h2", "h3")]


def _holds(grid) -> dict[str, list]:
    return {n: grid.host(n).calendar.holds() for n in ("h1", "h2", "h3")}


def test_three_free_calendars_confirm(grid):
    plan = coallocate(grid.client(ALICE), three_legs(grid), "plan-1")
    assert plan.state == CONFIRMED
    assert all(len(h) == 1 and h[0].state == "confirmed" for h in _holds(grid).values())


def test_conflict_on_leg_two_releases_the_others(grid):
    grid.host("h2").calendar.reserve(0, 1000, 4, "someone")
    plan = coallocate(grid.client(ALICE), three_legs(grid), "plan-2")
    assert plan.state == "aborted"
    assert plan.failed_leg == 1
    assert plan.error.code == "LegConflict"
    assert plan.error.detail["earliest_fit"] == 1000
    assert grid.host("h1").calendar.holds() == []
    assert grid.host("h3").calendar.holds() == []


def _outcome(grid, plan_id: str) -> str:
    holds = {n: [h for h in hs if h.holder == ALICE] for n, hs in _holds(grid).items()}
    if all(len(h) == 1 and h[0].state == "confirmed" for h in holds.values()):
        return "all-confirmed"
    if all(not h for h in holds.values()):
        return "all-released"
    return "mixed"


def test_unreachable_at_every_position_never_mixes():
    baseline = world(vo_record())
    start = baseline.net.position
    plan = coallocate(baseline.client(ALICE), three_legs(baseline), "sweep")
    assert plan.state == CONFIRMED
    positions = range(start, baseline.net.position)
    assert len(positions) >= 12
    outcomes = {}
    for pos in positions:
        g = world(vo_record())
        g.net.inject_at(g.net.position + (pos - start), UNREACHABLE)
        plan = coallocate(g.client(ALICE), three_legs(g), "sweep")
        g.sleep(g.host("h1").calendar.hold_timeout + 1)
        outcome = _outcome(g, "sweep")
        assert outcome != "mixed", pos
        assert (plan.state == CONFIRMED) == (outcome == "all-confirmed")
        outcomes[pos] = outcome
    assert set(outcomes.values()) == {"all-confirmed", "all-released"}


def test_co_reservation_logs_and_retries(grid):
    log: list = []
    alice = grid.client(ALICE)
    plan = co_reserve_end_to_end(alice, three_legs(grid), "e2e-1", policy=[PolicyRule("/org=A/*")], decision_log=log)
    assert plan.state == CONFIRMED
    assert len(log) == 1


def test_transient_unreachable_then_retry_succeeds(grid):
    alice = grid.client(ALICE)
    for n in ("h1", "h2", "h3"):
        rc.query_info(alice, grid.host(n).address)
    grid.net.inject_at(grid.net.position + 2, UNREACHABLE)  # second leg's reserve, first attempt only
    log: list = []
    plan = co_reserve_end_to_end(alice, three_legs(grid), "e2e-2", decision_log=log)
    assert plan.state == CONFIRMED
    assert [e["attempt"] for e in log] == [1, 2]
    assert log[0]["cause"]["code"] == "LegUnreachable"


def test_denied_requester_sends_no_reserve(grid):
    bob = grid.client(BOB)
    before = len(grid.net.trace)
    with pytest.raises(Denied):
        co_reserve_end_to_end(bob, three_legs(grid), "e2e-3", policy=[PolicyRule("/org=A/*")])
    assert [e for e in grid.net.trace[before:] if e.message_type == "RESERVE"] == []


def test_aborted_twice():
    g = world(vo_record())
    g.host("h2").calendar.reserve(0, 1000, 4, "someone")
    with pytest.raises(AbortedTwice):
        co_reserve_end_to_end(g.client(ALICE), three_legs(g), "e2e-4")


def test_service_front_end(grid):
    plan = request_co_reservation(grid.client(ALICE), grid.coalloc.address, three_legs(grid), request_id="svc-1")
    assert plan.state == CONFIRMED
    assert len(grid.coalloc.decision_log) == 1
    with pytest.raises(Denied):
        request_co_reservation(grid.client(BOB), grid.coalloc.address, three_legs(grid, (300.0, 400.0)))


def test_requirement_legs_are_resolved_through_the_index(grid):
    legs = [Leg(None, 10, 20, requirements={"tags": ["certified"]}), Leg(None, 10, 20, requirements={})]
    plan = co_reserve_end_to_end(grid.client(ALICE), legs, "e2e-5", index=grid.index.address)
    assert plan.state == CONFIRMED
    assert plan.legs[0].host == str(grid.host("h2").address)
    assert plan.legs[1].host != plan.legs[0].host


# -- replicas --------------------------------------------------------------------------------
def test_replica_register_locate_select(grid):
    alice = grid.client(ALICE)
    cat = grid.host("cat").address
    s1, s2 = grid.host("s1").address, grid.host("s2").address
    with pytest.raises(UnknownLogical):
        replica_locate(alice, cat, "lfn:a")
    replica_register(alice, cat, "lfn:a", s1, "/d/a", size=10, latency=5.0)
    replica_register(alice, cat, "lfn:a", s2, "/d/a", latency=4.0)
    copies = replica_locate(alice, cat, "lfn:a")
    assert [c["endpoint"] for c in copies] == [str(s1), str(s2)]
    assert replica_select(copies[:1]) == copies[0]
    hints = {str(s1): {"load": 0.5}, str(s2): {"load": 1.0}}
    assert replica_select(copies, hints)["endpoint"] == str(s1)
    with pytest.raises(SizeMismatch):
        replica_register(alice, cat, "lfn:a", s1, "/d/b")
    with pytest.raises(SizeMismatch):
        replica_register(alice, cat, "lfn:a", s1, "/d/a", size=11)


def test_replica_ties_break_by_endpoint():
    copies = [{"endpoint": "B/storage/z", "path": "/x", "size": 1}, {"endpoint": "A/storage/y", "path": "/x", "size": 1}]
    assert replica_select(copies)["endpoint"] == "A/storage/y"


# -- community authorization -----------------------------------------------------------------------
def test_capability_is_the_intersection(grid):
    cap = request_capability(grid.client(ALICE), grid.cas.address, "P", ["compute:submit"])
    assert cap.operations == {"compute:submit"}
    with pytest.raises(NotMember):
        request_capability(grid.client(BOB), grid.cas.address, "P", ["compute:submit"])
    with pytest.raises(NothingGranted):
        request_capability(grid.client(ALICE), grid.cas.address, "P", ["storage:write"])


@settings(max_examples=100, deadline=None)
@given(st.frozensets(st.sampled_from(["compute:submit", "storage:read", "storage:write", "info:query", "*"]),
                     min_size=1))
def test_capabilities_never_exceed_community_rights(requested):
    g = world(vo_record(), start=False)
    try:
        cap = g.cas.grant(ALICE, "P", requested)
    except NothingGranted:
        return
    assert cap.operations <= {"compute:submit", "storage:read"}


def test_expired_capability_is_rejected_locally():
    record = vo_record()
    record["organizations"][0]["hosts"][0].update(trust_community_ca=True, gridmap={})
    g = world(record)
    alice = g.client(ALICE)
    cap = request_capability(alice, g.cas.address, "P", ["compute:submit"], lifetime=60)
    h1 = g.host("h1").address
    job = JobRequest("cap-1", "/bin/work", 1, vo="P")
    rc.allocate(alice, h1, job, capability=cap)
    g.sleep(120)
    assert not verify_capability(cap, g.host("h1").community_trust, g.now(), g.signer, "h1", ALICE)
    before = len(g.net.trace)
    with pytest.raises(Denied):
        rc.allocate(alice, h1, JobRequest("cap-2", "/bin/work", 1, vo="P"), capability=cap)
    cas = str(g.cas.address)
    assert all(cas not in (e.src, e.dst) for e in g.net.trace[before:])


# -- layering --------------------------------------------------------------------------------
def test_collective_traffic_uses_only_the_small_protocol_set(grid):
    alice = grid.client(ALICE)
    discover_and_rank(alice, grid.index.address, {"type": "compute"})
    co_reserve_end_to_end(alice, three_legs(grid), "layer")
    request_co_reservation(alice, grid.coalloc.address, three_legs(grid, (300.0, 400.0)))
    protocols = {e.protocol for e in grid.net.trace}
    assert protocols <= {"auth", "grrp", "info", "mgmt", "data", "coalloc", "cauth"}
    above_fabric = {e.protocol for e in grid.net.trace
                    if str(grid.coalloc.address) == e.src and e.kind == "request"}
    assert above_fabric <= {"auth", "mgmt", "info"}
