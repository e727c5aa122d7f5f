from __future__ import annotations

import copy

import pytest

from conftest import CRASH_AT_30, ONE_HOST, POLICY_GRID, coupled_record, raytrace_record, scenario, world
from gridkit.errors import Unreachable, ValidationError
from gridkit.harness import load_scenario, run_scenario
from gridkit.resource import client as rc

ALICE = "/org=A/user=alice"


# -- basic runs ----------------------------------------------------------------------------------
def test_empty_scenario_registers_then_lapses():
    report = run_scenario(scenario(ONE_HOST))
    assert report.tasks == []
    assert [r["name"] for r in report.registrations["before_shutdown"]] == ["h1"]
    assert report.registrations["after_shutdown"] == []
    assert [e["kind"] for e in report.failure_events] == ["DOWN"]


def test_single_task_uses_each_protocol():
    record = copy.deepcopy(ONE_HOST)
    record["workloads"] = [{"kind": "jobs", "owner": ALICE, "tasks": 1, "hosts": ["h1"]}]
    report = run_scenario(scenario(record))
    assert [t["state"] for t in report.tasks] == ["done"]
    for protocol in ("auth", "grrp", "info", "mgmt"):
        assert report.message_counts.get(protocol, 0) >= 1, protocol
    assert report.secret_use == {ALICE: 1}
    assert report.proxy_inits == {ALICE: 1}


def test_policy_grid_decisions():
    report = run_scenario(scenario(POLICY_GRID))
    by_name = {t["task"]: t for t in report.tasks}
    assert by_name["p-big"]["state"] == "denied"
    assert by_name["p-big"]["error"]["stage"] == "policy"
    assert by_name["p-small"]["state"] == "done"
    q_tasks = [t for t in report.tasks if t["workload"] == 1]
    assert len(q_tasks) == 3
    assert {t["host"] for t in q_tasks} == {"c1"}
    denied = report.denied()
    assert [(d["host"], d["request_id"]) for d in denied] == [("simsvc", "p-big#1")]


def test_unknown_requirement_key_fails_the_workload():
    record = copy.deepcopy(POLICY_GRID)
    record["workloads"][1]["requirements"] = {"tagz": "certified"}
    report = run_scenario(scenario(record))
    assert report.workloads[1]["error"]["code"] == "ValidationError"
    assert "requirements.tagz" in report.workloads[1]["error"]["message"]


# -- ray tracing ---------------------------------------------------------------------------------
def test_raytrace_without_faults():
    report = run_scenario(scenario(raytrace_record()))
    [w] = report.workloads
    assert w["done_records"] == 100
    assert w["duplicate_done"] == 0
    assert w["down"] == []
    assert sorted(w["per_host"]) == ["r1", "r2", "r3"]
    assert sum(w["per_host"].values()) == 100
    assert all(len(t["attempts"]) == 1 for t in report.tasks)


def test_raytrace_survives_a_crash_at_thirty_percent():
    report = run_scenario(scenario(raytrace_record(faults=CRASH_AT_30)))
    [w] = report.workloads
    assert len({t["task"] for t in report.tasks}) == 100
    assert w["done_records"] == 100
    assert w["down"] == ["r2"]
    [fault] = report.faults
    assert fault["target"] == "r2"
    interrupted = [t for t in report.tasks if any(a.get("outcome") == "host-down" for a in t["attempts"])]
    assert interrupted
    for task in interrupted:
        assert len(task["attempts"]) == 2
        first, second = task["attempts"]
        assert first["host"] == "r2"
        assert second["host"] != "r2"
        assert second["request_id"] == task["task"] + "#2"
        assert second["outcome"] == "done"


def test_raytrace_report_is_byte_replayable():
    a = run_scenario(scenario(raytrace_record(faults=CRASH_AT_30)))
    b = run_scenario(scenario(raytrace_record(faults=CRASH_AT_30)))
    assert a.to_bytes() == b.to_bytes()


def test_raytrace_with_no_hosts_starves():
    report = run_scenario(scenario(raytrace_record(tasks=1, hosts=0, starvation_grace=5)))
    assert report.workloads[0]["error"]["code"] == "Starvation"


# -- coupled two-stage run -------------------------------------------------------------------------
def test_coupled_run_reserves_both_stages_first():
    report = run_scenario(scenario(coupled_record()))
    [w] = report.workloads
    assert w["plan"]["state"] == "confirmed"
    assert len(w["plan"]["reservations"]) == 2
    assert w["reserved_before_stage_a"]
    assert w["client_data_messages"] == 0
    assert w["dest_size"] == 19
    assert [t["state"] for t in report.tasks] == ["done", "done"]
    confirms = [e for e in report.fabric_events if e.get("op") == "confirm"]
    assert sorted(e["host"] for e in confirms) == ["ha", "hb"]


def test_coupled_run_denied_by_second_org_runs_nothing():
    report = run_scenario(scenario(coupled_record(b_policy=[{"principal": "/org=B/*"}])))
    [w] = report.workloads
    assert w["error"]["code"] == "Denied"
    assert report.tasks == []
    assert [e for e in report.fabric_events if e.get("resource") == "compute"] == []
    held = {e["id"] for e in report.fabric_events if e.get("op") == "reserve"}
    released = {e["id"] for e in report.fabric_events if e.get("op") == "release"}
    assert held == released


def test_coupled_transfer_retries_across_a_partition():
    faults = [{"kind": "partition", "target": ["ha", "hb"], "time": 2},
              {"kind": "heal", "target": ["ha", "hb"], "time": 20}]
    report = run_scenario(scenario(coupled_record(faults=faults)))
    [w] = report.workloads
    outcomes = [t["outcome"] for t in w["transfers"]]
    assert outcomes[-1] == "done"
    assert len(outcomes) > 1
    assert all(o != "done" for o in outcomes[:-1])
    assert w["dest_size"] == 19
    assert [t["state"] for t in report.tasks] == ["done", "done"]


# -- world faults ---------------------------------------------------------------------------------
def test_crash_and_restart():
    g = world(ONE_HOST)
    alice = g.client(ALICE)
    h1 = g.host("h1").address
    assert rc.query_info(alice, h1)
    g.sleep(20)
    assert g.index.entries["h1"].generation > 1
    g.crash("h1")
    with pytest.raises(Unreachable):
        rc.query_info(alice, h1)
    g.restart("h1")
    g.sleep(2)
    assert g.index.entries["h1"].generation == 1
    assert rc.query_info(alice, h1)


# -- validation ---------------------------------------------------------------------------------
@pytest.mark.parametrize("mutate, path", [
    (lambda r: r["workloads"][0].update(vo="Z"), "workloads[0].vo"),
    (lambda r: r["workloads"][0].update(owner="/org=A/user=zed"), "workloads[0].owner"),
    (lambda r: r["vos"][0]["roster"].append("/org=Q/user=q"), "vos[0].roster[2]"),
    (lambda r: r["organizations"][2]["hosts"].append({"name": "c1"}), "organizations[2].hosts[2].name"),
    (lambda r: r["organizations"][0]["hosts"][0].update(kind="toaster"), "organizations[0].hosts[0].kind"),
    (lambda r: r.update(faults=[{"kind": "host-restart", "target": "a1", "time": 1}]), "faults[0].target"),
    (lambda r: r.update(faults=[{"kind": "host-crash", "target": "a1"}]), "faults[0]"),
    (lambda r: r["organizations"][0]["hosts"][0].update(colour="red"), "organizations[0].hosts[0].colour"),
])
def test_validation_reports_the_field_path(mutate, path):
    record = copy.deepcopy(POLICY_GRID)
    mutate(record)
    with pytest.raises(ValidationError) as info:
        scenario(record)
    assert info.value.detail["path"] == path


def test_load_scenario_from_json_file(tmp_path):
    import json

    path = tmp_path / "grid.json"
    path.write_text(json.dumps(POLICY_GRID))
    assert load_scenario(path).to_bytes() == scenario(POLICY_GRID).to_bytes()
    path.write_text("{not json")
    with pytest.raises(ValidationError):
        load_scenario(path)


# -- single sign-on at scenario scope -------------------------------------------------------------
def test_one_unlock_per_user_across_workloads():
    report = run_scenario(scenario(POLICY_GRID))
    used = {u: n for u, n in report.secret_use.items() if n}
    assert used == report.proxy_inits
    assert set(used.values()) == {1}
    assert report.secret_use["/org=B/user=bob"] == 0
    summary = report.summary_text()
    assert "policy decisions" in summary
    assert "deny compute:submit on simsvc" in summary
