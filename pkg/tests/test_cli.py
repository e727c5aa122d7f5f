from __future__ import annotations

import copy
import json

import pytest
from click.testing import CliRunner

from conftest import POLICY_GRID, scenario
from gridkit.cli import cli
from gridkit.harness import run_scenario
from gridkit.wire.codec import decode_value


@pytest.fixture
def gridctl(tmp_path):
    config = tmp_path / "grid.json"
    config.write_text(json.dumps(POLICY_GRID))
    runner = CliRunner()

    def run(*args, user="alice", request_id=None):
        base = ["--config", str(config), "--state", str(tmp_path / "state"), "--user", user]
        if request_id:
            base += ["--request-id", request_id]
        return runner.invoke(cli, base + list(args), catch_exceptions=False)

    run.config = config
    run.tmp = tmp_path
    return run


def _signed_in(gridctl, *restrict):
    assert gridctl("id", "issue", "/org=A/user=alice").exit_code == 0
    flags = [f for r in restrict for f in ("--restrict", r)]
    assert gridctl("proxy", "init", *flags).exit_code == 0


def _fields(text: str) -> dict:
    return dict(line.split(": ", 1) for line in text.strip().splitlines())


def test_proxy_init_with_restriction_then_info(gridctl):
    _signed_in(gridctl, "compute:submit", "info:query")
    out = gridctl("proxy", "info")
    assert out.exit_code == 0
    info = _fields(out.stdout)
    assert json.loads(info["rights"]) == ["compute:submit", "info:query"]
    assert info["subject"] == "/org=A/user=alice"
    assert info["depth"] == "2"
    record = decode_value(gridctl("--format", "record", "proxy", "info").stdout_bytes)
    assert record["rights"] == ["compute:submit", "info:query"]
    assert record["depth"] == 2


def test_proxy_file_is_private(gridctl):
    _signed_in(gridctl)
    mode = (gridctl.tmp / "state" / "proxy").stat().st_mode & 0o777
    assert mode == 0o600


def test_missing_proxy_is_an_error(gridctl):
    out = gridctl("proxy", "info")
    assert out.exit_code == 1
    assert out.stderr.startswith("error: ")


def test_fixed_request_id_submit_is_idempotent(gridctl):
    _signed_in(gridctl)
    args = ("submit", "--host", "simsvc", "--exe", "/bin/work", "--units", "2", "--vo", "P",
            "--constraint", "problem_size=50")
    first = gridctl("--format", "record", *args, request_id="fixed-1")
    again = gridctl("--format", "record", *args, "--wait", request_id="fixed-1")
    assert first.exit_code == again.exit_code == 0
    a, b = decode_value(first.stdout_bytes), decode_value(again.stdout_bytes)
    assert a["job_id"] == b["job_id"]
    assert b["record"]["state"] == "done"
    assert b["record"]["request_id"] == "fixed-1"


def test_exit_codes(gridctl):
    _signed_in(gridctl, "compute:submit", "info:query")
    denied = gridctl("submit", "--host", "simsvc", "--exe", "/bin/work", "--units", "1", "--vo", "P",
                     "--constraint", "problem_size=500")
    assert denied.exit_code == 1
    assert "Denied" in denied.stderr
    source = gridctl("xfer", "a1:/bin/work", "c1:/copy")
    assert source.exit_code == 1
    assert "SourceDenied" in source.stderr
    unknown = gridctl("status", "--host", "simsvc", "job-missing")
    assert unknown.exit_code == 1
    assert "UnknownJob" in unknown.stderr
    usage = gridctl("xfer", "a1-no-path", "c1:/copy")
    assert usage.exit_code == 2
    bad_pair = gridctl("discover", "--require", "oops")
    assert bad_pair.exit_code == 2


def test_record_output_matches_the_operation(gridctl):
    _signed_in(gridctl)
    out = gridctl("--format", "record", "discover", "--tag", "certified")
    assert out.exit_code == 0
    [host] = decode_value(out.stdout_bytes)
    assert host["name"] == "c1"
    assert host["tags"] == ["certified"]
    text = gridctl("discover", "--tag", "certified")
    assert json.loads(text.stdout) == host


def test_scenario_validate_reports_field_path(gridctl):
    ok = gridctl("scenario", "validate", str(gridctl.config))
    assert ok.exit_code == 0
    record = copy.deepcopy(POLICY_GRID)
    record["workloads"][0]["vo"] = "Z"
    bad = gridctl.tmp / "bad.json"
    bad.write_text(json.dumps(record))
    out = gridctl("scenario", "validate", str(bad))
    assert out.exit_code == 2
    assert "workloads[0].vo" in out.stderr


def test_scenario_run_record_is_the_report(gridctl):
    out = gridctl("--format", "record", "scenario", "run", str(gridctl.config))
    assert out.exit_code == 0
    assert out.stdout_bytes == run_scenario(scenario(POLICY_GRID)).to_bytes()
    report_path = gridctl.tmp / "report.bin"
    text = gridctl("scenario", "run", str(gridctl.config), "--report", str(report_path))
    assert "deny compute:submit on simsvc" in text.stdout
    assert report_path.read_bytes() == out.stdout_bytes
    assert (gridctl.tmp / "report.bin.txt").read_text() == text.stdout


def test_seed_needs_sim_transport(gridctl):
    out = gridctl("--transport", "socket", "--seed", "3", "proxy", "info")
    assert out.exit_code == 2
