from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field

import pytest

from gridkit.connectivity.credentials import CertificateAuthority, Identity, TrustStore
from gridkit.connectivity.signing import DigestSigner
from gridkit.harness import GridWorld, parse_scenario
from gridkit.ids import IdSource
from gridkit.wire import SimNet


@dataclass
class Pki:
    signer: DigestSigner
    ca: CertificateAuthority
    net: SimNet
    ids: IdSource = field(default_factory=lambda: IdSource(5))

    @property
    def trust(self) -> TrustStore:
        return TrustStore.of(self.ca)

    def issue(self, name: str, rights=("*",), start: float = 0.0, end: float = 3600.0, kind: str = "user"):
        return self.ca.issue(Identity(name, kind), rights, start, end)


@pytest.fixture
def pki() -> Pki:
    signer = DigestSigner(17)
    return Pki(signer, CertificateAuthority.create("/ca=Grid", signer), SimNet())


def scenario(record: dict):
    return parse_scenario(copy.deepcopy(record))


def world(record: dict, start: bool = True) -> GridWorld:
    w = GridWorld(scenario(record))
    if start:
        w.start()
    return w


# criterion number -> (verdict, title, seconds), filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[str, str, float]] = {}
ACCEPTANCE_BUDGET = 120.0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, title, seconds = ACCEPTANCE[number]
        terminalreporter.write_line(f"{verdict} criterion {number:2d}: {title} ({seconds:.1f} s)")
    total = sum(seconds for _, _, seconds in ACCEPTANCE.values())
    verdict = "within" if total <= ACCEPTANCE_BUDGET else "OVER"
    terminalreporter.write_line(f"acceptance runtime {total:.1f} s, {verdict} the {ACCEPTANCE_BUDGET:.0f} s budget")


ALICE = "/org=A/user=alice"

ONE_HOST = {
    "name": "one-host",
    "seed": 1,
    "organizations": [
        {
            "name": "A",
            "users": [{"name": "alice"}],
            "hosts": [{"name": "h1", "slots": 2, "files": {"/bin/work": "x"}}],
        }
    ],
    "services": {"index": {"org": "A", "name": "giis"}},
}


# three organizations, two VOs: P may only run simple problems on org B's
# simulation host, Q only accepts hosts tagged certified
POLICY_GRID = {
    "name": "policy-grid",
    "seed": 11,
    "organizations": [
        {"name": "A", "users": [{"name": "alice"}],
         "hosts": [{"name": "a1", "slots": 2, "files": {"/bin/work": "x"}}]},
        {"name": "B", "users": [{"name": "bob"}],
         "hosts": [{"name": "simsvc", "slots": 4, "files": {"/bin/work": "x"},
                    "policy": [{"vo": "P", "operation": "compute:submit",
                                "conditions": [["problem_size", "<=", 100]]},
                               {"operation": "info:query"}]}]},
        {"name": "C", "users": [{"name": "carol"}],
         "hosts": [{"name": "c1", "slots": 2, "tags": ["certified"], "files": {"/bin/work": "x"}},
                   {"name": "c2", "slots": 8, "files": {"/bin/work": "x"}}]},
    ],
    "vos": [
        {"name": "P", "roster": ["/org=A/user=alice", "/org=B/user=bob"]},
        {"name": "Q", "roster": ["/org=C/user=carol", "/org=A/user=alice"]},
    ],
    "services": {"index": {"org": "A", "name": "giis"}},
    "workloads": [
        {"kind": "jobs", "owner": "/org=A/user=alice", "vo": "P",
         "jobs": [{"name": "p-big", "host": "simsvc", "problem_size": 500},
                  {"name": "p-small", "host": "simsvc", "problem_size": 50}]},
        {"kind": "jobs", "owner": "/org=C/user=carol", "vo": "Q", "tasks": 3,
         "requirements": {"tag": "certified"}},
    ],
}


def raytrace_record(tasks=100, faults=(), hosts=3, **params) -> dict:
    return {
        "name": "raytrace",
        "seed": 9,
        "organizations": [{
            "name": "A",
            "users": [{"name": "alice"}],
            "hosts": [{"name": f"r{i}", "slots": 4, "ttl": 10, "files": {"/bin/raytrace": "rt"}}
                      for i in range(1, hosts + 1)],
        }],
        "services": {"index": {"org": "A", "name": "giis"}},
        "workloads": [{"kind": "raytrace", "owner": ALICE, "tasks": tasks, "work_units": [1, 3], **params}],
        "faults": list(faults),
    }


CRASH_AT_30 = [{"kind": "host-crash", "target": "r2", "at_progress": 0.3}]


def coupled_record(b_policy=None, faults=()) -> dict:
    hb = {"name": "hb", "slots": 2, "calendar": True, "files": {"/bin/solver-b": "b"}}
    if b_policy is not None:
        hb["policy"] = b_policy
    return {
        "name": "coupled",
        "seed": 3,
        "organizations": [
            {"name": "A", "users": [{"name": "alice"}],
             "hosts": [{"name": "ha", "slots": 2, "calendar": True, "files": {"/bin/solver-a": "a"}}]},
            {"name": "B", "hosts": [hb]},
        ],
        "services": {"index": {"org": "A", "name": "giis"}, "coalloc": {"org": "A", "name": "duroc"}},
        "workloads": [{"kind": "coupled", "owner": ALICE, "hosts": ["ha", "hb"], "stage_a": {"work_units": 5}}],
        "faults": list(faults),
    }
