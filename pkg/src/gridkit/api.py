"""HTTP service over one long-lived simulated grid.

Requests name the acting user from the grid config; the service holds
that user's proxy (one proxy-init per user for the life of the process)
and calls the same operations the command line uses. Simulated time only
advances while a request is being served, or through ``/clock/advance``.
"""

from __future__ import annotations

import dataclasses
import threading
from pathlib import Path
from typing import Any, Optional

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import ops
from .errors import Conflict, Denied, GridError, NotFound, TransportError, UnknownJob, ValidationError, error_from_record
from .harness.runner import run_scenario
from .harness.scenario import Scenario, load_scenario, parse_scenario
from .harness.world import GridWorld


class JobSubmit(BaseModel):
    user: Optional[str] = None
    host: str
    executable: str
    work_units: float = Field(gt=0)
    vo: str = ""
    request_id: Optional[str] = None
    constraints: dict[str, Any] = Field(default_factory=dict)
    wait: bool = False


class UserRef(BaseModel):
    user: Optional[str] = None


class DiscoverQuery(BaseModel):
    user: Optional[str] = None
    requirements: dict[str, Any] = Field(default_factory=dict)
    view: Optional[str] = None


class ScenarioBody(BaseModel):
    scenario: dict[str, Any]
    seed: Optional[int] = None


class Advance(BaseModel):
    seconds: float = Field(ge=0)


class JobOut(BaseModel):
    job_id: str
    record: dict[str, Any]


def _jsonable(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in value]
    return value


def _status_for(exc: GridError) -> int:
    if isinstance(exc, ValidationError):
        return 422
    if isinstance(exc, TransportError):
        return 503
    if isinstance(exc, Denied):
        return 403
    if isinstance(exc, (NotFound, UnknownJob)):
        return 404
    if isinstance(exc, Conflict):
        return 409
    return 400


class GridService:
    """The world behind the app; one lock because the simulated network is single-threaded."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.world = GridWorld(scenario, "sim")
        self.world.start()
        self.lock = threading.Lock()

    def identity(self, user: str | None) -> str:
        if user:
            return self.scenario.user(user).identity
        users = self.scenario.users()
        if len(users) != 1:
            raise ValidationError("user", f"choose one of {sorted(u.name for u in users)}")
        return users[0].identity

    def resolve(self, name: str):
        try:
            return self.world.resolve(name)
        except ValueError:
            raise ValidationError("host", f"unknown endpoint {name!r}") from None

    def index(self):
        if self.world.index is None:
            raise ValidationError("services.index", "the grid config declares no index")
        return self.world.index.address


def create_app(config: str | Path | Scenario, seed: int | None = None) -> FastAPI:
    scenario = config if isinstance(config, Scenario) else load_scenario(config)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    grid = GridService(scenario)
    app = FastAPI(title="gridkit", version="0.1.0")
    app.state.grid = grid

    @app.exception_handler(GridError)
    async def grid_error(_request: Request, exc: GridError):
        return JSONResponse(status_code=_status_for(exc), content={"error": _jsonable(exc.to_record())})

    @app.exception_handler(KeyError)
    async def unknown_name(_request: Request, exc: KeyError):
        err = ValidationError("user", f"unknown name {exc.args[0]!r}")
        return JSONResponse(status_code=422, content={"error": err.to_record()})

    @app.get("/health")
    def health():
        return {"status": "ok", "scenario": scenario.name, "now": grid.world.now()}

    @app.post("/clock/advance")
    def advance(body: Advance):
        with grid.lock:
            grid.world.clock.run_until(deadline=grid.world.now() + body.seconds)
            return {"now": grid.world.now()}

    @app.post("/jobs", response_model=JobOut)
    def submit(body: JobSubmit):
        with grid.lock:
            client = grid.world.client(grid.identity(body.user))
            host = grid.resolve(body.host)
            out = ops.submit(client, host, body.executable, body.work_units, body.vo, body.request_id,
                             constraints=body.constraints)
            if body.wait:
                out["record"] = ops.wait(_SimContext(grid.world), client, host, out["job_id"])
            return _jsonable(out)

    @app.get("/jobs/{host}/{job_id}")
    def job_status(host: str, job_id: str, user: Optional[str] = None):
        with grid.lock:
            client = grid.world.client(grid.identity(user))
            return _jsonable(ops.status(client, grid.resolve(host), job_id))

    @app.post("/jobs/{host}/{job_id}/cancel")
    def job_cancel(host: str, job_id: str, body: UserRef):
        with grid.lock:
            client = grid.world.client(grid.identity(body.user))
            return _jsonable(ops.cancel(client, grid.resolve(host), job_id))

    @app.post("/discover")
    def discover(body: DiscoverQuery):
        with grid.lock:
            client = grid.world.client(grid.identity(body.user))
            return _jsonable(ops.discover(client, grid.index(), body.requirements, body.view))

    @app.post("/scenario/validate")
    def validate(body: ScenarioBody):
        scn = parse_scenario(body.scenario)
        return {
            "name": scn.name,
            "valid": True,
            "organizations": [o.name for o in scn.organizations],
            "hosts": [h.name for h in scn.hosts()],
            "vos": [v.name for v in scn.vos],
            "workloads": len(scn.workloads),
            "faults": len(scn.faults),
        }

    @app.post("/scenario/run")
    def run(body: ScenarioBody):
        scn = parse_scenario(body.scenario)
        if body.seed is not None:
            scn = dataclasses.replace(scn, seed=body.seed)
        record = run_scenario(scn).to_record()
        record.pop("trace")
        return _jsonable(record)

    return app


class _SimContext:
    """The slice of GridContext that ``ops.wait`` needs."""

    def __init__(self, world: GridWorld):
        self.clock = world.clock

    def now(self) -> float:
        return self.clock.now()


def call_api(base_url: str, method: str, path: str, body: dict | None = None, timeout: float = 30.0) -> Any:
    """Thin client used by ``gridctl --api``; error bodies come back as grid errors."""
    try:
        resp = httpx.request(method, base_url.rstrip("/") + path, json=body, timeout=timeout)
    except httpx.HTTPError as exc:
        raise TransportError(f"{base_url}: {exc}") from None
    if resp.status_code >= 400:
        try:
            record = resp.json()["error"]
        except (ValueError, KeyError, TypeError):
            raise GridError(f"HTTP {resp.status_code}: {resp.text[:200]}") from None
        raise error_from_record(record)
    return resp.json()


def serve(config: str | Path, host: str = "127.0.0.1", port: int = 8000, seed: int | None = None) -> None:
    import uvicorn

    uvicorn.run(create_app(config, seed), host=host, port=port)
