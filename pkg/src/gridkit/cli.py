"""gridctl: operator command line.

Exit status: 0 success, 1 grid error (Denied, Conflict, NotFound, ...),
2 usage or validation error, 3 transport error.

With ``--transport sim`` (the default) every invocation boots the grid
described by ``--config`` in-process on the simulated network, so two
invocations with the same config, seed and proxy file behave the same.
With ``--transport socket`` the daemons started by ``host start``,
``index start`` and ``ca start`` serve the endpoints listed in the
config's ``endpoints`` table, and keys live under ``--state``.
"""

from __future__ import annotations

import getpass
import json
import signal
import sys
from pathlib import Path
from typing import Any, Callable
from urllib.parse import quote, urlencode

import click

from . import ops
from .collective.coalloc import Leg
from .errors import GridError, TransportError, ValidationError
from .wire.codec import encode_value

FORMATS = ("text", "record")


class Options:
    def __init__(self, config, proxy, fmt, transport, seed, state, api, request_id, user):
        self.config = config
        self.proxy = proxy
        self.format = fmt
        self.transport = transport
        self.seed = seed
        self.state = Path(state) if state else ops.default_state_dir()
        self.api = api
        self.request_id = request_id
        self.user = user
        self._ctx: ops.GridContext | None = None

    @property
    def proxy_path(self) -> Path:
        return Path(self.proxy) if self.proxy else self.state / "proxy"

    def context(self) -> ops.GridContext:
        if self._ctx is None:
            self._ctx = ops.open_context(self.config, self.transport, self.seed, self.state)
        return self._ctx

    def credential(self):
        return ops.load_proxy(self.context(), self.proxy_path)

    def client(self):
        return self.context().client(self.credential())

    def close(self) -> None:
        if self._ctx is not None:
            self._ctx.close()
            self._ctx = None


# -- output ------------------------------------------------------------------------
def _plain(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_plain(v) for v in value]
    return value


def _text(value: Any) -> str:
    if isinstance(value, dict):
        lines = []
        for key, item in value.items():
            rendered = item if isinstance(item, (str, int, float)) or item is None else json.dumps(_plain(item))
            lines.append(f"{key}: {rendered}")
        return "\n".join(lines)
    if isinstance(value, list):
        return "\n".join(json.dumps(_plain(v), sort_keys=True) for v in value)
    return str(value)


def emit(opts: Options, record: Any) -> None:
    if opts.format == "record":
        sys.stdout.buffer.write(encode_value(record))
        sys.stdout.buffer.flush()
    else:
        click.echo(_text(record))


def run_op(fn: Callable[[Options], Any]) -> Callable:
    """Run one operation and translate grid errors into the exit-code contract."""

    @click.pass_obj
    def wrapper(opts: Options, **kwargs):
        try:
            result = fn(opts, **kwargs)
            if result is not None:
                emit(opts, result)
        except GridError as exc:
            click.echo(f"error: {exc.code}: {exc.message}", err=True)
            code = 3 if isinstance(exc, TransportError) else exc.exit_code
            sys.exit(code)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        finally:
            opts.close()

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def api_call(opts: Options, method: str, path: str, body: dict | None = None) -> Any:
    from .api import call_api

    return call_api(opts.api, method, path, body)


# -- command tree ----------------------------------------------------------------------
@click.group()
@click.option("--config", type=click.Path(dir_okay=False), envvar="GRIDKIT_CONFIG", help="Grid config (scenario) file.")
@click.option("--proxy", type=click.Path(dir_okay=False), envvar="GRIDKIT_PROXY", help="Proxy credential file.")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="text", show_default=True)
@click.option("--transport", type=click.Choice(["sim", "socket"]), default="sim", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the config seed (sim only).")
@click.option("--state", type=click.Path(file_okay=False), envvar="GRIDKIT_STATE", help="Key and pid directory.")
@click.option("--api", default=None, help="Send job and discovery requests to a gridkit HTTP service.")
@click.option("--request-id", default=None, help="Fixed request id, for idempotent retries.")
@click.option("--user", default=None, help="User identity or short name from the config.")
@click.pass_context
def cli(ctx, config, proxy, fmt, transport, seed, state, api, request_id, user):
    """Grid operator commands."""
    if seed is not None and transport != "sim":
        raise click.UsageError("--seed is honored only with --transport sim")
    ctx.obj = Options(config, proxy, fmt, transport, seed, state, api, request_id, user)


def _pick_user(opts: Options) -> str:
    scn = opts.context().scenario
    if opts.user:
        return scn.user(opts.user).identity if _known_user(scn, opts.user) else opts.user
    users = scn.users()
    if len(users) != 1:
        raise ValidationError("--user", f"choose one of {sorted(u.name for u in users)}")
    return users[0].identity


def _known_user(scn, name: str) -> bool:
    try:
        scn.user(name)
    except KeyError:
        return False
    return True


# id ---------------------------------------------------------------------------------
@cli.group("id")
def id_group():
    """Long-term identities."""


@id_group.command("issue")
@click.argument("subject")
@click.option("--kind", type=click.Choice(["user", "service"]), default="user")
@click.option("--right", "rights", multiple=True, help="Right to grant (repeatable); default all.")
@click.option("--lifetime", type=float, default=365 * 86400.0)
@run_op
def id_issue(opts, subject, kind, rights, lifetime):
    """Issue a credential for SUBJECT from the configured authority."""
    return ops.issue_identity(opts.context(), subject, kind, rights or ("*",), lifetime)


# proxy ------------------------------------------------------------------------------
@cli.group("proxy")
def proxy_group():
    """Short-lived proxy credentials."""


@proxy_group.command("init")
@click.option("--restrict", "restrict", multiple=True, help="Keep only these rights (repeatable).")
@click.option("--lifetime", type=float, default=ops.DEFAULT_PROXY_LIFETIME, show_default=True)
@run_op
def proxy_init(opts, restrict, lifetime):
    """Sign a proxy with the user's long-term key and write it to the proxy file."""
    ctx = opts.context()
    delegation = ops.proxy_init(ctx, _pick_user(opts), restrict or ("*",), lifetime)
    ops.save_proxy(delegation, opts.proxy_path)
    return ops.proxy_info(delegation.proxy, ctx.now())


@proxy_group.command("info")
@run_op
def proxy_info(opts):
    """Subject, effective rights, remaining lifetime and chain depth of the proxy file."""
    return ops.proxy_info(opts.credential(), opts.context().now())


def _tag(tag: str | None) -> str:
    if tag:
        return tag
    return getpass.getpass("tag: ")


@proxy_group.command("store")
@click.option("--tag", default=None, help="Retrieval tag; prompted when omitted.")
@click.option("--lifetime", type=float, default=ops.DEFAULT_PROXY_LIFETIME)
@run_op
def proxy_store(opts, tag, lifetime):
    """Deposit a proxy derived from the proxy file in the credential store."""
    return ops.proxy_store(opts.context(), opts.credential(), _tag(tag), lifetime)


@proxy_group.command("fetch")
@click.option("--tag", default=None, help="Retrieval tag; prompted when omitted.")
@run_op
def proxy_fetch(opts, tag):
    """Retrieve a stored proxy into the proxy file."""
    ctx = opts.context()
    delegation = ops.proxy_fetch(ctx, _pick_user(opts), _tag(tag))
    ops.save_proxy(delegation, opts.proxy_path)
    return ops.proxy_info(delegation.proxy, ctx.now())


# daemons ----------------------------------------------------------------------------
def _daemon(opts: Options, kind: str, name: str | None) -> dict:
    if opts.transport != "socket":
        raise ValidationError("--transport", "daemons run only with --transport socket")
    ctx = opts.context()
    stopping = {"flag": False}

    def stop(_signum, _frame):
        stopping["flag"] = True

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    announced = {"done": False}

    def until() -> bool:
        if not announced["done"]:
            announced["done"] = True
            address = ctx.resolve(name or kind)
            where = ctx.net.directory.get(address)
            emit(opts, {"daemon": kind, "address": str(address), "listen": f"{where[0]}:{where[1]}" if where else None})
            sys.stdout.flush()
        return stopping["flag"]

    ops.serve(ctx, kind, name, until=until)
    return None


@cli.group("host")
def host_group():
    """Resource host daemons."""


@host_group.command("start")
@click.argument("name")
@run_op
def host_start(opts, name):
    """Serve host NAME until signaled."""
    return _daemon(opts, "host", name)


@host_group.command("stop")
@click.argument("name")
@run_op
def host_stop(opts, name):
    """Signal a daemon started from this state directory."""
    return ops.stop_daemon(opts.state, name)


@cli.group("index")
def index_group():
    """Index daemon."""


@index_group.command("start")
@run_op
def index_start(opts):
    """Serve the configured index until signaled."""
    return _daemon(opts, "index", None)


@cli.group("ca")
def ca_group():
    """Community authorization daemon."""


@ca_group.command("start")
@run_op
def ca_start(opts):
    """Serve the configured community authorization service until signaled."""
    return _daemon(opts, "ca", None)


@cli.group("service")
def service_group():
    """Other collective daemons."""


@service_group.command("start")
@click.argument("kind", type=click.Choice(["coalloc", "cred-store"]))
@run_op
def service_start(opts, kind):
    """Serve the configured co-reservation service or credential store until signaled."""
    return _daemon(opts, kind, None)


# jobs -------------------------------------------------------------------------------
@cli.command("submit")
@click.option("--host", required=True)
@click.option("--exe", "executable", required=True)
@click.option("--units", type=float, required=True)
@click.option("--vo", default="")
@click.option("--stage-from", default=None, help="Storage endpoint holding the inputs.")
@click.option("--input", "inputs", multiple=True, help="Path to stage (repeatable).")
@click.option("--constraint", "constraints", multiple=True, help="key=value job attribute (repeatable).")
@click.option("--wait", is_flag=True, help="Follow the job to a terminal state.")
@run_op
def submit(opts, host, executable, units, vo, stage_from, inputs, constraints, wait):
    """Allocate a job on HOST."""
    attrs = _pairs(constraints, "--constraint")
    if opts.api:
        return api_call(opts, "POST", "/jobs", {
            "user": opts.user, "host": host, "executable": executable, "work_units": units, "vo": vo,
            "request_id": opts.request_id, "constraints": attrs, "wait": wait,
        })
    ctx = opts.context()
    client = opts.client()
    staged = (str(ctx.resolve(stage_from)), tuple(inputs)) if stage_from else None
    out = ops.submit(client, ctx.resolve(host), executable, units, vo, opts.request_id, staged, attrs)
    if wait:
        out["record"] = ops.wait(ctx, client, ctx.resolve(host), out["job_id"])
    return out


@cli.command("status")
@click.option("--host", required=True)
@click.argument("job_id")
@run_op
def status(opts, host, job_id):
    """Current record of JOB_ID."""
    if opts.api:
        query = f"?{urlencode({'user': opts.user})}" if opts.user else ""
        return api_call(opts, "GET", f"/jobs/{quote(host, safe='')}/{quote(job_id, safe='')}{query}", None)
    return ops.status(opts.client(), opts.context().resolve(host), job_id)


@cli.command("cancel")
@click.option("--host", required=True)
@click.argument("job_id")
@run_op
def cancel(opts, host, job_id):
    """Cancel JOB_ID."""
    if opts.api:
        path = f"/jobs/{quote(host, safe='')}/{quote(job_id, safe='')}/cancel"
        return api_call(opts, "POST", path, {"user": opts.user})
    return ops.cancel(opts.client(), opts.context().resolve(host), job_id)


def _split_location(text: str, flag: str) -> tuple[str, str]:
    endpoint, sep, path = text.partition(":/")
    if not sep:
        raise ValidationError(flag, "expected ENDPOINT:/path")
    return endpoint, "/" + path


@cli.command("xfer")
@click.argument("source")
@click.argument("dest")
@click.option("--offset", type=int, default=0)
@click.option("--length", type=int, default=None)
@click.option("--streams", type=int, default=1)
@click.option("--vo", default="")
@run_op
def xfer(opts, source, dest, offset, length, streams, vo):
    """Third-party copy SOURCE (host:/path) to DEST (host:/path)."""
    ctx = opts.context()
    src, src_path = _split_location(source, "source")
    dst, dst_path = _split_location(dest, "dest")
    return ops.xfer(opts.client(), ctx.resolve(src), src_path, ctx.resolve(dst), dst_path, offset=offset,
                    length=length, streams=streams, vo=vo, request_id=opts.request_id)


def _pairs(items, flag: str) -> dict:
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ValidationError(flag, f"expected key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


@cli.command("discover")
@click.option("--require", "requirements", multiple=True, help="key=value requirement (repeatable).")
@click.option("--tag", "tags", multiple=True)
@click.option("--view", default=None)
@run_op
def discover(opts, requirements, tags, view):
    """Query the index and rank matching resources."""
    reqs = _pairs(requirements, "--require")
    if tags:
        reqs["tags"] = list(tags)
    if opts.api:
        return api_call(opts, "POST", "/discover", {"user": opts.user, "requirements": reqs, "view": view})
    ctx = opts.context()
    return ops.discover(opts.client(), ctx.index_address(), reqs, view)


def _leg(text: str) -> Leg:
    parts = text.split(",")
    if len(parts) not in (3, 4):
        raise ValidationError("--leg", f"expected HOST,START,END[,AMOUNT], got {text!r}")
    try:
        start, end = float(parts[1]), float(parts[2])
        amount = int(parts[3]) if len(parts) == 4 else 1
    except ValueError:
        raise ValidationError("--leg", f"bad number in {text!r}") from None
    return Leg(parts[0] or None, start, end, amount)


@cli.command("coalloc")
@click.option("--leg", "legs", multiple=True, required=True, help="HOST,START,END[,AMOUNT] (repeatable).")
@click.option("--vo", default="")
@run_op
def coalloc(opts, legs, vo):
    """Reserve every leg or none."""
    ctx = opts.context()
    resolved = []
    for text in legs:
        leg = _leg(text)
        host = str(ctx.resolve(leg.host)) if leg.host else None
        resolved.append(Leg(host, leg.start, leg.end, leg.amount))
    return ops.coalloc(ctx, opts.client(), resolved, opts.request_id, vo)


# replicas and capabilities -----------------------------------------------------------
@cli.group("replica")
def replica_group():
    """Replica catalog."""


@replica_group.command("add")
@click.option("--catalog", required=True)
@click.argument("logical")
@click.argument("location")
@click.option("--size", type=int, default=None)
@run_op
def replica_add(opts, catalog, logical, location, size):
    """Register LOCATION (storage:/path) as a copy of LOGICAL."""
    ctx = opts.context()
    storage, path = _split_location(location, "location")
    return ops.replica_add(opts.client(), ctx.resolve(catalog), logical, ctx.resolve(storage), path, size)


@replica_group.command("locate")
@click.option("--catalog", required=True)
@click.argument("logical")
@run_op
def replica_locate(opts, catalog, logical):
    """List the copies of LOGICAL."""
    return ops.replica_find(opts.client(), opts.context().resolve(catalog), logical)


@cli.group("cap")
def cap_group():
    """Community capabilities."""


@cap_group.command("request")
@click.option("--vo", required=True)
@click.option("--op", "operations", multiple=True, required=True)
@click.option("--resource", default="*")
@click.option("--lifetime", type=float, default=3600.0)
@run_op
def cap_request(opts, vo, operations, resource, lifetime):
    """Ask the community authorization service for a capability."""
    ctx = opts.context()
    if ctx.scenario.cas is None:
        raise ValidationError("services.cas", "the grid config declares no community authorization service")
    return ops.cap_request(opts.client(), ctx.resolve(ctx.scenario.cas.name), vo, operations, resource, lifetime)


# scenarios -------------------------------------------------------------------------------
@cli.group("scenario")
def scenario_group():
    """Scenario files."""


@scenario_group.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@run_op
def scenario_validate(opts, path):
    """Check PATH against every declaration rule."""
    if opts.api:
        return api_call(opts, "POST", "/scenario/validate", {"scenario": _read_json(path)})
    return ops.scenario_validate(path)


@scenario_group.command("run")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False), default=None,
              help="Write the report here (plus a .txt summary).")
@run_op
def scenario_run(opts, path, report_path):
    """Run PATH to completion and print its report."""
    report = ops.scenario_run(path, opts.transport, opts.seed)
    if report_path:
        report.write(report_path)
    if opts.format == "record":
        sys.stdout.buffer.write(report.to_bytes())
    else:
        click.echo(report.summary_text(), nl=False)
    return None


@cli.command("serve-api")
@click.option("--host", "bind", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.pass_obj
def serve_api(opts, bind, port):
    """Serve the HTTP API over the simulated grid in --config."""
    if not opts.config:
        raise click.UsageError("--config is required")
    from .api import serve

    serve(opts.config, bind, port, opts.seed)


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError(path, "the HTTP service accepts JSON scenario files") from None


def main(argv: list[str] | None = None) -> None:
    cli.main(args=argv, prog_name="gridctl")


if __name__ == "__main__":
    main()
