"""Command-line entry point.

Offline:   slicerm run mnist-3configs --out runs/mnist
           slicerm report runs/mnist --format gantt
Server:    slicerm serve --cluster mnist-3configs --listen 127.0.0.1:8080
Client:    slicerm submit job.json; slicerm advance 600; slicerm collect --out runs/api
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import report
from .engine import EngineError, run_scenario
from .loop import SIM, WALL, EngineLoop
from .model import (ParseError, Scenario, Timeline, TimelineError, ValidationError, cluster_from_doc,
                    parse_scenario, to_ms)
from .scenarios import BUNDLED, load_bundled

DEFAULT_SERVER = "http://127.0.0.1:8080"

EXIT_USAGE = 2
EXIT_CONNECT = 3
HTTP_EXIT = {404: 4, 409: 9, 422: 22}


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def load_scenario(ref: str) -> Scenario:
    """A bundled scenario name or a path to a scenario/cluster document."""
    if ref in BUNDLED and not Path(ref).exists():
        return load_bundled(ref)
    try:
        text = Path(ref).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot read {ref}: {e}", EXIT_USAGE) from e
    try:
        doc = json.loads(text)
        if isinstance(doc, dict) and "cluster" not in doc and "nodes" in doc:
            return Scenario(cluster_from_doc(doc))
        return parse_scenario(text)
    except (json.JSONDecodeError, ParseError, ValidationError) as e:
        raise CliError(f"{ref}: {e}", EXIT_USAGE) from e


def _has_commands(sc: Scenario) -> bool:
    return any(t.command is not None for _, j in sc.jobs for t in j.tasks)


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.strict_fifo:
        sc = Scenario(sc.cluster, sc.jobs, sc.seed, True, sc.name)
    try:
        if _has_commands(sc):
            engine = _run_wall(sc)
        else:
            engine = run_scenario(sc)
    except (EngineError, ValidationError) as e:
        raise CliError(f"scenario rejected: {e}", EXIT_USAGE) from e
    tls = report.write_run(engine, args.out)
    print(f"{len(tls)} slice(s), {len(engine.events)} events -> {args.out}")
    return 0


def _run_wall(sc: Scenario):
    loop = EngineLoop(sc.cluster, WALL, sc.strict_fifo, sc.seed)
    try:
        t0 = time.monotonic()
        for at_s, job in sc.jobs:
            delay = at_s - (time.monotonic() - t0)
            if delay > 0:
                time.sleep(delay)
            loop.call(lambda eng, j=job: eng.submit(j))
        loop.wait_idle()
        return loop.engine
    finally:
        loop.close()


def cmd_report(args) -> int:
    try:
        tls = report.load_timelines(args.run_dir)
    except (FileNotFoundError, ParseError, TimelineError) as e:
        raise CliError(f"bad run directory: {e}", 1) from e
    if args.format == "csv":
        sys.stdout.write(report.breakdown_csv(tls))
    else:
        sys.stdout.write(report.gantt(tls, width=args.width))
    return 0


def _listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise CliError(f"--listen expects host:port, got {addr!r}", EXIT_USAGE)
    return host or "127.0.0.1", int(port)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    sc = load_scenario(args.cluster)
    host, port = _listen(args.listen)
    loop = EngineLoop(sc.cluster, args.mode, args.strict_fifo or sc.strict_fifo, sc.seed)
    try:
        uvicorn.run(create_app(loop), host=host, port=port, log_level="warning")
    finally:
        loop.close()
    return 0


# --- client verbs -------------------------------------------------------

def _request(args, method: str, path: str, **kw):
    import httpx

    try:
        r = httpx.request(method, args.server.rstrip("/") + path, timeout=30, **kw)
    except httpx.HTTPError as e:
        raise CliError(f"cannot reach server at {args.server}: {e}", EXIT_CONNECT) from e
    if r.status_code >= 400:
        try:
            msg = r.json().get("message") or r.text
        except ValueError:
            msg = r.text
        raise CliError(f"HTTP {r.status_code}: {msg}", HTTP_EXIT.get(r.status_code, 1))
    return r.json()


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_submit(args) -> int:
    try:
        body = Path(args.job).read_bytes()
    except OSError as e:
        raise CliError(f"cannot read {args.job}: {e}", EXIT_USAGE) from e
    _print(_request(args, "POST", "/v1/jobs", content=body, headers={"Content-Type": "application/json"}))
    return 0


def cmd_status(args) -> int:
    _print(_request(args, "GET", f"/v1/jobs/{args.job_id}"))
    return 0


def cmd_timeline(args) -> int:
    _print(_request(args, "GET", f"/v1/jobs/{args.job_id}/timeline"))
    return 0


def cmd_cancel(args) -> int:
    _print(_request(args, "DELETE", f"/v1/jobs/{args.job_id}"))
    return 0


def cmd_advance(args) -> int:
    _print(_request(args, "POST", "/v1/clock/advance", json={"seconds": args.seconds}))
    return 0


def cmd_cluster(args) -> int:
    _print(_request(args, "GET", "/v1/cluster"))
    return 0


def fetch_events(get, page: int = 500) -> list[dict]:
    out, since = [], 0
    while True:
        doc = get(f"/v1/events?since={since}&limit={page}")
        out += doc["events"]
        if not doc["events"]:
            return out
        since = doc["next"]


def fetch_timelines(get, events: list[dict]) -> dict[str, Timeline]:
    tls = {}
    for ev in events:
        if ev["kind"] == "SUBMITTED":
            st = get(f"/v1/jobs/{ev['job_id']}")
            if st["phase"] in ("DONE", "FAILED") and st["timestamps"]:
                tls[ev["job_id"]] = Timeline.from_doc(get(f"/v1/jobs/{ev['job_id']}/timeline")["intervals"])
    return tls


def cmd_events(args) -> int:
    for ev in fetch_events(lambda p: _request(args, "GET", p))[args.since:]:
        print(json.dumps(ev))
    return 0


def cmd_collect(args) -> int:
    """Pull the server's event log and finished timelines into a run dir."""
    get = lambda p: _request(args, "GET", p)  # noqa: E731
    events = fetch_events(get)
    tls = fetch_timelines(get, events)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = "".join(json.dumps({k: e[k] for k in ("time_s", "job_id", "kind", "detail")}) + "\n" for e in events)
    (out / report.EVENTS_FILE).write_text(lines, encoding="utf-8")
    (out / report.TIMELINES_FILE).write_text(report.timelines_doc(tls), encoding="utf-8")
    (out / report.BREAKDOWN_FILE).write_text(report.breakdown_csv(tls), encoding="utf-8")
    print(f"{len(tls)} slice(s), {len(events)} events -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicerm", description="Disaggregated slice resource manager")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a scenario offline")
    r.add_argument("scenario", help=f"scenario file or bundled name ({', '.join(BUNDLED)})")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--strict-fifo", action="store_true", help="head-of-line blocking instead of skip")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render a run directory")
    rep.add_argument("run_dir")
    rep.add_argument("--format", choices=("csv", "gantt"), default="csv")
    rep.add_argument("--width", type=int, default=72)
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="run the REST control plane")
    s.add_argument("--cluster", required=True, help="cluster or scenario file, or bundled scenario name")
    s.add_argument("--listen", default="127.0.0.1:8080")
    s.add_argument("--mode", choices=(SIM, WALL), default=SIM)
    s.add_argument("--strict-fifo", action="store_true")
    s.set_defaults(func=cmd_serve)

    def client(name, func, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--server", default=DEFAULT_SERVER)
        c.set_defaults(func=func)
        return c

    client("submit", cmd_submit, "submit a job document").add_argument("job")
    client("status", cmd_status, "show job status").add_argument("job_id")
    client("timeline", cmd_timeline, "show a finished job's timeline").add_argument("job_id")
    client("cancel", cmd_cancel, "cancel a job").add_argument("job_id")
    client("advance", cmd_advance, "advance the simulated clock").add_argument("seconds", type=float)
    client("cluster", cmd_cluster, "show inventory and attachments")
    client("events", cmd_events, "print the event log").add_argument("--since", type=int, default=0)
    client("collect", cmd_collect, "write the server's run to a directory").add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"slicerm: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
