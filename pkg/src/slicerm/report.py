"""Run outputs: event log, timelines, breakdown CSV and a text Gantt chart."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .model import PHASES, ParseError, Timeline, TimelineError, breakdown

EVENTS_FILE = "events.jsonl"
TIMELINES_FILE = "timelines.json"
BREAKDOWN_FILE = "breakdown.csv"

CSV_COLUMNS = ["job_id", *PHASES, "makespan", "overhead_fraction"]

# one glyph per lifecycle phase, in PHASES order
GLYPHS = "AMPLRDX"
LEGEND = "  ".join(f"{g}={p}" for g, p in zip(GLYPHS, PHASES))


def events_jsonl(events) -> str:
    return "".join(ev.to_json() + "\n" for ev in events)


def timelines_doc(timelines: dict[str, Timeline]) -> str:
    return json.dumps({jid: t.to_doc() for jid, t in timelines.items()}, indent=2) + "\n"


def breakdown_csv(timelines: dict[str, Timeline]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for jid, t in timelines.items():
        b = breakdown(t)
        w.writerow([jid, *(f"{b.durations_ms[p] / 1000:.3f}" for p in PHASES),
                    f"{b.makespan_ms / 1000:.3f}", f"{b.overhead_fraction:.6f}"])
    return buf.getvalue()


def timelines_from_engine(engine) -> dict[str, Timeline]:
    """Timelines of every allocated, finished slice, in submission order."""
    out = {}
    for jid, rt in engine.slices.items():
        if rt.finished and rt.allocated_ms is not None:
            out[jid] = engine.timeline_of(jid)
    return out


def write_run(engine, out_dir) -> dict[str, Timeline]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tls = timelines_from_engine(engine)
    (out / EVENTS_FILE).write_text(events_jsonl(engine.events), encoding="utf-8")
    (out / TIMELINES_FILE).write_text(timelines_doc(tls), encoding="utf-8")
    (out / BREAKDOWN_FILE).write_text(breakdown_csv(tls), encoding="utf-8")
    return tls


def load_timelines(run_dir) -> dict[str, Timeline]:
    path = Path(run_dir) / TIMELINES_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected an object")
    return {jid: Timeline.from_doc(t) for jid, t in doc.items()}


def gantt(timelines: dict[str, Timeline], width: int = 72) -> str:
    """Fixed-width chart, one row per slice, each column a time bucket.

    A bucket shows the phase that overlaps it most; '.' means the slice was
    not yet allocated or already gone.
    """
    if not timelines:
        return ""
    t0 = min(t.start_ms for t in timelines.values())
    t1 = max(t.end_ms for t in timelines.values())
    span = max(t1 - t0, 1)
    label_w = max(len(j) for j in timelines)
    lines = [f"{'':{label_w}} |{'t=' + format(t0 / 1000, 'g') + 's':<{width // 2}}"
             f"{format(t1 / 1000, 'g') + 's':>{width - width // 2}}|"]
    for jid, t in timelines.items():
        row = []
        for b in range(width):
            lo = t0 + span * b / width
            hi = t0 + span * (b + 1) / width
            best, glyph = 0.0, "."
            for g, (s, e) in zip(GLYPHS, t.intervals):
                ov = min(hi, e) - max(lo, s)
                if ov > best:
                    best, glyph = ov, g
            row.append(glyph)
        if t.end_ms == t.start_ms:
            # zero-length slice: mark its instant so the row is not blank
            col = min(int((t.start_ms - t0) * width / span), width - 1)
            row[col] = "|"
        lines.append(f"{jid:<{label_w}} |{''.join(row)}|")
    lines.append(LEGEND)
    return "\n".join(lines) + "\n"


__all__ = ["breakdown_csv", "events_jsonl", "gantt", "load_timelines", "timelines_doc",
           "timelines_from_engine", "write_run", "TimelineError"]
