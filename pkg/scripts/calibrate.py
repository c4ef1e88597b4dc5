"""Pick default LatencyParams that put every slice inside its target overhead window.

Grid-searches the six per-operation latencies so that every MNIST slice has
a construction+destruction share inside [0.32, 0.45], choosing the point
with the widest margin to both edges. ImageNet run durations are then sized
so both ImageNet slices land at 0.16% overhead. Candidates are screened with
the closed form of an isolated slice and the winner is re-checked by
simulation.

    python scripts/calibrate.py            # print the result
    python scripts/calibrate.py --write    # also rewrite the bundled JSON files
"""

import argparse
import json
import math
from pathlib import Path

import numpy as np

from slicerm.engine import run_scenario
from slicerm.model import LatencyParams, breakdown, latency_to_doc, render_scenario
from slicerm.report import timelines_from_engine
from slicerm.scenarios import (MNIST_RUN_S, imagenet_scenario, mnist_scenario, reference_cluster,
                               sharing_scenario)

MNIST_WINDOW = (0.32, 0.45)
IMAGENET_WINDOW = (0.0015, 0.0017)
IMAGENET_TARGET = 0.0016
IMAGENET_LABELS = ("4node-1gpu", "2node-2gpu")

GRID = {
    "attach_s": np.arange(2, 13, 2),
    "detach_s": np.arange(2, 13, 2),
    "machine_boot_s": np.arange(10, 121, 10),
    "destroy_s": np.arange(5, 41, 5),
    "prepare_s": np.array([1, 2, 5, 10]),
    "launch_per_device_s": np.arange(2, 21, 2),
}

OUT_DIR = Path(__file__).resolve().parents[1] / "src" / "slicerm" / "scenarios"


def screen(cluster):
    names = list(GRID)
    mesh = np.meshgrid(*(GRID[k] for k in names), indexing="ij")
    g = {k: m.ravel().astype(float) for k, m in zip(names, mesh)}
    dl_s = cluster.image_gb * 8 / cluster.link_gbps
    margin = np.full(g["attach_s"].shape, np.inf)
    for label, run in MNIST_RUN_S.items():
        n = int(label.split("node")[0])
        m = int(label.split("-")[1].rstrip("gpu"))
        # isolated slice: n equal downloads share the link, per-node ops serialize over m devices
        cd = (g["attach_s"] + g["detach_s"]) * m + n * dl_s + g["machine_boot_s"] + g["destroy_s"]
        total = cd + g["prepare_s"] + g["launch_per_device_s"] * m + run
        frac = cd / total
        margin = np.minimum(margin, np.minimum(frac - MNIST_WINDOW[0], MNIST_WINDOW[1] - frac))
    best = int(np.argmax(margin))
    return {k: float(g[k][best]) for k in names}, float(margin[best])


def fractions(scenario):
    eng = run_scenario(scenario)
    return {jid: breakdown(t) for jid, t in timelines_from_engine(eng).items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--write", action="store_true", help="rewrite calibrated_params.json and bundled scenarios")
    args = ap.parse_args()

    chosen, margin = screen(reference_cluster())
    params = LatencyParams(**chosen)
    print("chosen:", json.dumps(chosen), f"(min margin {margin:.4f})")

    mnist = mnist_scenario(params)
    for jid, b in fractions(mnist).items():
        ok = MNIST_WINDOW[0] <= b.overhead_fraction <= MNIST_WINDOW[1]
        print(f"  {jid:22s} overhead {b.overhead_fraction:.4f} {'ok' if ok else 'OUT OF WINDOW'}")
        assert ok

    # size ImageNet runs from a zero-length run: f = cd / (base + run)
    probe = fractions(imagenet_scenario({lbl: 0.0 for lbl in IMAGENET_LABELS}, params))
    run_s = {}
    for lbl in IMAGENET_LABELS:
        b = probe[f"imagenet-{lbl}"]
        run_s[lbl] = round(b.construction_destruction_ms / 1000 / IMAGENET_TARGET - b.makespan_ms / 1000, 2)
    imagenet = imagenet_scenario(run_s, params)
    for jid, b in fractions(imagenet).items():
        ok = IMAGENET_WINDOW[0] <= b.overhead_fraction <= IMAGENET_WINDOW[1]
        print(f"  {jid:22s} run {b.duration_s('run_task'):.2f}s overhead {b.overhead_fraction:.6f}"
              f" {'ok' if ok else 'OUT OF WINDOW'}")
        assert ok and math.isfinite(b.overhead_fraction)

    if args.write:
        (OUT_DIR / "calibrated_params.json").write_text(json.dumps(latency_to_doc(params), indent=2) + "\n")
        (OUT_DIR / "imagenet_run_s.json").write_text(json.dumps(run_s, indent=2) + "\n")
        for sc in (mnist, imagenet, sharing_scenario(params)):
            (OUT_DIR / f"{sc.name}.json").write_text(render_scenario(sc) + "\n")
        print("wrote", OUT_DIR)


if __name__ == "__main__":
    main()
