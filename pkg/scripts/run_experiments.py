"""Run every bundled scenario and print its breakdown table and Gantt chart.

    python scripts/run_experiments.py                 # all bundled scenarios
    python scripts/run_experiments.py sharing-4slices --out runs/
"""

import argparse
from pathlib import Path

from slicerm import report
from slicerm.engine import run_scenario
from slicerm.scenarios import BUNDLED, load_bundled


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="*", default=list(BUNDLED), help="bundled scenario names")
    ap.add_argument("--out", type=Path, help="also write run artifacts under OUT/<name>/")
    ap.add_argument("--width", type=int, default=72)
    args = ap.parse_args()

    for name in args.names:
        eng = run_scenario(load_bundled(name))
        tls = report.timelines_from_engine(eng)
        print(f"== {name}")
        print(report.breakdown_csv(tls).replace("\r\n", "\n"), end="")
        print(report.gantt(tls, width=args.width))
        if args.out:
            report.write_run(eng, args.out / name)


if __name__ == "__main__":
    main()
