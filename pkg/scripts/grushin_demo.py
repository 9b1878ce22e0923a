"""Grushin upper bound against the estimated critical value for several drifts.

    python3 scripts/grushin_demo.py [--n 32] [--drifts 0 0.3 0.6] [--G zero] [--out DIR]
"""

import argparse
from pathlib import Path

from weakkam.config import RunConfig, build_problem
from weakkam.outputs import OutputWriter
from weakkam.pipeline import run_grushin_demo, write_grushin

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--drifts", type=float, nargs="+", default=[0.0, 0.3, 0.6])
    ap.add_argument("--G", default="zero", help="built-in potential name or a constant")
    ap.add_argument("--out", default=None, help="write one result directory per drift here")
    args = ap.parse_args()

    print(f"{'V1':>6} {'c_est':>10} {'bound':>10} {'lp_value':>10} ok")
    for v1 in args.drifts:
        cfg = RunConfig.load(ROOT / "configs" / "grushin_drift.json")
        cfg.grid.n = args.n
        cfg.lagrangian.V = [v1, 0.0]
        try:
            cfg.lagrangian.G = float(args.G)
        except ValueError:
            cfg.lagrangian.G = args.G
        cfg.validate()
        p = build_problem(cfg)
        run = run_grushin_demo(p)
        if args.out:
            write_grushin(OutputWriter(Path(args.out) / f"V1_{v1:g}", cfg.hash()), run, p)
        ok = all(c["ok"] for c in run.checks.values())
        print(f"{v1:6.3f} {run.c_est:10.5f} {run.bound['rhs']:10.5f} {run.lp.value:10.5f} {ok}")


if __name__ == "__main__":
    main()
