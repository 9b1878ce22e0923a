"""Two-bump example under grid refinement: estimators, sandwich gap, Aubry set.

    python3 scripts/refinement_study.py [--ns 16 32 64] [--out DIR]
"""

import argparse
import json
from pathlib import Path

from weakkam.config import RunConfig, build_problem
from weakkam.pipeline import run_aubry, run_critical

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--ns", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--out", default=None, help="write refinement.json here")
    args = ap.parse_args()

    rows = []
    print(f"{'n':>4} {'K':>2} {'longtime':>10} {'ergodic':>10} {'lower':>10} {'upper':>10} {'gap':>8} {'aubry':>6}")
    for n in args.ns:
        cfg = RunConfig.load(ROOT / "configs" / ("two_bump_n64.json" if n >= 64 else "two_bump.json"))
        cfg.grid.n = n
        cfg.validate()
        p = build_problem(cfg)
        cert = run_critical(p).certificate
        aub = run_aubry(p, cert.c_ergodic)
        row = {"n": n, "K_modes": cfg.critical.K_modes, "c_longtime": cert.c_longtime, "c_ergodic": cert.c_ergodic,
               "c_lower": cert.c_lower, "c_upper": cert.c_upper, "gap": cert.gap, "aubry_size": len(aub.nodes)}
        rows.append(row)
        print(f"{n:4d} {row['K_modes']:2d} {cert.c_longtime:10.5f} {cert.c_ergodic:10.5f} {cert.c_lower:10.5f} "
              f"{cert.c_upper:10.5f} {cert.gap:8.5f} {row['aubry_size']:6d}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "refinement.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
