"""Command-line entry point.

    weakkam critical|aubry|mather|grushin-demo|report --config PATH
            [--seed N] [--out DIR] [--threads N]

Exit codes: 0 success, 2 failed check or invariant, 3 numerical
non-convergence, 4 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CHECK, EXIT_NONCONV, EXIT_CONFIG = 0, 2, 3, 4
VERBS = ("critical", "aubry", "mather", "grushin-demo", "report")

logger = logging.getLogger("weakkam")


def _set_threads(n: int) -> None:
    # BLAS stays single-threaded so that dense reductions are reproducible;
    # --threads only drives the compiled kernels.
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    if "numba" in sys.modules:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    else:
        os.environ["NUMBA_NUM_THREADS"] = str(n)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="weakkam", description=__doc__.split("\n\n")[0])
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    ap.add_argument("--threads", type=int, default=1, help="threads for the compiled kernels")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _summary(checks: dict) -> list[str]:
    return [f"{k}: value={v['value']:.6g} threshold={v['threshold']:.6g} {'PASS' if v['ok'] else 'FAIL'}"
            for k, v in checks.items()]


def cmd_critical(cfg, out):
    from .config import build_problem
    from .pipeline import run_critical, write_critical

    p = build_problem(cfg)
    run = run_critical(p)
    write_critical(out, run, p)
    c = run.certificate
    print(f"c_longtime={c.c_longtime:.6g} c_ergodic={c.c_ergodic:.6g} "
          f"c_lower={c.c_lower:.6g} c_upper={c.c_upper:.6g} gap={c.gap:.6g}")
    return run


def cmd_aubry(cfg, out, p=None):
    from .config import build_problem
    from .pipeline import run_aubry, write_aubry

    p = p or build_problem(cfg)
    chi = None
    if cfg.critical.c is None:
        logger.info("no critical value in the configuration; running the estimators first")
        crit = cmd_critical(cfg, out)
        c, chi = crit.certificate.c_ergodic, crit.ergodic.chi
    else:
        c = float(cfg.critical.c)
    run = run_aubry(p, c)
    write_aubry(out, run, p)
    print(f"Aubry set: {len(run.nodes)} of {len(run.barrier.sources)} source nodes (eps={run.eps:.3g})")
    for line in _summary(run.checks):
        print("  " + line)
    return run, chi, c


def cmd_mather(cfg, out):
    from .config import build_problem
    from .pipeline import run_ergodic, run_mather, write_mather

    p = build_problem(cfg)
    aub, chi, _ = cmd_aubry(cfg, out, p)
    if chi is None:
        chi = run_ergodic(p).chi
    run = run_mather(p, chi, aub.nodes)
    write_mather(out, run, p)
    print(f"Mather LP value {run.lp.value:.6g}, {len(run.mather.projected)} support states")
    for line in _summary(run.checks):
        print("  " + line)
    return {**aub.checks, **run.checks}


def cmd_grushin_demo(cfg, out):
    from .config import build_problem
    from .pipeline import run_grushin_demo, write_grushin

    if not cfg.frame.name.startswith("grushin") or cfg.frame.file is not None:
        logger.info("grushin-demo: frame %r replaced by grushin-periodic", cfg.frame.name)
        cfg.frame.name, cfg.frame.file = "grushin-periodic", None
    p = build_problem(cfg)
    run = run_grushin_demo(p)
    write_grushin(out, run, p)
    print(out.path("grushin_report.txt").read_text())
    return run.checks


def cmd_report(cfg, out):
    lines = []
    for name in ("certificate.json", "aubry_checks.json", "mather_checks.json", "grushin_demo.json",
                 "lp_certificate.json"):
        path = out.path(name)
        if not path.exists():
            continue
        doc = json.loads(path.read_text())
        if doc.get("config_hash") != out.config_hash:
            lines.append(f"{name}: written for config {doc.get('config_hash')}, skipped")
            continue
        lines.append(f"[{name}]")
        for key in ("c_longtime", "c_ergodic", "c_lower", "c_upper", "gap", "value", "c_est", "aubry_size", "eps"):
            if key in doc:
                lines.append(f"  {key} {doc[key]!r}")
        lines += ["  " + s for s in _summary(doc.get("checks", {}))]
    if not lines:
        lines = ["no results for this configuration in the output directory"]
    out.text("report.txt", lines)
    print("\n".join(lines))
    bad = [ln for ln in lines if ln.endswith("FAIL")]
    return {"report": {"value": len(bad), "threshold": 0.0, "ok": not bad}}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(args.threads)

    from .config import ConfigError, RunConfig
    from .critical import SandwichError
    from .lagrangian import CoercivityError
    from .lax_oleinik import NonConvergenceError
    from .outputs import OutputWriter
    from .pipeline import failed

    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.output_dir = args.out
        out = OutputWriter(cfg.output_dir, cfg.hash())
        handler = {"critical": cmd_critical, "aubry": lambda c, o: cmd_aubry(c, o)[0].checks,
                   "mather": cmd_mather, "grushin-demo": cmd_grushin_demo, "report": cmd_report}[args.verb]
        result = handler(cfg, out)
    except (ConfigError, CoercivityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except SandwichError as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CHECK

    checks = result if isinstance(result, dict) else {}
    bad = failed(checks)
    if bad:
        print(f"failed checks: {', '.join(bad)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
