"""Command line entry point: ``soac generate|calibrate|baseline|eval|gradcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from . import experiment as ex
from .gradcheck import GradcheckSettings, run_gradcheck


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soac", description="Targetless spatio-temporal rig calibration.")
    p.add_argument("command", choices=("generate", "calibrate", "baseline", "eval", "gradcheck"))
    p.add_argument("--config", help="experiment TOML file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, action="append", help="run only this seed (repeatable)")
    p.add_argument("--mode", choices=ex.MODES, help="override the configured mode")
    p.add_argument("--out", help="output directory (dataset for generate, results otherwise)")
    p.add_argument("--data", help="dataset directory override")
    p.add_argument("--perturb", type=float, help="gradcheck: finite-difference step for every check")
    p.add_argument("--configs", type=int, default=100, help="gradcheck: number of random configurations")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def _config(path: Optional[str]) -> ex.ExperimentConfig:
    return ex.load_config(path) if path else ex.ExperimentConfig()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            seed = args.seed[0] if args.seed else 0
            report = run_gradcheck(GradcheckSettings(n_configs=args.configs, seed=seed, perturb=args.perturb))
            sys.stdout.write(report.format())
            return 0 if report.passed else 1
        cfg = _config(args.config)
        if args.command == "generate":
            m = ex.generate(cfg, args.out)
            n_cam = sum(len(v) for v in m.camera_files.values())
            n_lid = sum(len(v) for v in m.lidar_files.values())
            print(f"wrote {m.path} ({m.trajectory_kind}): {len(m.camera_files)} cameras, {n_cam} images; "
                  f"{len(m.lidar_files)} lidar, {n_lid} scans; scene {m.scene_hash}")
            return 0
        if args.command in ("calibrate", "baseline"):
            mode = "baseline" if args.command == "baseline" else args.mode

            def progress(r):
                errs = ", ".join(f"{s} {e.rot_deg:.3f}deg {e.trans_cm:.2f}cm {e.time_ms:.2f}ms"
                                 for s, e in r.errors.items())
                print(f"[{r.mode} seed {r.seed}] {errs} ({r.wall_seconds:.1f}s)", flush=True)

            out = ex.calibrate(cfg, args.seed, mode, args.out, args.data, progress)
            print(ex.format_boxstats(ex.collect_rows(out)), end="")
            print(f"results in {out}")
            return 0
        out, report = ex.evaluate(cfg, args.out, args.data)
        print(ex.format_boxstats(ex.collect_rows(out)), end="")
        if report is not None:
            print(report.format(), end="")
        print(f"summaries in {out}")
        return 0
    except (ex.ConfigParseError, ex.MissingDataError, OSError) as exc:
        print(f"soac: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
