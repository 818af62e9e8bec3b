"""Command line entry point: ``ldcmia {run,score,attack,report,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, LdcMiaError, ReportError
from .pipeline import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_REPORT,
    KNOWN_ATTACKS,
    AblationSpec,
    RunConfig,
    StageError,
    cmd_ablate,
    cmd_report,
    default_out_root,
    run_attacks_from_dir,
    run_pipeline,
    run_score_only,
)

log = logging.getLogger("ldcmia")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.from_dict()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
        cfg.validate()
    return cfg


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    seed = cfg.seed if cfg is not None else 0
    return default_out_root() / f"run-{seed}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldcmia", description="Membership inference auditing with difficulty calibration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run config (merged over the built-in defaults)")
            sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="output / run directory (default: $LDCMIA_OUT/run-<seed>)")

    sp = sub.add_parser("run", help="full pipeline: split, train, score, attack, evaluate")
    common(sp)
    sp = sub.add_parser("score", help="train models and write score tables only")
    common(sp)
    sp = sub.add_parser("attack", help="run attacks on a scored run directory")
    common(sp, config=False)
    sp.add_argument("--attacks", nargs="+", choices=KNOWN_ATTACKS, help="attacks to run (default: from the run config)")
    sp = sub.add_parser("report", help="consolidated comparison table for a run directory")
    common(sp, config=False)
    sp.add_argument("run_dir", nargs="?", help="run directory (alternative to --out)")
    sp = sub.add_parser("ablate", help="sweep one variable over a grid")
    common(sp)
    sp.add_argument("--ablation", help="JSON ablation spec {kind, grid, repeats}; or an 'ablation' key in --config")
    sp.add_argument("--parallelism", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "run":
            cfg = _load_config(args)
            out = _out_dir(args, cfg)
            run_pipeline(cfg, out)
            rows = cmd_report(out)
            print((out / "report.txt").read_text(), end="")
            log.info("%d attacks written to %s", len(rows), out)
        elif args.verb == "score":
            cfg = _load_config(args)
            out = _out_dir(args, cfg)
            run_score_only(cfg, out)
            print(out)
        elif args.verb == "attack":
            if not args.out:
                raise ConfigError("attack needs --out pointing at a scored run directory")
            run_attacks_from_dir(args.out, args.attacks)
            cmd_report(args.out)
            print((Path(args.out) / "report.txt").read_text(), end="")
        elif args.verb == "report":
            run_dir = args.run_dir or args.out
            if not run_dir:
                raise ConfigError("report needs a run directory")
            cmd_report(run_dir)
            print((Path(run_dir) / "report.txt").read_text(), end="")
        elif args.verb == "ablate":
            cfg = _load_config(args)
            if args.ablation:
                try:
                    spec_raw = json.loads(Path(args.ablation).read_text())
                except (OSError, json.JSONDecodeError) as exc:
                    raise ConfigError(f"cannot read ablation spec: {exc}") from exc
            elif args.config and "ablation" in json.loads(Path(args.config).read_text()):
                spec_raw = json.loads(Path(args.config).read_text())["ablation"]
            else:
                raise ConfigError("ablate needs --ablation or an 'ablation' key in the config")
            out = Path(args.out) if args.out else default_out_root() / f"ablate-{cfg.seed}"
            rows = cmd_ablate(cfg, AblationSpec.from_dict(spec_raw), out, args.parallelism)
            failed = sum(r["status"] != "ok" for r in rows)
            print(f"{len(rows)} rows written to {out / 'sweep.csv'} ({failed} failed)")
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    except LdcMiaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
