"""
Command-line driver.

    scoreda simulate         --config cfg.yaml [--seed S] [--out DIR]
    scoreda train-codec      --config cfg.yaml
    scoreda train-score      --config cfg.yaml --mode {pixel,latent}
    scoreda assimilate       --config cfg.yaml --grid-index I [--mode-name pixel-unimodal]
    scoreda ablate           --config cfg.yaml
    scoreda report           --out DIR            (or --config cfg.yaml)
    scoreda feature-ablation --config cfg.yaml

Exit status is 0 on success, 1 for configuration or missing-artifact errors and
2 when some grid points failed (see ``failures.json`` in the run directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import experiments as ex
from .errors import ArtifactMissingError, ConfigError, ScoreDAError

CONFIG_SNAPSHOT = "config.json"


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoreda", description="Score-based data assimilation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help, config_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=config_required, help="YAML experiment configuration")
        sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the configured list")
        sp.add_argument("--out", default=None, help="run directory (overrides the configured one)")
        sp.add_argument("--quiet", action="store_true", help="suppress progress messages")
        return sp

    add("simulate", "simulate truths, backgrounds and observations")
    add("train-codec", "train the latent codec")
    sp = add("train-score", "train a window score prior")
    sp.add_argument("--mode", choices=["pixel", "latent"], required=True)
    sp = add("assimilate", "assimilate one grid point")
    sp.add_argument("--grid-index", type=int, required=True)
    sp.add_argument("--mode-name", choices=list(ex.MODE_NAMES), default=None, help="default: every configured mode")
    add("ablate", "run the full grid and write the report")
    add("report", "rebuild report tables from existing analyses", config_required=False)
    add("feature-ablation", "latent multimodal with and without the ex-situ modality")
    return p


def _load(args) -> ex.ExperimentConfig:
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.config is None:
        if args.out is None:
            raise ConfigError("report needs --config or --out pointing at a run directory")
        snap = Path(args.out) / CONFIG_SNAPSHOT
        if not snap.exists():
            raise ArtifactMissingError(f"{snap} not found; run `scoreda simulate --config <config> --out {args.out}` first")
        raw = json.loads(snap.read_text())
        raw.update(overrides)
        return ex.ExperimentConfig.from_dict(raw)
    return ex.load_config(args.config, overrides)


def _snapshot(cfg: ex.ExperimentConfig) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / CONFIG_SNAPSHOT).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    torch.set_num_threads(1)
    try:
        cfg = _load(args)
        if args.command != "report":
            _snapshot(cfg)
        if args.command == "simulate":
            for s in cfg.seeds:
                ex.simulate_stage(cfg, s, log)
        elif args.command == "train-codec":
            for s in cfg.seeds:
                ex.train_codec_stage(cfg, s, log)
        elif args.command == "train-score":
            for s in cfg.seeds:
                ex.train_score_stage(cfg, s, args.mode, log)
        elif args.command == "assimilate":
            pts = {g.index: g for g in cfg.grid_points()}
            if args.grid_index not in pts:
                raise ConfigError(f"grid index {args.grid_index} out of range", [f"grid-index: must be in [0, {len(pts) - 1}]"])
            modes = [args.mode_name] if args.mode_name else cfg.modes
            for s in cfg.seeds:
                for m in modes:
                    ex.assimilate_stage(cfg, s, pts[args.grid_index], m, log=log)
        elif args.command == "ablate":
            _, failures = ex.ablate(cfg, log)
            if failures:
                log(f"{len(failures)} failures recorded in {cfg.out_dir / 'failures.json'}")
                return 2
        elif args.command == "report":
            report = ex.build_report(cfg)
            missing = report.pop("_failures")
            if missing:
                ex.write_failures(cfg, [ex.StageFailure(**f) for f in missing])
                log(f"{len(missing)} analyses missing or invalid; see {cfg.out_dir / 'failures.json'}")
                return 2
        elif args.command == "feature-ablation":
            summary, failures = ex.feature_ablation(cfg, log)
            log(json.dumps(summary, sort_keys=True))
            if failures:
                return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ArtifactMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ScoreDAError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
