"""Command-line entry point: ``practinv <subcommand> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigParseError, ExperimentConfig, load_config
from .datagen import default_env_suite, generate
from .metrics import leakage_probe
from .models import embed, load_checkpoint
from .training import MODES

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.holdout is not None:
        overrides["holdout"] = args.holdout
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.mode is not None:
        overrides["modes"] = (args.mode,)
    try:
        return cfg.with_overrides(**overrides)
    except ValueError as err:
        raise ConfigParseError(str(err)) from err


def cmd_generate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seed_list() if args.all_seeds else [cfg.master_seed]:
        for spec in default_env_suite(cfg.num_envs, seed, cfg.profile()):
            path = out / f"seed{seed}_env{spec.env_id}.csv"
            generate(spec, cfg.n_per_env).to_csv(path)
            print(path)
    return EXIT_OK


def _failed(records) -> int:
    bad = [r for r in records if r.status != "ok"]
    for r in bad:
        print(f"run {r.run_id} failed: {r.error.splitlines()[0]}", file=sys.stderr)
    return EXIT_RUNTIME if bad else EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    mode = cfg.modes[0]
    records = harness.run_points(cfg, [(mode, cfg.lam, cfg.gamma, cfg.master_seed)], cfg.out_dir)
    _print_records(records)
    return _failed(records)


def cmd_run(cfg: ExperimentConfig, args) -> int:
    records = harness.run_experiment(cfg)
    _print_records(records)
    return _failed(records)


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    records = harness.ablation_suite(cfg)
    harness.render_tables(cfg.out_dir)
    print((Path(cfg.out_dir) / "ablation.csv").read_text(), end="")
    return _failed(records)


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    records = harness.sweep(cfg)
    _print_records(records)
    return _failed(records)


def cmd_report(cfg: ExperimentConfig, args) -> int:
    paths = harness.render_tables(cfg.out_dir)
    for path in paths.values():
        print(path.read_text())
    return EXIT_OK


def cmd_probe(cfg: ExperimentConfig, args) -> int:
    if not args.checkpoint:
        raise ConfigParseError("probe needs --checkpoint PATH")
    params = load_checkpoint(args.checkpoint)
    data = harness.make_data(cfg, cfg.master_seed)
    emb = np.vstack([embed(params, d.x) for d in data.full_train])
    envs = np.concatenate([d.env for d in data.full_train])
    report = leakage_probe(emb, envs, cfg.probe_train_frac, cfg.master_seed)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK


def _print_records(records) -> None:
    for r in records:
        if r.status == "ok":
            print(
                f"{r.run_id}: id_auroc={r.in_distribution.auroc:.4f} "
                f"held_out_auroc={r.held_out.auroc:.4f} env_acc={r.leakage.env_accuracy:.4f}"
            )


COMMANDS = {
    "generate": (cmd_generate, "export synthetic environments as CSV"),
    "train": (cmd_train, "train and evaluate a single run"),
    "run": (cmd_run, "every configured mode for every seed"),
    "ablate": (cmd_ablate, "erm / adversarial_only / irm_only / full on shared data"),
    "sweep": (cmd_sweep, "full objective over the lambda x gamma grid"),
    "report": (cmd_report, "render tables from a run directory"),
    "probe": (cmd_probe, "environment leakage of a checkpoint's embeddings"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="practinv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
        p.add_argument("--holdout", type=int, help="held-out environment id")
        p.add_argument("--mode", choices=MODES, help="restrict to one objective")
        if name == "probe":
            p.add_argument("--checkpoint", metavar="PATH", help="checkpoint.npz to probe")
        if name == "generate":
            p.add_argument("--all-seeds", action="store_true", help="export every configured seed")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigParseError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
