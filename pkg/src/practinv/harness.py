"""Leave-one-environment-out experiments, persisted run records and report tables.

Layout of an output directory::

    <out>/
      config.txt          snapshot of the parsed configuration
      metrics.csv         one row per (run, split); see REPORT_COLUMNS
      ablation.csv        only written by ablation_suite
      runs/<run_id>/
        config.txt        configuration with the run's mode/lambda/gamma/seed applied
        record.json       metrics, leakage, status and timestamps
        metrics.csv       this run's rows of the top-level file
        history.csv       per-epoch losses and validation AUROC
        checkpoint.npz    trained parameters
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .config import ExperimentConfig, load_config
from .datagen import Dataset, default_env_suite, loeo_split
from .metrics import REPORT_COLUMNS, LeakageReport, MetricsReport, evaluate, leakage_probe, mean_report
from .models import ArchConfig, embed, predict_proba, save_checkpoint
from .training import MODES, TrainConfig, train

log = logging.getLogger(__name__)

TABLE_FILES = {
    "in_distribution": "table1_in_distribution",
    "held_out": "table2_held_out",
    "leakage": "table3_leakage",
}
TABLE_TITLES = {
    "in_distribution": "In-distribution performance (mean over training environments)",
    "held_out": "Out-of-distribution performance on the held-out environment",
    "leakage": "Environment prediction accuracy from learned embeddings (lower is better)",
}


@dataclass
class RunRecord:
    run_id: str
    mode: str
    lam: float
    gamma: float
    seed: int
    holdout: int
    config: dict
    status: str = "ok"
    error: str = ""
    in_distribution: MetricsReport | None = None
    held_out: MetricsReport | None = None
    leakage: LeakageReport | None = None
    history_file: str = "history.csv"
    started: str = ""
    finished: str = ""

    @property
    def label(self) -> str:
        return self.run_id

    def metric_rows(self) -> list[list[str]]:
        if self.status != "ok":
            return []
        env_acc = _fmt(self.leakage.env_accuracy)
        return [
            [self.label, rep.split_label, _fmt(rep.auroc), _fmt(rep.auprc), _fmt(rep.brier), _fmt(rep.ece), env_acc]
            for rep in (self.in_distribution, self.held_out)
        ]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> RunRecord:
        data = dict(data)
        for key in ("in_distribution", "held_out"):
            if data.get(key) is not None:
                data[key] = MetricsReport(**data[key])
        if data.get("leakage") is not None:
            data["leakage"] = LeakageReport(**data["leakage"])
        return cls(**data)


def _fmt(v: float) -> str:
    return repr(float(v))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_id(mode: str, lam: float, gamma: float, seed: int) -> str:
    return f"{mode}_lam{lam:g}_gam{gamma:g}_seed{seed}"


# --- data --------------------------------------------------------------------


@dataclass
class ExperimentData:
    fit: list[Dataset]
    id_test: list[Dataset]
    held_out: Dataset
    full_train: list[Dataset] = field(default_factory=list)


def make_data(cfg: ExperimentConfig, seed: int, holdout: int | None = None) -> ExperimentData:
    """Generate the suite for one seed and carve an ID test split from every training env."""
    holdout = cfg.holdout_id if holdout is None else holdout
    suite = default_env_suite(cfg.num_envs, seed, cfg.profile())
    train_sets, test = loeo_split(suite, holdout, cfg.n_per_env)
    fit, id_test = [], []
    for ds in train_sets:
        a, b = ds.split(1.0 - cfg.test_frac, seed + 7919 * (ds.env_id + 1))
        fit.append(a)
        id_test.append(b)
    return ExperimentData(fit, id_test, test, train_sets)


# --- single run ----------------------------------------------------------------


def _arch(cfg: ExperimentConfig, seed: int, num_envs: int) -> ArchConfig:
    return ArchConfig(
        input_dim=cfg.d_z + cfg.d_c,
        embed_dim=cfg.embed_dim,
        encoder_hidden=cfg.encoder_hidden,
        env_head_hidden=cfg.env_head_hidden,
        activation=cfg.activation,
        init_seed=seed,
        num_envs=num_envs,
    )


def _train_config(cfg: ExperimentConfig, mode: str, lam: float, gamma: float, seed: int) -> TrainConfig:
    return TrainConfig(
        lam=lam,
        gamma=gamma,
        ridge=cfg.ridge,
        lr_theta=cfg.lr_theta,
        lr_psi=cfg.lr_psi,
        epochs=cfg.epochs,
        batch_per_env=cfg.batch_per_env,
        psi_steps_per_theta_step=cfg.psi_steps,
        seed=seed,
        mode=mode,
    )


def execute_run(
    cfg: ExperimentConfig,
    mode: str,
    lam: float,
    gamma: float,
    seed: int,
    out_dir: Path,
    holdout: int | None = None,
) -> RunRecord:
    """Train and evaluate one (mode, lambda, gamma, seed) point and persist it.

    Failures are recorded in the returned record (status ``failed``) rather
    than raised, so one bad point does not lose the rest of a suite.
    """
    holdout = cfg.holdout_id if holdout is None else holdout
    rid = run_id(mode, lam, gamma, seed)
    run_dir = Path(out_dir) / "runs" / rid
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.with_overrides(modes=(mode,), lam=lam, gamma=gamma, master_seed=seed, seeds=1, holdout=holdout)
    (run_dir / "config.txt").write_text(snapshot.to_text())
    record = RunRecord(rid, mode, lam, gamma, seed, holdout, snapshot.as_dict(), started=_now())
    try:
        data = make_data(cfg, seed, holdout)
        arch = _arch(cfg, seed, len(data.fit))
        params, history = train(arch, data.fit, _train_config(cfg, mode, lam, gamma, seed), data.id_test)
        history.to_csv(run_dir / record.history_file)
        save_checkpoint(params, run_dir / "checkpoint.npz")
        record.in_distribution = mean_report(
            [evaluate(predict_proba(params, d.x), d.y, "in_distribution", cfg.ece_bins) for d in data.id_test]
        )
        record.held_out = evaluate(predict_proba(params, data.held_out.x), data.held_out.y, "held_out", cfg.ece_bins)
        emb = np.vstack([embed(params, d.x) for d in data.full_train])
        envs = np.concatenate([d.env for d in data.full_train])
        record.leakage = leakage_probe(emb, envs, cfg.probe_train_frac, seed)
    except Exception as err:  # noqa: BLE001 - recorded, surfaced via status
        record.status = "failed"
        record.error = f"{type(err).__name__}: {err}\n{traceback.format_exc()}"
        log.error("run %s failed: %s", rid, err)
    record.finished = _now()
    save_record(record, run_dir)
    return record


def save_record(record: RunRecord, run_dir: Path) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "record.json").write_text(json.dumps(record.to_json(), indent=2, sort_keys=True))
    _write_csv(run_dir / "metrics.csv", REPORT_COLUMNS, record.metric_rows())


def load_record(run_dir: str | Path) -> RunRecord:
    return RunRecord.from_json(json.loads((Path(run_dir) / "record.json").read_text()))


def load_records(out_dir: str | Path) -> list[RunRecord]:
    root = Path(out_dir) / "runs"
    if not root.is_dir():
        return []
    return [load_record(p) for p in sorted(root.iterdir()) if (p / "record.json").is_file()]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# --- suites --------------------------------------------------------------------


def _sort_key(r: RunRecord):
    return (MODES.index(r.mode), r.lam, r.gamma, r.seed)


def run_points(cfg: ExperimentConfig, points: Sequence[tuple[str, float, float, int]], out_dir: str | Path) -> list[RunRecord]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if cfg.jobs == 1 or len(points) == 1:
        records = [execute_run(cfg, m, lam, g, s, out) for m, lam, g, s in points]
    else:
        records = Parallel(n_jobs=cfg.jobs)(delayed(execute_run)(cfg, m, lam, g, s, out) for m, lam, g, s in points)
    records = sorted(records, key=_sort_key)
    rows = [row for r in records for row in r.metric_rows()]
    _write_csv(out / "metrics.csv", REPORT_COLUMNS, rows)
    return records


def _cfg_from(config: str | Path | ExperimentConfig) -> ExperimentConfig:
    return config if isinstance(config, ExperimentConfig) else load_config(config)


def run_experiment(config: str | Path | ExperimentConfig, out_dir: str | Path | None = None) -> list[RunRecord]:
    """Every configured mode at the configured lambda/gamma, for every seed."""
    cfg = _cfg_from(config)
    points = [(m, cfg.lam, cfg.gamma, s) for s in cfg.seed_list() for m in cfg.modes]
    return run_points(cfg, points, out_dir or cfg.out_dir)


def ablation_suite(config: str | Path | ExperimentConfig, out_dir: str | Path | None = None) -> list[RunRecord]:
    """All four objectives on shared data and seeds, plus holdout-AUROC deltas against ERM."""
    cfg = _cfg_from(config).with_overrides(modes=MODES)
    out = Path(out_dir or cfg.out_dir)
    records = run_experiment(cfg, out)
    write_ablation(records, out)
    return records


def write_ablation(records: Sequence[RunRecord], out_dir: Path) -> None:
    erm = {r.seed: r for r in records if r.mode == "erm" and r.status == "ok"}
    rows = []
    for r in records:
        if r.status != "ok":
            continue
        base = erm.get(r.seed)
        delta = _fmt(r.held_out.auroc - base.held_out.auroc) if base else ""
        rows.append([r.mode, str(r.seed), _fmt(r.held_out.auroc), delta])
    _write_csv(Path(out_dir) / "ablation.csv", ("mode", "seed", "held_out_auroc", "delta_vs_erm"), rows)


def sweep(config: str | Path | ExperimentConfig, out_dir: str | Path | None = None) -> list[RunRecord]:
    """Full objective over the lambda x gamma grid, for every seed."""
    cfg = _cfg_from(config)
    points = [("full", lam, g, s) for s in cfg.seed_list() for lam in cfg.lambda_grid for g in cfg.gamma_grid]
    return run_points(cfg, points, out_dir or cfg.out_dir)


# --- tables --------------------------------------------------------------------


def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), "  ".join("-" * w for w in widths)]
    lines += [fmt.format(*r) for r in rows]
    return "\n".join(lines)


def _short(v: str) -> str:
    try:
        return f"{float(v):.4f}"
    except ValueError:
        return v


def _group_label(r: RunRecord) -> str:
    return f"{r.mode} (lambda={r.lam:g}, gamma={r.gamma:g})"


def render_tables(run_dir: str | Path) -> dict[str, Path]:
    """Write the three report tables as CSV and aligned text.

    CSV cells are copied verbatim from the run records.  The text files add a
    mean +/- std block per (mode, lambda, gamma) group.
    """
    out = Path(run_dir)
    records = [r for r in load_records(out) if r.status == "ok"]
    if not records:
        raise FileNotFoundError(f"no completed run records under {out / 'runs'}")
    records.sort(key=_sort_key)
    written = {}
    for split in ("in_distribution", "held_out"):
        rows = [row for r in records for row in r.metric_rows() if row[1] == split]
        written[split] = _write_table(out, split, REPORT_COLUMNS, rows, records, split)
    leak_header = ("model", "env_acc", "chance")
    leak_rows = [[r.label, _fmt(r.leakage.env_accuracy), _fmt(r.leakage.chance_level)] for r in records]
    written["leakage"] = _write_table(out, "leakage", leak_header, leak_rows, records, "leakage")
    return written


def _write_table(out: Path, key: str, header, rows, records, split) -> Path:
    stem = TABLE_FILES[key]
    _write_csv(out / f"{stem}.csv", header, rows)
    text = [TABLE_TITLES[key], "", _aligned(header, [[r[0], *(_short(v) for v in r[1:])] for r in rows])]
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(_group_label(r), []).append(r)
    if any(len(g) > 1 for g in groups.values()):
        cols = ("auroc", "auprc", "brier", "ece") if split != "leakage" else ("env_acc",)
        summary = []
        for label, grp in groups.items():
            cells = [label, str(len(grp))]
            for c in cols:
                if split == "leakage":
                    vals = [g.leakage.env_accuracy for g in grp]
                else:
                    vals = [getattr(getattr(g, split), c) for g in grp]
                cells.append(f"{np.mean(vals):.4f} +/- {np.std(vals):.4f}")
            summary.append(cells)
        text += ["", "Mean +/- std over seeds", "", _aligned(("group", "seeds", *cols), summary)]
    path = out / f"{stem}.txt"
    path.write_text("\n".join(text) + "\n")
    return path
