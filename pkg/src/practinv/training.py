"""Alternating SGD: psi steps on the environment loss, then a theta step on the full objective."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, NonFiniteError, Tensor
from .datagen import Dataset
from .metrics import auroc
from .models import ArchConfig, ModelParams, classify_env, encode, init, predict_proba
from .objectives import DEFAULT_RIDGE, EnvBatch, LossBreakdown, total_objective

log = logging.getLogger(__name__)

MODES = ("erm", "adversarial_only", "irm_only", "full")
HISTORY_COLUMNS = ("epoch", "l_sup", "l_env", "r_inv", "total", "val_auroc")


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    gamma: float = 1.0
    ridge: float = DEFAULT_RIDGE
    lr_theta: float = 0.05
    lr_psi: float = 1.0
    epochs: int = 30
    batch_per_env: int = 192
    psi_steps_per_theta_step: int = 3
    seed: int = 0
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError(f"lambda and gamma must be >= 0, got {self.lam}, {self.gamma}")
        if self.ridge <= 0:
            raise ConfigError(f"ridge must be > 0, got {self.ridge}")
        if self.lr_theta < 0 or self.lr_psi < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.epochs < 0 or self.batch_per_env < 1 or self.psi_steps_per_theta_step < 1:
            raise ConfigError("epochs >= 0, batch_per_env >= 1, psi_steps_per_theta_step >= 1 required")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.mode in ("adversarial_only", "full") else 0.0

    @property
    def effective_gamma(self) -> float:
        return self.gamma if self.mode in ("irm_only", "full") else 0.0


@dataclass
class TrainHistory:
    losses: list[LossBreakdown] = field(default_factory=list)
    val_auroc: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.losses)

    def rows(self) -> list[tuple]:
        return [
            (i + 1, b.l_sup, b.l_env, b.r_inv, b.total, v)
            for i, (b, v) in enumerate(zip(self.losses, self.val_auroc))
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    @classmethod
    def from_csv(cls, path: str | Path) -> TrainHistory:
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.losses.append(
                    LossBreakdown(float(row["l_sup"]), float(row["l_env"]), float(row["r_inv"]), float(row["total"]))
                )
                hist.val_auroc.append(float(row["val_auroc"]))
        return hist


def param_digest(tensors: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.values.tobytes())
    return h.hexdigest()


def _sgd(tensors: Sequence[Tensor], lr: float) -> None:
    for t in tensors:
        if t.grad is not None:
            t.values -= lr * t.grad


def _pooled(batches: Sequence[EnvBatch]) -> tuple[np.ndarray, np.ndarray]:
    x = np.vstack([b.x for b in batches])
    env = np.concatenate([np.full(len(b.x), b.env, dtype=np.int64) for b in batches])
    return x, env


def step_psi(params: ModelParams, batches: Sequence[EnvBatch], config: TrainConfig, h: np.ndarray | None = None) -> float:
    """One SGD step of the environment head on frozen embeddings; returns the loss."""
    x, env = _pooled(batches)
    if h is None:
        h = encode(params, Tensor(x)).values
    psi = params.psi()
    ad.zero_grad(psi)
    loss = ad.softmax_ce(classify_env(params, Tensor(h), 0.0), env)
    ad.backward(loss)
    _sgd(psi, config.lr_psi)
    ad.zero_grad(psi)
    return loss.item()


def step_theta(params: ModelParams, batches: Sequence[EnvBatch], config: TrainConfig) -> LossBreakdown:
    """One SGD step of encoder and outcome head on the full objective; psi is untouched."""
    theta = params.theta()
    ad.zero_grad(theta)
    ad.zero_grad(params.psi())
    breakdown, root = total_objective(params, batches, config.effective_lam, config.effective_gamma, config.ridge)
    if not np.isfinite(breakdown.total):
        raise NonFiniteError(f"non-finite objective: {breakdown}")
    ad.backward(root)
    for t in theta:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NonFiniteError("non-finite theta gradient")
    _sgd(theta, config.lr_theta)
    ad.zero_grad(theta)
    ad.zero_grad(params.psi())
    return breakdown


def _remap_envs(datasets: Sequence[Dataset]) -> dict[int, int]:
    ids = sorted({d.env_id for d in datasets})
    return {e: k for k, e in enumerate(ids)}


def _val_auroc(params: ModelParams, val_sets: Sequence[Dataset] | None) -> float:
    if not val_sets:
        return float("nan")
    scores = [auroc(predict_proba(params, d.x), d.y) for d in val_sets]
    return float(np.mean(scores))


def train(
    arch: ArchConfig,
    train_sets: Sequence[Dataset],
    config: TrainConfig,
    val_sets: Sequence[Dataset] | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Alternating minimax training; a pure function of its arguments.

    Each epoch draws a fresh permutation per environment from ``config.seed``
    and walks equal-size per-environment batches (the ragged tail is dropped).
    Every theta step is preceded by ``psi_steps_per_theta_step`` psi steps on
    the same batch.
    """
    if config.mode != "erm" and len(train_sets) < 2:
        raise ConfigError(f"mode {config.mode!r} needs at least two training environments")
    env_index = _remap_envs(train_sets)
    if arch.num_envs != len(env_index):
        arch = replace(arch, num_envs=len(env_index))
    params = init(arch)
    history = TrainHistory()
    rng = np.random.default_rng(config.seed)
    steps = min(len(d) for d in train_sets) // config.batch_per_env
    if steps == 0:
        raise ConfigError(f"batch_per_env={config.batch_per_env} exceeds the smallest environment")
    start = time.perf_counter()
    for epoch in range(config.epochs):
        perms = [rng.permutation(len(d)) for d in train_sets]
        acc = np.zeros(4)
        for s in range(steps):
            sl = slice(s * config.batch_per_env, (s + 1) * config.batch_per_env)
            batches = [
                EnvBatch(d.x[p[sl]], d.y[p[sl]], env_index[d.env_id]) for d, p in zip(train_sets, perms)
            ]
            x, _ = _pooled(batches)
            h = encode(params, Tensor(x)).values
            for _ in range(config.psi_steps_per_theta_step):
                step_psi(params, batches, config, h)
            b = step_theta(params, batches, config)
            acc += (b.l_sup, b.l_env, b.r_inv, b.total)
        acc /= steps
        history.losses.append(LossBreakdown(*acc))
        history.val_auroc.append(_val_auroc(params, val_sets))
        history.wall_clock.append(time.perf_counter() - start)
        log.debug("epoch %d mode=%s losses=%s val_auroc=%.4f", epoch + 1, config.mode, acc, history.val_auroc[-1])
    return params, history
