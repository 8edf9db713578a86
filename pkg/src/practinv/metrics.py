"""Discrimination, calibration and environment-leakage metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import log_softmax_np

REPORT_COLUMNS = ("model", "split", "auroc", "auprc", "brier", "ece", "env_acc")
SPLITS = ("in_distribution", "held_out")


@dataclass
class MetricsReport:
    auroc: float
    auprc: float
    brier: float
    ece: float
    n: int
    split_label: str

    def __post_init__(self):
        if self.split_label not in SPLITS:
            raise ValueError(f"split_label must be one of {SPLITS}, got {self.split_label!r}")
        for name in ("auroc", "auprc", "brier", "ece"):
            v = getattr(self, name)
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class LeakageReport:
    env_accuracy: float
    chance_level: float
    probe_seed: int
    iterations: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc is undefined unless both classes are present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision, sum over thresholds of (R_k - R_{k-1}) * P_k.

    Tied scores form one threshold, so the result does not depend on row order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    # Last index of every run of equal scores.
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[last]
    precision = tp_at / (last + 1.0)
    recall = tp_at / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def brier(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = _binary(labels)
    if ((probs < 0.0) | (probs > 1.0)).any():
        raise ValueError("brier: probabilities must lie in [0, 1]")
    return float(np.mean((probs - labels) ** 2))


def ece(probs, labels, bins: int = 10) -> float:
    """Equal-width binned |mean prob - mean label|, weighted by bin mass.

    Bin b covers [b/B, (b+1)/B); the last bin also includes 1.0.
    """
    if bins < 1:
        raise ValueError(f"ece: bins must be >= 1, got {bins}")
    probs = np.asarray(probs, dtype=np.float64)
    labels = _binary(labels)
    idx = np.minimum((probs * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf = np.bincount(idx, weights=probs, minlength=bins)
    acc = np.bincount(idx, weights=labels, minlength=bins)
    filled = counts > 0
    gaps = np.abs(conf[filled] - acc[filled])
    return float(gaps.sum() / probs.size)


def evaluate(probs, labels, split_label: str, bins: int = 10) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    return MetricsReport(
        auroc=auroc(probs, labels),
        auprc=auprc(probs, labels),
        brier=brier(probs, labels),
        ece=ece(probs, labels, bins),
        n=int(probs.size),
        split_label=split_label,
    )


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted mean over per-environment reports."""
    return MetricsReport(
        auroc=float(np.mean([r.auroc for r in reports])),
        auprc=float(np.mean([r.auprc for r in reports])),
        brier=float(np.mean([r.brier for r in reports])),
        ece=float(np.mean([r.ece for r in reports])),
        n=int(sum(r.n for r in reports)),
        split_label=reports[0].split_label,
    )


def fit_softmax_regression(
    X: np.ndarray,
    classes: np.ndarray,
    k: int,
    lr: float = 0.5,
    tol: float = 1e-5,
    max_iter: int = 5000,
) -> tuple[np.ndarray, int]:
    """Full-batch gradient descent on mean softmax cross-entropy.

    ``X`` already carries an intercept column.  Stops when the gradient norm
    drops to ``tol`` or after ``max_iter`` iterations.
    """
    n, p = X.shape
    W = np.zeros((p, k))
    onehot = np.eye(k)[classes]
    it = 0
    for it in range(1, max_iter + 1):
        prob = np.exp(log_softmax_np(X @ W))
        grad = X.T @ (prob - onehot) / n
        if np.linalg.norm(grad) <= tol:
            break
        W -= lr * grad
    return W, it


def leakage_probe(embeddings, env_ids, train_frac: float = 0.5, seed: int = 0) -> LeakageReport:
    """Held-out accuracy of a linear classifier predicting environment from embeddings."""
    H = np.asarray(embeddings, dtype=np.float64)
    env_ids = np.asarray(env_ids)
    uniq, classes = np.unique(env_ids, return_inverse=True)
    k = uniq.size
    if k < 2:
        raise ValueError("leakage_probe needs at least two environments")
    n = H.shape[0]
    n_train = int(round(train_frac * n))
    if not 0 < n_train < n:
        raise ValueError(f"train_frac={train_frac} leaves an empty split for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    tr, te = perm[:n_train], perm[n_train:]
    # Standardizing with train statistics is an affine map, so the probe stays linear.
    mu = H[tr].mean(axis=0)
    sd = H[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = np.hstack([(H - mu) / sd, np.ones((n, 1))])
    W, iters = fit_softmax_regression(Z[tr], classes[tr], k)
    acc = float(np.mean(np.argmax(Z[te] @ W, axis=1) == classes[te]))
    return LeakageReport(env_accuracy=acc, chance_level=1.0 / k, probe_seed=seed, iterations=iters)
