"""Supervised risk, adversarial environment loss and the invariant-risk penalty.

The encoder-side objective is ``l_sup + gamma * r_inv - lambda * l_env``.  The
minus sign is carried by the gradient-reversal layer inside
:func:`~practinv.models.classify_env`, so one backward pass over
``l_sup + gamma * r_inv + l_env`` gives theta the encoder gradient and psi the
plain gradient of ``l_env``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, Tensor
from .models import ModelParams, classify_env, encode, predict_outcome

DEFAULT_RIDGE = 30.0


@dataclass
class EnvBatch:
    x: np.ndarray
    y: np.ndarray
    env: int

    def __post_init__(self):
        if len(self.x) == 0:
            raise DimensionError("empty environment batch")
        if len(self.y) != len(self.x):
            raise DimensionError(f"batch has {len(self.x)} rows but {len(self.y)} labels")


@dataclass
class LossBreakdown:
    l_sup: float
    l_env: float
    r_inv: float
    total: float


@dataclass
class ProbeWeights:
    weights: list[Tensor]
    ridge: float

    def __len__(self) -> int:
        return len(self.weights)


def _split_rows(h: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0, *sizes])
    return [ad.rows(h, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _embed_batches(params: ModelParams, batches: Sequence[EnvBatch]) -> list[Tensor]:
    if not batches:
        raise DimensionError("need at least one environment batch")
    h = encode(params, np.vstack([b.x for b in batches]))
    return _split_rows(h, [len(b.x) for b in batches])


def supervised_loss_from_embeddings(params: ModelParams, hs: Sequence[Tensor], batches: Sequence[EnvBatch]) -> Tensor:
    loss = None
    for h, batch in zip(hs, batches):
        term = ad.bce_with_logits(predict_outcome(params, h), batch.y)
        loss = term if loss is None else loss + term
    return loss


def supervised_loss(params: ModelParams, batches: Sequence[EnvBatch]) -> Tensor:
    """Sum over environments of the per-environment mean cross-entropy."""
    return supervised_loss_from_embeddings(params, _embed_batches(params, batches), batches)


def env_loss_from_embeddings(params: ModelParams, h: Tensor, env_ids: np.ndarray, lam: float) -> Tensor:
    return ad.softmax_ce(classify_env(params, h, lam), env_ids)


def env_adversarial_loss(params: ModelParams, batches: Sequence[EnvBatch], lam: float) -> Tensor:
    """Pooled mean cross-entropy of the environment head, behind a reversal of strength ``lam``."""
    h = encode(params, np.vstack([b.x for b in batches]))
    env_ids = np.concatenate([np.full(len(b.x), b.env, dtype=np.int64) for b in batches])
    return env_loss_from_embeddings(params, h, env_ids, lam)


def fit_probe(H: Tensor, y, ridge: float = DEFAULT_RIDGE) -> Tensor:
    """Closed-form ridge fit of signed labels on ``[H | 1]``.

    Returns ``w`` of length ``d + 1`` (intercept last) solving
    ``(A^T A + ridge I) w = A^T (2y - 1)``; differentiable in ``H``.
    """
    if ridge <= 0:
        raise ConfigError(f"fit_probe: ridge must be > 0, got {ridge}")
    H = H if isinstance(H, Tensor) else Tensor(H)
    y = np.asarray(y, dtype=np.float64)
    if H.values.ndim != 2 or y.shape != (H.shape[0],):
        raise DimensionError(f"fit_probe: H {H.shape} vs y {y.shape}")
    A = ad.append_ones(H)
    At = ad.transpose(A)
    gram = ad.add_diagonal(At @ A, ridge)
    return ad.solve(gram, At @ Tensor(2.0 * y - 1.0))


def probe_residual(H: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float) -> float:
    """Norm of the ridge normal-equation residual for a fitted probe."""
    A = np.hstack([H, np.ones((H.shape[0], 1))])
    lhs = (A.T @ A + ridge * np.eye(A.shape[1])) @ w
    return float(np.linalg.norm(lhs - A.T @ (2.0 * np.asarray(y, dtype=np.float64) - 1.0)))


def fit_probes(hs: Sequence[Tensor], labels: Sequence[np.ndarray], ridge: float = DEFAULT_RIDGE) -> ProbeWeights:
    return ProbeWeights([fit_probe(h, y, ridge) for h, y in zip(hs, labels)], ridge)


def invariant_risk_penalty(probes: ProbeWeights | Sequence[Tensor]) -> Tensor:
    """Sum over ordered pairs e != e' of ``||w_e - w_e'||^2``."""
    ws = probes.weights if isinstance(probes, ProbeWeights) else list(probes)
    if len(ws) < 2:
        raise ValueError(f"invariant_risk_penalty needs >= 2 environments, got {len(ws)}")
    ws = [w if isinstance(w, Tensor) else Tensor(w) for w in ws]
    penalty = None
    for i in range(len(ws)):
        for j in range(i + 1, len(ws)):
            term = ad.total(ad.square(ws[i] - ws[j]))
            penalty = term if penalty is None else penalty + term
    return 2.0 * penalty


def total_objective(
    params: ModelParams,
    batches: Sequence[EnvBatch],
    lam: float,
    gamma: float,
    ridge: float = DEFAULT_RIDGE,
) -> tuple[LossBreakdown, Tensor]:
    """All three terms on one shared forward pass.

    Returns the breakdown and the tensor to call :func:`~practinv.autodiff.backward`
    on.  With ``gamma == 0`` the penalty is still evaluated and reported, but on
    detached embeddings so it adds nothing to any gradient.
    """
    if lam < 0 or gamma < 0:
        raise ConfigError(f"lambda and gamma must be >= 0, got {lam}, {gamma}")
    if ridge <= 0:
        raise ConfigError(f"ridge must be > 0, got {ridge}")
    h = encode(params, np.vstack([b.x for b in batches]))
    sizes = [len(b.x) for b in batches]
    hs = _split_rows(h, sizes)
    env_ids = np.concatenate([np.full(len(b.x), b.env, dtype=np.int64) for b in batches])
    detached = h.detach()

    l_sup = supervised_loss_from_embeddings(params, hs, batches)
    # With lam = 0 the reversal sends exact zeros into theta; psi still gets d(l_env).
    l_env = env_loss_from_embeddings(params, h, env_ids, lam)
    root = l_sup + l_env

    if len(batches) >= 2:
        probe_hs = hs if gamma > 0 else _split_rows(detached, sizes)
        r_inv = invariant_risk_penalty(fit_probes(probe_hs, [b.y for b in batches], ridge))
        if gamma > 0:
            root = root + gamma * r_inv
        r_value = r_inv.item()
    else:
        r_value = 0.0

    breakdown = LossBreakdown(
        l_sup=l_sup.item(),
        l_env=l_env.item(),
        r_inv=r_value,
        total=l_sup.item() + gamma * r_value - lam * l_env.item(),
    )
    return breakdown, root


def objective_gradient_error(
    params: ModelParams,
    batches: Sequence[EnvBatch],
    lam: float,
    gamma: float,
    ridge: float = DEFAULT_RIDGE,
    step: float = 1e-5,
) -> float:
    """Worst relative autodiff-vs-central-difference error of one objective backward.

    theta is differenced on ``l_sup + gamma * r_inv - lambda * l_env`` and psi
    on ``l_env``, which is what the single backward pass is meant to deliver.
    """

    def root():
        return total_objective(params, batches, lam, gamma, ridge)[1]

    theta_err = ad.finite_diff_check(
        root, params.theta(), step, value=lambda: total_objective(params, batches, lam, gamma, ridge)[0].total
    )
    psi_err = ad.finite_diff_check(
        root, params.psi(), step, value=lambda: total_objective(params, batches, lam, gamma, ridge)[0].l_env
    )
    return max(theta_err, psi_err)
