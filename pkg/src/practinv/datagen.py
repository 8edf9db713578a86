"""Synthetic multi-environment data with a shared outcome mechanism.

Each sample draws a latent physiologic state ``z ~ N(0, I)`` and an outcome
``y ~ Bernoulli(sigmoid(beta . z + beta0))`` whose coefficients are shared by
every environment.  The practice block ``c`` is a noisy copy of the signed
label with environment-specific correlation, level offset and missingness; it
shapes ``x`` but never ``y``.  Observed rows are ``x = [z + noise, c]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import sigmoid_np

PRIOR_TOLERANCE = 0.02


@dataclass(frozen=True)
class EnvSpec:
    env_id: int
    spurious_strength: float
    missing_rate: float
    obs_noise: float
    class_prior: float
    seed: int
    beta: tuple[float, ...]
    beta0: float = 0.0
    d_c: int = 8
    practice_offset: float = 0.0

    def __post_init__(self):
        if self.env_id < 0:
            raise ValueError(f"env_id must be >= 0, got {self.env_id}")
        if not -1.0 <= self.spurious_strength <= 1.0:
            raise ValueError(f"spurious_strength must lie in [-1, 1], got {self.spurious_strength}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if not self.obs_noise > 0.0:
            raise ValueError(f"obs_noise must be > 0, got {self.obs_noise}")
        if not 0.0 < self.class_prior < 1.0:
            raise ValueError(f"class_prior must lie in (0, 1), got {self.class_prior}")
        if len(self.beta) < 1 or self.d_c < 1:
            raise ValueError("need at least one physiologic and one practice feature")

    @property
    def d_z(self) -> int:
        return len(self.beta)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    env: np.ndarray
    d_z: int = field(default=0)

    def __post_init__(self):
        n = self.x.shape[0]
        if n == 0:
            raise ValueError("empty dataset")
        if self.y.shape != (n,) or self.env.shape != (n,):
            raise ValueError(f"x has {n} rows but y {self.y.shape}, env {self.env.shape}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def env_id(self) -> int:
        return int(self.env[0])

    def subset(self, idx: np.ndarray) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.env[idx], self.d_z)

    def split(self, first_frac: float, seed: int) -> tuple[Dataset, Dataset]:
        """Random two-way split; the first part gets ``round(first_frac * n)`` rows."""
        n = len(self)
        k = int(round(first_frac * n))
        if not 0 < k < n:
            raise ValueError(f"split fraction {first_frac} leaves an empty part for n={n}")
        perm = np.random.default_rng(seed).permutation(n)
        return self.subset(np.sort(perm[:k])), self.subset(np.sort(perm[k:]))

    def to_csv(self, path: str | Path) -> None:
        p = self.x.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{j}" for j in range(p)] + ["y", "env"])
            for xi, yi, ei in zip(self.x, self.y, self.env):
                writer.writerow([repr(float(v)) for v in xi] + [int(yi), int(ei)])

    @classmethod
    def from_csv(cls, path: str | Path, d_z: int = 0) -> Dataset:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(raw[:, :-2], raw[:, -2].astype(np.int64), raw[:, -1].astype(np.int64), d_z)


@dataclass(frozen=True)
class Profile:
    """Knobs for :func:`default_env_suite`.  Sequences index training envs in order."""

    d_z: int = 8
    d_c: int = 8
    signal: float = 8.0
    rho_train: float = 0.9
    rho_holdout: float = -0.9
    missing_rates: tuple[float, ...] = (0.0, 0.3, 0.6)
    missing_holdout: float = 0.3
    noise_levels: tuple[float, ...] = (0.1, 0.15, 0.2)
    noise_holdout: float = 0.15
    class_priors: tuple[float, ...] = (0.45, 0.5, 0.55)
    prior_holdout: float = 0.5
    offsets: tuple[float, ...] = (-1.0, 0.0, 1.0)
    offset_holdout: float = 0.0


def _per_env(values: Sequence[float], k: int) -> list[float]:
    """Stretch a schedule over ``k`` training environments by linear interpolation."""
    values = list(values)
    if len(values) == k:
        return values
    if len(values) == 1:
        return values * k
    grid = np.linspace(0.0, 1.0, len(values))
    return [float(v) for v in np.interp(np.linspace(0.0, 1.0, k), grid, values)]


def _env_seed(master_seed: int, env_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, env_id]).generate_state(1)[0])


def default_env_suite(
    num_envs: int, master_seed: int, profile: Profile | None = None
) -> list[EnvSpec]:
    """Environments sharing one outcome mechanism; the last one reverses the shortcut."""
    if num_envs < 2:
        raise ValueError(f"need at least 2 environments, got {num_envs}")
    profile = profile or Profile()
    rng = np.random.default_rng(master_seed)
    direction = rng.standard_normal(profile.d_z)
    beta = tuple(float(b) for b in profile.signal * direction / np.linalg.norm(direction))
    k = num_envs - 1
    miss = _per_env(profile.missing_rates, k) + [profile.missing_holdout]
    noise = _per_env(profile.noise_levels, k) + [profile.noise_holdout]
    prior = _per_env(profile.class_priors, k) + [profile.prior_holdout]
    offset = _per_env(profile.offsets, k) + [profile.offset_holdout]
    rho = [profile.rho_train] * k + [profile.rho_holdout]
    return [
        EnvSpec(
            env_id=e,
            spurious_strength=rho[e],
            missing_rate=miss[e],
            obs_noise=noise[e],
            class_prior=prior[e],
            seed=_env_seed(master_seed, e),
            beta=beta,
            d_c=profile.d_c,
            practice_offset=offset[e],
        )
        for e in range(num_envs)
    ]


def _sample_latents(spec: EnvSpec, n: int, rng: np.random.Generator):
    """Draw (z, y) and keep rows class by class until the prior quota is met."""
    n_pos = int(round(spec.class_prior * n))
    need = {1: n_pos, 0: n - n_pos}
    beta = np.asarray(spec.beta)
    z_parts, y_parts = [], []
    chunk = max(2 * n, 256)
    while need[0] or need[1]:
        z = rng.standard_normal((chunk, spec.d_z))
        y = (rng.random(chunk) < sigmoid_np(z @ beta + spec.beta0)).astype(np.int64)
        keep = np.zeros(chunk, dtype=bool)
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)[: need[cls]]
            keep[idx] = True
            need[cls] -= idx.size
        z_parts.append(z[keep])
        y_parts.append(y[keep])
    return np.concatenate(z_parts), np.concatenate(y_parts)


def generate(spec: EnvSpec, n: int) -> Dataset:
    """Sample ``n`` rows from one environment; a pure function of ``(spec, n)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    z, y = _sample_latents(spec, n, rng)
    signed = (2.0 * y - 1.0)[:, None]
    rho = spec.spurious_strength
    v = rng.standard_normal((n, spec.d_c))
    c = rho * signed + np.sqrt(1.0 - rho * rho) * v + spec.practice_offset
    c[rng.random((n, spec.d_c)) < spec.missing_rate] = 0.0
    x_z = z + spec.obs_noise * rng.standard_normal(z.shape)
    x = np.hstack([x_z, c])
    return Dataset(x, y, np.full(n, spec.env_id, dtype=np.int64), spec.d_z)


def loeo_split(
    suite: Sequence[EnvSpec], holdout: int, n_per_env: int
) -> tuple[list[Dataset], Dataset]:
    """Leave one environment out: training datasets and the held-out dataset."""
    ids = [s.env_id for s in suite]
    if holdout not in ids:
        raise ValueError(f"holdout {holdout} is not an env_id in the suite {ids}")
    train, test = [], None
    for spec in suite:
        ds = generate(spec, n_per_env)
        if spec.env_id == holdout:
            test = ds
        else:
            train.append(ds)
    return train, test


def concat(datasets: Sequence[Dataset]) -> Dataset:
    return Dataset(
        np.vstack([d.x for d in datasets]),
        np.concatenate([d.y for d in datasets]),
        np.concatenate([d.env for d in datasets]),
        datasets[0].d_z,
    )
