"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.  Lists
are comma separated.  Every key has a default; unknown keys are errors.

=================  =============================  ==========================================
key                default                        meaning
=================  =============================  ==========================================
num_envs           4                              environments in the suite
n_per_env          2000                           rows generated per environment
d_z                8                              physiologic features
d_c                8                              practice features
signal             8.0                            norm of the shared outcome coefficients
rho_train          0.9                            practice/label correlation, training envs
rho_holdout        -0.9                           practice/label correlation, last env
missing_rates      0.0, 0.3, 0.6                  practice-feature missingness, training envs
missing_holdout    0.3                            missingness, last env
noise_levels       0.1, 0.15, 0.2                 physiologic measurement noise, training envs
noise_holdout      0.15                           measurement noise, last env
class_priors       0.45, 0.5, 0.55                positive rate, training envs
prior_holdout      0.5                            positive rate, last env
offsets            -1.0, 0.0, 1.0                 practice-feature level offset, training envs
offset_holdout     0.0                            level offset, last env
holdout            -1                             held-out env id (-1: the last one)
test_frac          0.2                            share of each training env kept for ID tests
embed_dim          16                             embedding width
encoder_hidden     64, 32                         encoder hidden widths
env_head_hidden    32                             environment head hidden widths
activation         tanh                           tanh | relu | sigmoid
modes              erm, adversarial_only,         objectives to train
                   irm_only, full
lambda             1.0                            adversarial weight
gamma              1.0                            invariant-risk weight
ridge              30.0                           probe ridge
lr_theta           0.05                           encoder/predictor step size
lr_psi             1.0                            environment head step size
epochs             30                             passes over the training data
batch_per_env      192                            rows per environment per step
psi_steps          3                              psi steps before every theta step
lambda_grid        0.1, 1, 10                     sweep values for lambda
gamma_grid         0.1, 1, 10                     sweep values for gamma
seeds              10                             seeds per configuration
master_seed        0                              first seed
ece_bins           10                             calibration bins
probe_train_frac   0.5                            leakage-probe training share
jobs               1                              parallel worker processes
out_dir            runs                           output directory
=================  =============================  ==========================================

Training-env schedules of a different length than ``num_envs - 1`` are
linearly interpolated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .autodiff import ACTIVATIONS, ConfigError
from .datagen import Profile
from .training import MODES


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    num_envs: int = 4
    n_per_env: int = 2000
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
    holdout: int = -1
    test_frac: float = 0.2
    embed_dim: int = 16
    encoder_hidden: tuple[int, ...] = (64, 32)
    env_head_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    modes: tuple[str, ...] = MODES
    lam: float = 1.0
    gamma: float = 1.0
    ridge: float = 30.0
    lr_theta: float = 0.05
    lr_psi: float = 1.0
    epochs: int = 30
    batch_per_env: int = 192
    psi_steps: int = 3
    lambda_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    gamma_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    seeds: int = 10
    master_seed: int = 0
    ece_bins: int = 10
    probe_train_frac: float = 0.5
    jobs: int = 1
    out_dir: str = "runs"

    def __post_init__(self):
        checks = [
            (self.num_envs >= 2, "num_envs", "must be >= 2"),
            (self.n_per_env >= 1, "n_per_env", "must be >= 1"),
            (self.d_z >= 1 and self.d_c >= 1, "d_z", "feature counts must be >= 1"),
            (-1 <= self.holdout < self.num_envs, "holdout", f"must be -1 or in [0, {self.num_envs})"),
            (0.0 < self.test_frac < 1.0, "test_frac", "must lie in (0, 1)"),
            (self.activation in ACTIVATIONS, "activation", f"must be one of {ACTIVATIONS}"),
            (len(self.modes) > 0, "modes", "must not be empty"),
            (all(m in MODES for m in self.modes), "modes", f"entries must be among {MODES}"),
            (self.lam >= 0 and self.gamma >= 0, "lambda", "lambda and gamma must be >= 0"),
            (self.ridge > 0, "ridge", "must be > 0"),
            (self.epochs >= 0, "epochs", "must be >= 0"),
            (self.batch_per_env >= 1, "batch_per_env", "must be >= 1"),
            (self.psi_steps >= 1, "psi_steps", "must be >= 1"),
            (len(self.lambda_grid) > 0 and min(self.lambda_grid) >= 0, "lambda_grid", "must be nonempty and >= 0"),
            (len(self.gamma_grid) > 0 and min(self.gamma_grid) >= 0, "gamma_grid", "must be nonempty and >= 0"),
            (self.seeds >= 1, "seeds", "must be >= 1"),
            (self.ece_bins >= 1, "ece_bins", "must be >= 1"),
            (0.0 < self.probe_train_frac < 1.0, "probe_train_frac", "must lie in (0, 1)"),
            (self.jobs != 0, "jobs", "must be nonzero"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigParseError(msg, key=key)

    @property
    def holdout_id(self) -> int:
        return self.num_envs - 1 if self.holdout < 0 else self.holdout

    def profile(self) -> Profile:
        return Profile(
            d_z=self.d_z,
            d_c=self.d_c,
            signal=self.signal,
            rho_train=self.rho_train,
            rho_holdout=self.rho_holdout,
            missing_rates=self.missing_rates,
            missing_holdout=self.missing_holdout,
            noise_levels=self.noise_levels,
            noise_holdout=self.noise_holdout,
            class_priors=self.class_priors,
            prior_holdout=self.prior_holdout,
            offsets=self.offsets,
            offset_holdout=self.offset_holdout,
        )

    def seed_list(self) -> list[int]:
        return [self.master_seed + i for i in range(self.seeds)]

    def with_overrides(self, **kw) -> ExperimentConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as err:
            raise ConfigParseError(str(err)) from err

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(_fmt(v) for v in value)
            else:
                value = _fmt(value)
            lines.append(f"{_KEY_OF[f.name]} = {value}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {_KEY_OF[k]: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# The file says "lambda"; the attribute is "lam" because lambda is reserved.
_FIELD_OF = {f.name: f.name for f in fields(ExperimentConfig)}
_FIELD_OF["lambda"] = _FIELD_OF.pop("lam")
_KEY_OF = {v: k for k, v in _FIELD_OF.items()}
_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(raw: str, type_name: str):
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "str":
        return raw
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if type_name == "tuple[int, ...]":
        return tuple(int(s) for s in items)
    if type_name == "tuple[float, ...]":
        return tuple(float(s) for s in items)
    if type_name == "tuple[str, ...]":
        return tuple(items)
    raise TypeError(type_name)


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    seen_line = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError("expected 'key = value'", line=lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELD_OF:
            raise ConfigParseError("unknown key", line=lineno, key=key)
        if key in seen_line:
            raise ConfigParseError(f"duplicate key (first set on line {seen_line[key]})", line=lineno, key=key)
        seen_line[key] = lineno
        name = _FIELD_OF[key]
        try:
            values[name] = _convert(raw, _TYPES[name])
        except ValueError:
            raise ConfigParseError(f"cannot parse {raw!r} as {_TYPES[name]}", line=lineno, key=key) from None
    try:
        return ExperimentConfig(**values)
    except ConfigParseError as err:
        key = err.key if err.key not in _KEY_OF else _KEY_OF[err.key]
        raise ConfigParseError(str(err).split(": ", 1)[-1], line=seen_line.get(key), key=key) from None


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigParseError(f"cannot read config: {err}") from err
    return parse_config(text)
