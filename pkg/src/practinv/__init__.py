"""Environment-invariant representation learning on synthetic multi-environment data."""

from .autodiff import ConfigError, DimensionError, NonFiniteError, Tensor, backward, grad_reverse
from .config import ConfigParseError, ExperimentConfig, load_config, parse_config
from .datagen import Dataset, EnvSpec, default_env_suite, generate, loeo_split
from .harness import RunRecord, ablation_suite, render_tables, run_experiment, sweep
from .metrics import auprc, auroc, brier, ece, leakage_probe
from .models import ArchConfig, ModelParams, encode, init, load_checkpoint, save_checkpoint
from .objectives import fit_probe, invariant_risk_penalty, total_objective
from .training import MODES, TrainConfig, train

__version__ = "0.1.0"
