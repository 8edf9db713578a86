"""Encoder, outcome head and environment classifier as small MLPs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, DimensionError, Tensor, activation, affine, grad_reverse, reshape


@dataclass(frozen=True)
class ArchConfig:
    input_dim: int
    embed_dim: int = 16
    encoder_hidden: tuple[int, ...] = (64, 32)
    env_head_hidden: tuple[int, ...] = (32,)
    activation: str = "tanh"
    init_seed: int = 0
    num_envs: int = 3

    def __post_init__(self):
        widths = (self.input_dim, self.embed_dim, self.num_envs, *self.encoder_hidden, *self.env_head_hidden)
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1: {self}")


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class ModelParams:
    """theta = encoder + predictor; psi = env_head.  No tensor is shared."""

    encoder: list[Layer]
    predictor: list[Layer]
    env_head: list[Layer]
    embed_dim: int
    activation: str = "tanh"
    arch: ArchConfig | None = field(default=None, repr=False)

    def theta(self) -> list[Tensor]:
        return [t for layer in self.encoder + self.predictor for t in layer.params()]

    def psi(self) -> list[Tensor]:
        return [t for layer in self.env_head for t in layer.params()]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for group in ("encoder", "predictor", "env_head"):
            for i, layer in enumerate(getattr(self, group)):
                out[f"{group}.{i}.weight"] = layer.weight
                out[f"{group}.{i}.bias"] = layer.bias
        return out

    def copy(self) -> ModelParams:
        def dup(layers):
            return [
                Layer(Tensor(l.weight.values, requires_grad=True), Tensor(l.bias.values, requires_grad=True))
                for l in layers
            ]

        return ModelParams(dup(self.encoder), dup(self.predictor), dup(self.env_head), self.embed_dim, self.activation, self.arch)


def _stack(widths: list[int], rng: np.random.Generator) -> list[Layer]:
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = init_bound(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(Layer(Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
    return layers


def init_bound(fan_in: int) -> float:
    """Uniform init half-width; unit-variance pre-activations for unit-variance inputs."""
    return float(np.sqrt(3.0 / fan_in))


def init(config: ArchConfig) -> ModelParams:
    rng = np.random.default_rng(config.init_seed)
    enc_widths = [config.input_dim, *config.encoder_hidden, config.embed_dim]
    env_widths = [config.embed_dim, *config.env_head_hidden, config.num_envs]
    return ModelParams(
        encoder=_stack(enc_widths, rng),
        predictor=_stack([config.embed_dim, 1], rng),
        env_head=_stack(env_widths, rng),
        embed_dim=config.embed_dim,
        activation=config.activation,
        arch=config,
    )


def _mlp(layers: list[Layer], h: Tensor, kind: str, activate_last: bool) -> Tensor:
    for i, layer in enumerate(layers):
        h = affine(h, layer.weight, layer.bias)
        if activate_last or i < len(layers) - 1:
            h = activation(h, kind)
    return h


def encode(params: ModelParams, x) -> Tensor:
    """Embedding batch; every encoder layer, including the last, is followed by the activation."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = params.encoder[0].weight.shape[0]
    if x.values.ndim != 2 or x.shape[1] != p:
        raise DimensionError(f"encode: expected (n, {p}) input, got {x.shape}")
    return _mlp(params.encoder, x, params.activation, activate_last=True)


def predict_outcome(params: ModelParams, h: Tensor) -> Tensor:
    """Outcome logits, shape (n,).  The head is a single affine map."""
    if h.values.ndim != 2 or h.shape[1] != params.embed_dim:
        raise DimensionError(f"predict_outcome: expected (n, {params.embed_dim}) embedding, got {h.shape}")
    out = _mlp(params.predictor, h, params.activation, activate_last=False)
    return reshape(out, (h.shape[0],))


def classify_env(params: ModelParams, h: Tensor, lam: float) -> Tensor:
    """Environment logits through a gradient-reversal layer of strength ``lam``."""
    if lam < 0:
        raise ConfigError(f"classify_env: lambda must be >= 0, got {lam}")
    if h.values.ndim != 2 or h.shape[1] != params.embed_dim:
        raise DimensionError(f"classify_env: expected (n, {params.embed_dim}) embedding, got {h.shape}")
    return _mlp(params.env_head, grad_reverse(h, lam), params.activation, activate_last=False)


def predict_proba(params: ModelParams, x: np.ndarray) -> np.ndarray:
    from .autodiff import sigmoid_np

    return sigmoid_np(predict_outcome(params, encode(params, Tensor(x))).values)


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return encode(params, Tensor(x)).values


# Checkpoint format: a NumPy .npz archive.  Each tensor is stored under its
# dotted name ("encoder.0.weight", ...) with its shape; the key "__arch__"
# holds the ArchConfig as a JSON string.


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    arrays = {name: t.values for name, t in params.named_tensors().items()}
    arch = asdict(params.arch) if params.arch is not None else {
        "embed_dim": params.embed_dim,
        "activation": params.activation,
    }
    arrays["__arch__"] = np.array(json.dumps(arch, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        arch_dict = json.loads(str(data["__arch__"]))
        groups: dict[str, dict[int, dict[str, np.ndarray]]] = {"encoder": {}, "predictor": {}, "env_head": {}}
        for name in data.files:
            if name == "__arch__":
                continue
            group, idx, kind = name.split(".")
            groups[group].setdefault(int(idx), {})[kind] = data[name]

    def layers(group):
        return [
            Layer(Tensor(groups[group][i]["weight"], requires_grad=True), Tensor(groups[group][i]["bias"], requires_grad=True))
            for i in sorted(groups[group])
        ]

    arch = None
    if "input_dim" in arch_dict:
        for key in ("encoder_hidden", "env_head_hidden"):
            arch_dict[key] = tuple(arch_dict[key])
        arch = ArchConfig(**arch_dict)
    return ModelParams(
        layers("encoder"), layers("predictor"), layers("env_head"), arch_dict["embed_dim"], arch_dict["activation"], arch
    )
