"""Feature extractor G, cosine classifier F and the run hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

CHECKPOINT_VERSION = 1


@dataclass
class HyperParams:
    """Loss balance, thresholds, optimizer settings and batch sizes for one run."""

    lam: float = 1.0
    tau: float = 0.95
    nu: float = 30.0
    k: int = 5
    temperature: float = 0.05
    ramp_steps: int | None = None  # None: half of the total training steps
    lr: float = 0.01
    lr_gamma: float = 1e-4
    lr_power: float = 0.75
    momentum: float = 0.9
    batch_source: int = 16
    batch_target: int = 16
    batch_unlabeled: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be positive, got {self.k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.ramp_steps is not None and self.ramp_steps <= 0:
            raise ValueError(f"ramp_steps must be positive, got {self.ramp_steps}")
        for name in ("batch_source", "batch_target", "batch_unlabeled"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class FeatureExtractor:
    """MLP ``input_dim -> hidden... -> feature_dim`` with ReLU between layers only."""

    def __init__(self, weights: list[dc.Tensor], biases: list[dc.Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = weights
        self.biases = biases

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[dc.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __call__(self, x: dc.Tensor) -> dc.Tensor:
        return extract(self, x)


class CosineClassifier:
    """Bias-free linear map on l2-normalized features, divided by a temperature."""

    def __init__(self, weight: dc.Tensor, temperature: float):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.weight = weight
        self.temperature = float(temperature)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[dc.Tensor]:
        return [self.weight]

    def logits(self, features: dc.Tensor) -> dc.Tensor:
        unit = dc.l2_normalize_rows(features)
        return dc.scale(dc.matmul(unit, self.weight), 1.0 / self.temperature)

    def __call__(self, features: dc.Tensor) -> dc.Tensor:
        return dc.softmax_rows(self.logits(features))


@dataclass
class ModelParams:
    G: FeatureExtractor
    F: CosineClassifier
    meta: dict = field(default_factory=dict)

    def parameters(self) -> list[dc.Tensor]:
        return self.G.parameters() + self.F.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.G.weights, self.G.biases)):
            out[f"G.W{i}"] = w.data
            out[f"G.b{i}"] = b.data
        out["F.W"] = self.F.weight.data
        return out

    def copy(self) -> "ModelParams":
        return from_state({k: v.copy() for k, v in self.state().items()}, self.F.temperature)


def _as_batch(x) -> dc.Tensor:
    return x if isinstance(x, dc.Tensor) else dc.Tensor(x)


def extract(G: FeatureExtractor, x) -> dc.Tensor:
    x = _as_batch(x)
    if x.data.ndim != 2 or x.shape[1] != G.input_dim:
        raise dc.ShapeError("extract", x.shape, (-1, G.input_dim))
    h = x
    last = len(G.weights) - 1
    for i, (w, b) in enumerate(zip(G.weights, G.biases)):
        h = dc.add(dc.matmul(h, w), b)
        if i < last:
            h = dc.relu(h)
    return h


def predict(G: FeatureExtractor, F: CosineClassifier, x) -> dc.Tensor:
    return F(extract(G, x))


def init_params(seed: int, input_dim: int, num_classes: int, hidden_dims=(64, 32),
                feature_dim: int = 32, temperature: float = 0.05, k: int = 5) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    if feature_dim < k:
        raise ValueError(f"feature_dim ({feature_dim}) must be >= k ({k}) for the top-k similarity")
    if input_dim < 1 or num_classes < 2 or any(h < 1 for h in hidden_dims):
        raise ValueError("invalid layer dimensions")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden_dims, feature_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(dc.Tensor(rng.uniform(-a, a, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(dc.Tensor(np.zeros(fan_out), requires_grad=True))
    a = np.sqrt(6.0 / (feature_dim + num_classes))
    W = dc.Tensor(rng.uniform(-a, a, size=(feature_dim, num_classes)), requires_grad=True)
    return ModelParams(FeatureExtractor(weights, biases), CosineClassifier(W, temperature))


def from_state(state: dict[str, np.ndarray], temperature: float) -> ModelParams:
    n = sum(1 for key in state if key.startswith("G.W"))
    weights = [dc.Tensor(state[f"G.W{i}"], requires_grad=True) for i in range(n)]
    biases = [dc.Tensor(state[f"G.b{i}"], requires_grad=True) for i in range(n)]
    W = dc.Tensor(state["F.W"], requires_grad=True)
    return ModelParams(FeatureExtractor(weights, biases), CosineClassifier(W, temperature))


def save_checkpoint(params: ModelParams, path) -> None:
    """Write every weight array, plus format version and temperature, to an ``.npz``."""
    arrays = dict(params.state())
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__temperature__"] = np.array(params.F.temperature)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(Path(path)) as npz:
        version = int(npz["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        temperature = float(npz["__temperature__"])
        state = {k: npz[k].copy() for k in npz.files if not k.startswith("__")}
    return from_state(state, temperature)
