"""Feature extractor + linear classifier over the autodiff tape.

The architecture mirrors the usual G/F split: a relu MLP maps inputs to a
feature vector, a single affine layer maps features to class logits. Both the
alignment losses and the pseudo-labeling operate on the classifier outputs,
so "features" in the loss modules means logits, not the hidden activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, matmul, relu
from .errors import ContractError


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = (64, 64)
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ContractError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        dims = tuple(int(d) for d in self.hidden_dims)
        if not dims or any(d < 1 for d in dims):
            raise ContractError(f"hidden_dims must be non-empty positive, got {self.hidden_dims}")
        object.__setattr__(self, "hidden_dims", dims)
        if self.init_scale < 0:
            raise ContractError(f"init_scale must be >= 0, got {self.init_scale}")


@dataclass
class Model:
    config: ModelConfig
    # (weight, bias) per hidden layer, weights oriented [in, out]
    extractor: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    classifier: tuple[Tensor, Tensor] | None = None

    def parameters(self) -> dict[str, Tensor]:
        """Named parameters in a stable order (layer by layer, weight then bias)."""
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(self.extractor):
            params[f"extractor.{i}.weight"] = w
            params[f"extractor.{i}.bias"] = b
        w, b = self.classifier
        params["classifier.weight"] = w
        params["classifier.bias"] = b
        return params

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, for checkpoints and snapshots."""
        return {name: p.values.copy() for name, p in self.parameters().items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ContractError(
                f"state names {sorted(state)} do not match model parameters {sorted(params)}"
            )
        for name, arr in state.items():
            p = params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.values.shape:
                raise ContractError(
                    f"{name}: shape {arr.shape} does not match {p.values.shape}"
                )
            p.values = arr.copy()


def init_model(config: ModelConfig) -> Model:
    """Fresh model with uniform(-init_scale, init_scale) weights, zero biases.

    Draw order is fixed (one weight matrix per layer, input side first), so a
    given (config, seed) always produces bit-identical parameters.
    """
    rng = np.random.default_rng(config.seed)
    s = config.init_scale

    def layer(fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
        w = rng.uniform(-s, s, size=(fan_in, fan_out)) if s > 0 else np.zeros((fan_in, fan_out))
        weight = Tensor(w, requires_grad=True)
        bias = Tensor(np.zeros(fan_out), requires_grad=True)
        return weight, bias

    model = Model(config=config)
    fan_in = config.input_dim
    for width in config.hidden_dims:
        model.extractor.append(layer(fan_in, width))
        fan_in = width
    model.classifier = layer(fan_in, config.num_classes)
    return model


def extract_features(model: Model, x) -> Tensor:
    """relu MLP features for a batch; accepts a Tensor or a [n, d] array."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.values.ndim != 2 or h.values.shape[1] != model.config.input_dim:
        raise ContractError(
            f"expected input of shape [n, {model.config.input_dim}], got {h.values.shape}"
        )
    for w, b in model.extractor:
        h = relu(add(matmul(h, w), b))
    return h


def classify(model: Model, features: Tensor) -> Tensor:
    w, b = model.classifier
    return add(matmul(features, w), b)


def forward(model: Model, x) -> Tensor:
    """Logits for a batch: classifier applied to extractor features."""
    return classify(model, extract_features(model, x))


def predict(model: Model, x) -> np.ndarray:
    """Hard labels; argmax ties resolve to the lowest class index."""
    logits = forward(model, x).values
    return np.argmax(logits, axis=1)


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of correct predictions on a labeled set."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ContractError("evaluate: empty evaluation set")
    if x.shape[0] != y.shape[0]:
        raise ContractError(f"evaluate: {x.shape[0]} rows but {y.shape[0]} labels")
    return float(np.mean(predict(model, x) == y))
