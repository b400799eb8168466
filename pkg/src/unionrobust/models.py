"""Classifier architectures: a plain MLP and the small MNIST CNN.

Parameters live in an ordinary ``dict`` mapping names to float64 arrays;
insertion order is the canonical order used by checkpoints and optimizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import (
    DimensionError,
    Tape,
    Tensor,
    affine,
    conv2d,
    flatten,
    maxpool2x2,
    relu,
    softmax_cross_entropy,
)

ParameterSet = Dict[str, np.ndarray]

ARCHITECTURES = ("mlp", "mnist_cnn")
KERNEL = 5
PADDING = 2


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``widths`` are the hidden layer sizes of an MLP.  For ``mnist_cnn`` the
    fields ``filters`` and ``hidden`` give the two conv widths and the size of
    the fully connected layer.
    """

    arch: str = "mnist_cnn"
    input_shape: Tuple[int, int, int] = (1, 28, 28)
    n_classes: int = 10
    widths: Tuple[int, ...] = ()
    filters: Tuple[int, int] = (32, 64)
    hidden: int = 1024

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.arch == "mnist_cnn":
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError(f"mnist_cnn needs H and W divisible by 4, got {h}x{w}")
            if len(self.filters) != 2:
                raise ValueError("mnist_cnn takes exactly two filter counts")

    @classmethod
    def mnist(cls, scaled: bool = False) -> "ModelSpec":
        if scaled:
            return cls("mnist_cnn", (1, 28, 28), 10, filters=(16, 32), hidden=128)
        return cls("mnist_cnn", (1, 28, 28), 10)

    @classmethod
    def mlp(cls, n_features: int, n_classes: int, widths=(64,)) -> "ModelSpec":
        return cls("mlp", (1, 1, n_features), n_classes, widths=tuple(widths))

    @property
    def n_features(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_shapes(self) -> list[tuple[str, tuple]]:
        """(name, shape) for every parameter in canonical order."""
        if self.arch == "mlp":
            sizes = [self.n_features, *self.widths, self.n_classes]
            shapes = []
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                shapes.append((f"fc{i}.weight", (fan_in, fan_out)))
                shapes.append((f"fc{i}.bias", (fan_out,)))
            return shapes
        c, h, w = self.input_shape
        f1, f2 = self.filters
        flat = f2 * (h // 4) * (w // 4)
        return [
            ("conv1.weight", (f1, c, KERNEL, KERNEL)),
            ("conv1.bias", (f1,)),
            ("conv2.weight", (f2, f1, KERNEL, KERNEL)),
            ("conv2.bias", (f2,)),
            ("fc1.weight", (flat, self.hidden)),
            ("fc1.bias", (self.hidden,)),
            ("fc2.weight", (self.hidden, self.n_classes)),
            ("fc2.bias", (self.n_classes,)),
        ]

    def n_parameters(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.layer_shapes()))

    def to_descriptor(self) -> str:
        shape = "x".join(str(v) for v in self.input_shape)
        parts = [f"arch={self.arch}", f"input={shape}", f"classes={self.n_classes}"]
        if self.arch == "mlp":
            parts.append("widths=" + ",".join(str(v) for v in self.widths))
        else:
            parts.append("filters=" + ",".join(str(v) for v in self.filters))
            parts.append(f"hidden={self.hidden}")
        return ";".join(parts)

    @classmethod
    def from_descriptor(cls, text: str) -> "ModelSpec":
        fields = dict(item.split("=", 1) for item in text.split(";") if item)

        def ints(value):
            return tuple(int(v) for v in value.split(",") if v)

        try:
            kwargs = dict(
                arch=fields["arch"],
                input_shape=tuple(int(v) for v in fields["input"].split("x")),
                n_classes=int(fields["classes"]),
            )
            if fields["arch"] == "mlp":
                kwargs["widths"] = ints(fields.get("widths", ""))
            else:
                kwargs["filters"] = ints(fields["filters"])
                kwargs["hidden"] = int(fields["hidden"])
        except (KeyError, ValueError) as exc:
            raise ValueError(f"malformed model descriptor {text!r}") from exc
        return cls(**kwargs)


def build(spec: ModelSpec, seed: int) -> ParameterSet:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(spec: ModelSpec, params: ParameterSet) -> None:
    expected = spec.layer_shapes()
    if list(params) != [name for name, _ in expected]:
        raise ValueError(f"parameter names {list(params)} do not match {spec.arch}")
    for name, shape in expected:
        if np.shape(params[name]) != shape:
            raise DimensionError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


def forward(spec: ModelSpec, params, x, tape: Optional[Tape] = None) -> Tensor:
    """Logits of ``x`` (shape (B, C, H, W)).

    ``params`` values may be raw arrays (treated as constants) or tensors
    watched on ``tape``; ``x`` likewise.  When ``tape`` is given and ``x`` is a
    raw array it is watched automatically.
    """
    if tape is not None and not isinstance(x, Tensor):
        x = tape.watch(x)
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 4 or data.shape[1:] != spec.input_shape:
        raise DimensionError(f"input shape {data.shape[1:]} does not match model input {spec.input_shape}")
    if spec.arch == "mlp":
        h = flatten(x)
        n_layers = len(spec.widths) + 1
        for i in range(n_layers):
            h = affine(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
            if i < n_layers - 1:
                h = relu(h)
        return h
    h = maxpool2x2(relu(conv2d(x, params["conv1.weight"], params["conv1.bias"], PADDING)))
    h = maxpool2x2(relu(conv2d(h, params["conv2.weight"], params["conv2.bias"], PADDING)))
    h = relu(affine(flatten(h), params["fc1.weight"], params["fc1.bias"]))
    return affine(h, params["fc2.weight"], params["fc2.bias"])


def predict_logits(spec: ModelSpec, params: ParameterSet, x: np.ndarray) -> np.ndarray:
    return forward(spec, params, np.asarray(x, dtype=np.float64)).data


def loss_and_input_grad(spec: ModelSpec, params: ParameterSet, x: np.ndarray, y: np.ndarray):
    """Per-example losses, per-example input gradients and logits at ``x``.

    Uses a summed loss so that row ``i`` of the gradient is exactly the
    gradient of example ``i``'s own loss.
    """
    tape = Tape()
    xt = tape.watch(x)
    logits = forward(spec, params, xt, tape)
    total = softmax_cross_entropy(logits, y, reduction="sum")
    grad = tape.gradient(total, xt)
    losses = softmax_cross_entropy(logits.data, y, reduction="none").data
    return losses, grad, logits.data


def per_example_loss(spec: ModelSpec, params: ParameterSet, x: np.ndarray, y: np.ndarray):
    """(losses, logits) without recording a tape."""
    logits = predict_logits(spec, params, x)
    return softmax_cross_entropy(logits, y, reduction="none").data, logits
