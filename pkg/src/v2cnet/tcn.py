"""Action classification branch: three temporal convolutions and two dense layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Parameter,
    Tensor,
    affine,
    as_tensor,
    relu,
    reshape,
    sigmoid_cross_entropy,
    softmax_cross_entropy,
    temporal_conv,
    temporal_maxpool,
)

FULL_FILTERS = (2048, 1024, 512)
DESK_FILTERS = (128, 64, 32)
KERNEL_WIDTH = 3
POOL_WIDTH = 2
POOL_STRIDE = 2


@dataclass
class ConvLayer:
    kernel: Parameter
    bias: Parameter


@dataclass
class DenseLayer:
    W: Parameter
    b: Parameter


@dataclass
class TcnParams:
    conv0: ConvLayer
    conv1: ConvLayer
    conv2: ConvLayer
    fc0: DenseLayer
    fc1: DenseLayer
    n: int

    @property
    def classes(self) -> int:
        return self.fc1.W.shape[0]

    def named(self) -> dict[str, Parameter]:
        out = {}
        for layer in ("conv0", "conv1", "conv2"):
            conv = getattr(self, layer)
            out[f"{layer}.kernel"] = conv.kernel
            out[f"{layer}.bias"] = conv.bias
        for layer in ("fc0", "fc1"):
            dense = getattr(self, layer)
            out[f"{layer}.W"] = dense.W
            out[f"{layer}.b"] = dense.b
        return out


@dataclass(frozen=True)
class ActionLabel:
    class_index: int
    num_classes: int

    def __post_init__(self):
        if not 0 <= self.class_index < self.num_classes:
            raise ValueError(f"action class {self.class_index} outside [0, {self.num_classes})")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.num_classes)
        v[self.class_index] = 1.0
        return v


def pooled_length(n: int, stages: int = 2) -> int:
    for _ in range(stages):
        n = -(-n // POOL_STRIDE)
    return n


def init_tcn(n: int, d: int, classes: int, rng: np.random.Generator,
             filters: tuple[int, int, int] = DESK_FILTERS, fc_width: int = 256,
             prefix: str = "") -> TcnParams:
    """He-uniform weights scaled by fan-in, zero biases."""

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    convs = []
    d_in = d
    for i, d_out in enumerate(filters):
        convs.append(ConvLayer(
            Parameter(uniform((KERNEL_WIDTH, d_in, d_out), KERNEL_WIDTH * d_in),
                      f"{prefix}conv{i}.kernel"),
            Parameter(np.zeros(d_out), f"{prefix}conv{i}.bias")))
        d_in = d_out
    flat = pooled_length(n) * filters[2]
    fc0 = DenseLayer(Parameter(uniform((fc_width, flat), flat), f"{prefix}fc0.W"),
                     Parameter(np.zeros(fc_width), f"{prefix}fc0.b"))
    fc1 = DenseLayer(Parameter(uniform((classes, fc_width), fc_width), f"{prefix}fc1.W"),
                     Parameter(np.zeros(classes), f"{prefix}fc1.b"))
    return TcnParams(convs[0], convs[1], convs[2], fc0, fc1, n)


def tcn_forward(X, p: TcnParams) -> Tensor:
    """Class logits for a (..., n, d) feature sequence. The last layer is linear."""
    X = as_tensor(X)
    if X.shape[-2] != p.n:
        raise ValueError(f"tcn_forward: expected {p.n} frames, got {X.shape[-2]}")
    phi0 = temporal_conv(X, p.conv0.kernel, p.conv0.bias)
    phi1 = temporal_conv(temporal_maxpool(relu(phi0), POOL_WIDTH, POOL_STRIDE),
                         p.conv1.kernel, p.conv1.bias)
    phi2 = temporal_conv(temporal_maxpool(relu(phi1), POOL_WIDTH, POOL_STRIDE),
                         p.conv2.kernel, p.conv2.bias)
    flat = reshape(relu(phi2), X.shape[:-2] + (phi2.shape[-2] * phi2.shape[-1],))
    f0 = relu(affine(flat, p.fc0.W, p.fc0.b))
    return affine(f0, p.fc1.W, p.fc1.b)


def classify(logits) -> int | np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    v = logits.value if isinstance(logits, Tensor) else np.asarray(logits)
    out = np.argmax(v, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def cls_loss(logits, label, kind: str = "sigmoid") -> Tensor:
    """Classification loss. ``label`` is an ActionLabel or an int class array.

    ``kind="sigmoid"`` sums per-class binary cross-entropies against the
    one-hot target; ``kind="softmax"`` is the categorical cross-entropy.
    """
    logits = as_tensor(logits)
    C = logits.shape[-1]
    idx = np.asarray(label.class_index if isinstance(label, ActionLabel) else label)
    if np.any(idx < 0) or np.any(idx >= C):
        raise ValueError(f"cls_loss: class index outside [0, {C})")
    if kind == "softmax":
        return softmax_cross_entropy(logits, idx)
    if kind != "sigmoid":
        raise ValueError(f"unknown classification loss {kind!r}")
    return sigmoid_cross_entropy(logits, np.eye(C)[idx])
