"""Small fully-convolutional segmenter producing per-pixel class logits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, conv2d, default_dtype, relu, tensor


@dataclass(frozen=True)
class Architecture:
    """Hidden conv widths and kernel sizes, then a 1x1 head to ``num_classes``."""

    widths: tuple[int, ...] = (16, 32, 32)
    kernels: tuple[int, ...] = (3, 3, 3)
    num_classes: int = 8
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        if len(self.widths) != len(self.kernels):
            raise ConfigError("widths and kernels must have equal length")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigError("kernel sizes must be odd")

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        shapes = []
        cin = self.in_channels
        for wd, k in zip(self.widths, self.kernels):
            shapes.append((k, k, cin, wd))
            cin = wd
        shapes.append((1, 1, cin, self.num_classes))
        return shapes

    def n_params(self) -> int:
        return sum(int(np.prod(s)) + s[-1] for s in self.layer_shapes())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["widths"]), tuple(d["kernels"]), int(d["num_classes"]),
                   int(d.get("in_channels", 3)))


@dataclass
class SegmenterParams:
    arch: Architecture
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def flat(self) -> list[np.ndarray]:
        return [a for pair in self.layers for a in pair]

    @classmethod
    def from_flat(cls, arch: Architecture, arrays: list[np.ndarray]) -> "SegmenterParams":
        return cls(arch, [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])

    def check(self) -> None:
        shapes = self.arch.layer_shapes()
        if len(shapes) != len(self.layers):
            raise DimensionError(f"expected {len(shapes)} layers, got {len(self.layers)}")
        for s, (k, b) in zip(shapes, self.layers):
            if k.shape != s or b.shape != (s[-1],):
                raise DimensionError(f"layer shape {k.shape}/{b.shape}, expected {s}")

    def astype(self, dtype) -> "SegmenterParams":
        return SegmenterParams(self.arch, [(k.astype(dtype), b.astype(dtype))
                                           for k, b in self.layers])


def init_params(arch: Architecture, seed: int) -> SegmenterParams:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for kh, kw, cin, cout in arch.layer_shapes():
        std = np.sqrt(2.0 / (kh * kw * cin))
        k = rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(default_dtype())
        layers.append((k, np.zeros(cout, dtype=default_dtype())))
    return SegmenterParams(arch, layers)


def as_leaves(params: SegmenterParams, requires_grad: bool = True) -> list[tuple[Tensor, Tensor]]:
    return [(tensor(k, requires_grad), tensor(b, requires_grad)) for k, b in params.layers]


def segmenter_forward(image, params, requires_grad: bool = False) -> Tensor:
    """Logits for an HxWx3 image or an NxHxWx3 batch.

    ``params`` is either :class:`SegmenterParams` or the list returned by
    :func:`as_leaves` (so the caller can read gradients off the leaves).
    """
    if isinstance(params, SegmenterParams):
        params.check()
        leaves = as_leaves(params, requires_grad)
    else:
        leaves = params
    x = image if isinstance(image, Tensor) else tensor(image)
    if x.shape[-1] != leaves[0][0].shape[2]:
        raise DimensionError(f"image has {x.shape[-1]} channels")
    for i, (k, b) in enumerate(leaves):
        x = conv2d(x, k, b)
        if i < len(leaves) - 1:
            x = relu(x)
    return x


def predict(logits) -> np.ndarray:
    """Hard labels: per-pixel argmax, ties to the lowest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)
