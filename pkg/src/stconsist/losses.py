"""Consistency and cross-entropy losses over HxWxC logits masks.

Weight maps are plain constant arrays: no gradient flows into them, even when
derived from logits.  Every weighting is normalized to sum to one over valid
(pixel, class) entries, or is identically zero when no pixel is valid.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import (Tensor, absolute, log_softmax_channels, mul, pick_channels, scale,
                     sub, tensor, total)

MIX_WEIGHTS = {"uniform": 0.2, "label": 0.4, "pixel": 0.4}
EDGE_THRESHOLD = 0.1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _normalize(w: np.ndarray) -> np.ndarray:
    s = w.sum()
    if s <= 0:
        return np.zeros_like(w)
    return w / s


def argmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=-1)


def weight_uniform(h: int, w: int, c: int, validity: np.ndarray) -> np.ndarray:
    valid = np.asarray(validity, dtype=bool).reshape(h, w)
    return _normalize(np.repeat(valid[:, :, None], c, axis=2).astype(np.float64))


def weight_label_prior(logits, validity: np.ndarray) -> np.ndarray:
    """One-hot at each pixel's predicted class, masked and normalized."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    h, w, c = data.shape
    onehot = np.eye(c)[argmax_channels(data)]
    return _normalize(onehot * np.asarray(validity, dtype=bool)[:, :, None])


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with edge-replicated borders."""
    p = np.pad(np.asarray(gray, dtype=np.float64), 1, mode="edge")
    h, w = gray.shape

    def at(dy, dx):
        return p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    gx = (at(-1, 1) + 2 * at(0, 1) + at(1, 1)) - (at(-1, -1) + 2 * at(0, -1) + at(1, -1))
    gy = (at(1, -1) + 2 * at(1, 0) + at(1, 1)) - (at(-1, -1) + 2 * at(-1, 0) + at(-1, 1))
    return np.hypot(gx, gy)


def dilate(mask: np.ndarray) -> np.ndarray:
    """Binary dilation by a 3x3 square."""
    p = np.pad(mask.astype(bool), 1)
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            out |= p[dy:dy + h, dx:dx + w]
    return out


def edge_map(image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    """Binary HxW edge map of an HxWx3 image (1 on edges)."""
    image = np.asarray(image)
    mag = sobel_magnitude(image.mean(axis=-1))
    peak = mag.max()
    if peak <= 1e-12:
        return np.zeros(mag.shape, dtype=np.uint8)
    return dilate(mag >= threshold * peak).astype(np.uint8)


def weight_pixel_prior(image_t1: np.ndarray, c: int, validity: np.ndarray,
                       threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    edges = edge_map(image_t1, threshold).astype(bool)
    h, w = edges.shape
    valid = np.asarray(validity, dtype=bool)
    if not edges.any():
        return weight_uniform(h, w, c, valid)
    return _normalize(np.repeat((edges & valid)[:, :, None], c, axis=2).astype(np.float64))


def consistency_l1(warped, predicted, weights: np.ndarray, validity: np.ndarray) -> Tensor:
    """Weighted L1 between the warped and the predicted logits."""
    warped, predicted = _as_tensor(warped), _as_tensor(predicted)
    if warped.shape != predicted.shape or weights.shape != warped.shape:
        raise DimensionError(
            f"consistency_l1: {warped.shape}, {predicted.shape}, weights {weights.shape}")
    w = weights * np.asarray(validity, dtype=bool)[:, :, None]
    return total(mul(absolute(sub(warped, predicted)), w))


def variant_weights(variant: str, predicted, image_t1: np.ndarray, validity: np.ndarray,
                    threshold: float = EDGE_THRESHOLD) -> np.ndarray:
    data = predicted.data if isinstance(predicted, Tensor) else np.asarray(predicted)
    h, w, c = data.shape
    if variant == "uniform":
        return weight_uniform(h, w, c, validity)
    if variant == "label":
        return weight_label_prior(data, validity)
    if variant == "pixel":
        return weight_pixel_prior(image_t1, c, validity, threshold)
    raise ValueError(f"unknown weighting {variant!r}")


def combined_consistency(warped, predicted, image_t1: np.ndarray, validity: np.ndarray,
                         mix: dict[str, float] | None = None,
                         threshold: float = EDGE_THRESHOLD) -> Tensor:
    """Mix of the uniform, label-prior and pixel-prior weighted L1 terms."""
    mix = MIX_WEIGHTS if mix is None else mix
    w = sum(mix[name] * variant_weights(name, predicted, image_t1, validity, threshold)
            for name in ("uniform", "label", "pixel"))
    # one weighted sum equals the mix of the three losses; one graph instead of three
    return consistency_l1(warped, predicted, w, validity)


def _masked_ce(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    if labels.shape != logits.shape[:-1] or mask.shape != labels.shape:
        raise DimensionError(f"ce: logits {logits.shape}, labels {labels.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        return scale(total(mul(logits, np.zeros(logits.shape))), 0.0)
    picked = pick_channels(log_softmax_channels(logits), np.where(mask, labels, 0))
    return scale(total(mul(picked, mask.astype(np.float64))), -1.0 / n)


def pseudo_label_ce(warped, pseudo: np.ndarray, validity: np.ndarray) -> Tensor:
    """Mean cross-entropy of the warped logits against constant pseudo labels."""
    return _masked_ce(_as_tensor(warped), np.asarray(pseudo), np.asarray(validity, dtype=bool))


def supervised_ce(logits, labels: np.ndarray, label_validity: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over labeled pixels; works on HxWxC or NxHxWxC."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if label_validity is None:
        label_validity = np.ones(labels.shape, dtype=bool)
    return _masked_ce(logits, labels, np.asarray(label_validity, dtype=bool))
