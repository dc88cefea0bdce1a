"""Transferability-guided masked attention.

The additive mask admits a (query, key) pair only where the predicted mask
probability and the key's transferability both fall at or below their
thresholds; everything else gets -inf.  A query whose row is entirely -inf
falls back to attending everywhere, and the fallback is flagged so callers
can count how often it fires.  Mask entries are constants: no gradient flows
through the threshold comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netpbm
from .errors import InputError, ShapeError
from .numkit import softmax_columns


def percentile_threshold(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: element at index ceil(p/100 * n) - 1 of the
    ascending sort, clamped to the array; p = 0 gives the minimum."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise InputError("cannot take a percentile of no values")
    if not 0.0 <= p <= 100.0:
        raise InputError(f"percentile must be in [0, 100], got {p}")
    ordered = np.sort(values)
    idx = int(np.ceil(p / 100.0 * values.size)) - 1
    idx = min(max(idx, 0), values.size - 1)
    return float(ordered[idx])


@dataclass
class MaskInputs:
    """Predicted mask probabilities, per-key transferability, and thresholds."""

    mask_probs: np.ndarray       # (N, H_l*W_l) in [0, 1]
    transferability: np.ndarray  # (H_l*W_l,) in [0, 1]
    lambda_m: float
    lambda_t: float

    def __post_init__(self) -> None:
        self.mask_probs = np.asarray(self.mask_probs, dtype=float)
        self.transferability = np.asarray(self.transferability, dtype=float)
        if self.mask_probs.ndim != 2:
            raise ShapeError(f"mask probs must be (N, keys), got {self.mask_probs.shape}")
        if self.transferability.shape != (self.mask_probs.shape[1],):
            raise ShapeError(
                f"transferability {self.transferability.shape} does not match "
                f"{self.mask_probs.shape[1]} key locations"
            )
        for name, arr in (("mask probs", self.mask_probs),
                          ("transferability", self.transferability)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise InputError(f"{name} must lie in [0, 1]")
        for name, val in (("lambda_m", self.lambda_m), ("lambda_t", self.lambda_t)):
            if not 0.0 <= val <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {val}")


@dataclass
class AttentionMaskTensor:
    """Additive mask with entries in {0, -inf} plus per-query fallback flags."""

    additive: np.ndarray  # (N, H_l*W_l)
    fallback: np.ndarray  # (N,) bool


def build_mask(mi: MaskInputs) -> AttentionMaskTensor:
    """Dual-thresholded additive mask.

    Entry (i, j) is 0 iff mask_probs[i, j] <= lambda_m and the key's
    transferability is <= lambda_t (transferability is per key location,
    broadcast across queries).  Queries left with no admissible key get their
    row reset to all zeros and their fallback flag set.
    """
    allowed = (mi.mask_probs <= mi.lambda_m) & (mi.transferability[None, :] <= mi.lambda_t)
    fallback = ~allowed.any(axis=1)
    allowed[fallback, :] = True
    additive = np.where(allowed, 0.0, -np.inf)
    return AttentionMaskTensor(additive=additive, fallback=fallback)


@dataclass
class AttentionInputs:
    """Single-head attention operands at one layer's spatial resolution."""

    queries: np.ndarray  # (C, N)
    keys: np.ndarray     # (C, H_l*W_l)
    values: np.ndarray   # (H_l*W_l, C)
    height: int
    width: int

    def __post_init__(self) -> None:
        self.queries = np.asarray(self.queries, dtype=float)
        self.keys = np.asarray(self.keys, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        c, _ = self.queries.shape
        if self.keys.shape[0] != c or self.values.shape[1] != c:
            raise ShapeError(
                f"channel dims disagree: Q {self.queries.shape}, "
                f"K {self.keys.shape}, V {self.values.shape}"
            )
        keys_n = self.height * self.width
        if keys_n < 1 or self.keys.shape[1] != keys_n or self.values.shape[0] != keys_n:
            raise ShapeError(
                f"spatial dims {self.height}x{self.width} do not match "
                f"K {self.keys.shape} / V {self.values.shape}"
            )

    @property
    def channels(self) -> int:
        return self.queries.shape[0]

    @property
    def num_queries(self) -> int:
        return self.queries.shape[1]


def masked_attention_weights(ai: AttentionInputs, mask: AttentionMaskTensor) -> np.ndarray:
    """Attention weights (keys x queries); each column sums to 1."""
    expected = (ai.num_queries, ai.keys.shape[1])
    if mask.additive.shape != expected:
        raise ShapeError(f"mask {mask.additive.shape} does not match {expected}")
    scores = (ai.keys.T @ ai.queries) / math.sqrt(ai.channels)
    return softmax_columns(scores + mask.additive.T)


def tma_attention(ai: AttentionInputs, mask: AttentionMaskTensor) -> np.ndarray:
    """Masked scaled-dot-product attention; returns updated queries (N, C).

    Scores are K^T Q / sqrt(C) plus the additive mask, normalized over the
    key axis per query; the output row for query n is the weight-averaged
    value rows.
    """
    weights = masked_attention_weights(ai, mask)
    return weights.T @ ai.values


def attention_backward_from_weights(
    queries: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    weights: np.ndarray,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of weights.T @ values given precomputed attention weights.

    Positions whose weight is exactly 0 (masked) receive zero gradient
    through the softmax backward.
    """
    d_values = weights @ upstream                   # (keys, C)
    d_weights = values @ upstream.T                 # (keys, N)
    d_scores = weights * (d_weights - np.sum(weights * d_weights, axis=0))
    scale = 1.0 / math.sqrt(queries.shape[0])
    d_queries = (keys @ d_scores) * scale           # (C, N)
    d_keys = (queries @ d_scores.T) * scale         # (C, keys)
    return d_queries, d_keys, d_values


def tma_attention_backward(
    ai: AttentionInputs,
    mask: AttentionMaskTensor,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of tma_attention w.r.t. queries, keys and values.

    ``upstream`` is the loss gradient at the (N, C) output.  Mask entries are
    constants, so -inf positions contribute exactly zero gradient.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (ai.num_queries, ai.channels):
        raise ShapeError(
            f"upstream {upstream.shape} does not match output "
            f"({ai.num_queries}, {ai.channels})"
        )
    weights = masked_attention_weights(ai, mask)
    return attention_backward_from_weights(ai.queries, ai.keys, ai.values, weights, upstream)


def mask_images(mask: AttentionMaskTensor, height: int, width: int) -> list[np.ndarray]:
    """Per-query uint8 images of the mask: admitted keys white, -inf black."""
    if mask.additive.shape[1] != height * width:
        raise ShapeError(
            f"mask covers {mask.additive.shape[1]} keys, grid is {height}x{width}"
        )
    out = []
    for row in mask.additive:
        out.append(np.where(np.isfinite(row), 255, 0).astype(np.uint8).reshape(height, width))
    return out


def write_mask_pgm(mask: AttentionMaskTensor, height: int, width: int,
                   query: int, path) -> None:
    netpbm.write_pgm(path, mask_images(mask, height, width)[query])
