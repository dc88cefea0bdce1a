"""Minimal query-based segmentation head built around masked attention.

Pixel features are linearly embedded once; N learnable queries pass through
L decoder layers, each a masked cross-attention over the embedded pixels,
a query self-attention, and a two-layer feed-forward block, all with
residual connections.
A class head maps final queries to num_classes+1 logits (the extra slot is
no-object) and a mask-embedding head produces per-query mask logits as dot
products with the embedded pixels.

Queries are tied to classes by position (query n predicts class n), so the
loss needs no bipartite matching.  Each layer's attention mask is built from
that layer's current mask prediction; those thresholded masks are constants
to the backward pass, while the final mask and class logits carry gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adaptive_cluster import FeatureMap
from .errors import ConfigError, InputError, ShapeError
from .numkit import AdamWState, adamw_step, sigmoid, relu, softmax_columns
from .serialize import load_arrays, save_arrays
from .tma import (
    AttentionInputs,
    AttentionMaskTensor,
    MaskInputs,
    attention_backward_from_weights,
    build_mask,
    masked_attention_weights,
    percentile_threshold,
)
from .transferability import TransferabilityMap

MASK_EPS = 1e-7


@dataclass
class DecoderLayer:
    self_w: np.ndarray  # (C, C) value projection of the query self-attention
    ffn_w1: np.ndarray  # (F, C)
    ffn_b1: np.ndarray  # (F,)
    ffn_w2: np.ndarray  # (C, F)
    ffn_b2: np.ndarray  # (C,)


@dataclass
class SegModelParams:
    """All trainable arrays plus the class count they were built for."""

    num_classes: int
    embed_w: np.ndarray   # (C, d_in)
    embed_b: np.ndarray   # (C,)
    queries: np.ndarray   # (C, N)
    layers: list[DecoderLayer]
    class_w: np.ndarray   # (num_classes + 1, C)
    class_b: np.ndarray   # (num_classes + 1,)
    mask_w: np.ndarray    # (C, C)
    mask_b: np.ndarray    # (C,)

    @property
    def channels(self) -> int:
        return self.embed_w.shape[0]

    @property
    def num_queries(self) -> int:
        return self.queries.shape[1]

    def param_list(self) -> list[np.ndarray]:
        out = [self.embed_w, self.embed_b, self.queries]
        for layer in self.layers:
            out += [layer.self_w, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2]
        out += [self.class_w, self.class_b, self.mask_w, self.mask_b]
        return out

    def with_params(self, flat: list[np.ndarray]) -> "SegModelParams":
        """Rebuild the same architecture around a new flat parameter list."""
        if len(flat) != 7 + 5 * len(self.layers):
            raise ShapeError("parameter list does not match architecture")
        layers = []
        for i in range(len(self.layers)):
            sw, w1, b1, w2, b2 = flat[3 + 5 * i:8 + 5 * i]
            layers.append(DecoderLayer(sw, w1, b1, w2, b2))
        return SegModelParams(
            num_classes=self.num_classes,
            embed_w=flat[0],
            embed_b=flat[1],
            queries=flat[2],
            layers=layers,
            class_w=flat[-4],
            class_b=flat[-3],
            mask_w=flat[-2],
            mask_b=flat[-1],
        )

    def copy(self) -> "SegModelParams":
        return self.with_params([a.copy() for a in self.param_list()])


def init_seg_model(
    in_channels: int,
    num_classes: int,
    rng: np.random.Generator,
    num_queries: int = 8,
    channels: int = 16,
    num_layers: int = 3,
    ffn_hidden: int = 32,
) -> SegModelParams:
    if num_layers < 1:
        raise ConfigError(f"need at least one decoder layer, got {num_layers}")
    if num_queries < num_classes:
        raise ConfigError(
            f"need at least one query per class: {num_queries} < {num_classes}"
        )

    def dense(fan_out: int, fan_in: int) -> np.ndarray:
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))

    layers = [
        DecoderLayer(
            # zero init: self-attention starts as a no-op and learns to mix
            self_w=np.zeros((channels, channels)),
            ffn_w1=dense(ffn_hidden, channels),
            ffn_b1=np.zeros(ffn_hidden),
            ffn_w2=dense(channels, ffn_hidden),
            ffn_b2=np.zeros(channels),
        )
        for _ in range(num_layers)
    ]
    return SegModelParams(
        num_classes=num_classes,
        embed_w=dense(channels, in_channels),
        embed_b=np.zeros(channels),
        queries=rng.normal(0.0, 1.0 / math.sqrt(channels), size=(channels, num_queries)),
        layers=layers,
        class_w=dense(num_classes + 1, channels),
        class_b=np.zeros(num_classes + 1),
        mask_w=dense(channels, channels),
        mask_b=np.zeros(channels),
    )


@dataclass
class SegPrediction:
    """Per-query class and mask predictions plus the decoded pixel labels."""

    class_logits: np.ndarray  # (num_classes + 1, N)
    mask_logits: np.ndarray   # (N, H*W)
    class_probs: np.ndarray   # (N, num_classes + 1)
    mask_probs: np.ndarray    # (N, H*W)
    labels: np.ndarray        # (H, W)
    fallback_count: int
    fallback_slots: int

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[0] - 1

    @property
    def fallback_rate(self) -> float:
        return self.fallback_count / self.fallback_slots if self.fallback_slots else 0.0


def decode_labels(class_probs: np.ndarray, mask_probs: np.ndarray,
                  height: int, width: int) -> np.ndarray:
    """Pixel label = class of the highest-scoring query at that pixel.

    A query's score at a pixel is its mask probability times its best real
    (non-no-object) class probability; ties go to the lowest query index.
    """
    real = class_probs[:, :-1]
    query_class = np.argmax(real, axis=1)
    confidence = real[np.arange(real.shape[0]), query_class]
    scores = mask_probs * confidence[:, None]
    winner = np.argmax(scores, axis=0)
    return query_class[winner].reshape(height, width)


def prediction_from_logits(class_logits: np.ndarray, mask_logits: np.ndarray,
                           height: int, width: int, fallback_count: int = 0,
                           fallback_slots: int = 0) -> SegPrediction:
    class_probs = softmax_columns(class_logits).T
    mask_probs = sigmoid(mask_logits)
    return SegPrediction(
        class_logits=class_logits,
        mask_logits=mask_logits,
        class_probs=class_probs,
        mask_probs=mask_probs,
        labels=decode_labels(class_probs, mask_probs, height, width),
        fallback_count=fallback_count,
        fallback_slots=fallback_slots,
    )


@dataclass
class _LayerCache:
    q_in: np.ndarray
    weights: np.ndarray       # cross-attention weights (keys, N)
    u: np.ndarray             # post-cross-attention residual (C, N)
    self_weights: np.ndarray  # query self-attention weights (N, N)
    mix: np.ndarray           # self-attention value mix (C, N)
    v: np.ndarray             # post-self-attention residual (C, N)
    z: np.ndarray             # FFN pre-activation (F, N)
    h: np.ndarray             # FFN hidden activation (F, N)


@dataclass
class _ForwardCache:
    x: np.ndarray        # (d_in, H*W)
    embed: np.ndarray    # (C, H*W)
    layers: list[_LayerCache] = field(default_factory=list)
    q_final: np.ndarray | None = None
    memb: np.ndarray | None = None
    prediction: SegPrediction | None = None
    # Distance of the closest mask probability to lambda_m and of the closest
    # FFN pre-activation to 0.  The loss is only piecewise smooth; gradient
    # checks need these margins to stay away from the seams.
    mask_margin: float = np.inf
    relu_margin: float = np.inf


def _layer_mask(params: SegModelParams, q: np.ndarray, embed: np.ndarray,
                tvec: np.ndarray, lambda_m: float, lambda_t: float
                ) -> tuple[AttentionMaskTensor, float]:
    memb = params.mask_w @ q + params.mask_b[:, None]
    probs = sigmoid(memb.T @ embed)
    margin = float(np.min(np.abs(probs - lambda_m)))
    return build_mask(MaskInputs(probs, tvec, lambda_m, lambda_t)), margin


def _forward(params: SegModelParams, fm: FeatureMap,
             tmap: TransferabilityMap | None, lambda_m: float,
             p_t: float) -> _ForwardCache:
    if fm.channels != params.embed_w.shape[1]:
        raise ShapeError(
            f"feature channels {fm.channels} do not match embedding "
            f"({params.embed_w.shape[1]})"
        )
    x = fm.features.T
    embed = params.embed_w @ x + params.embed_b[:, None]

    if tmap is not None:
        if tmap.pixel.shape != (fm.height, fm.width):
            raise ShapeError(
                f"transferability map {tmap.pixel.shape} does not match "
                f"image {fm.height}x{fm.width}"
            )
        tvec = tmap.pixel.reshape(-1)
        lambda_t = percentile_threshold(tvec, p_t)
    else:
        # Vanilla mode: the transferability condition is always satisfied.
        tvec = np.zeros(fm.num_pixels)
        lambda_t = 1.0

    cache = _ForwardCache(x=x, embed=embed)
    values = embed.T
    q = params.queries
    fallback_count = 0
    scale = math.sqrt(params.channels)
    for layer in params.layers:
        amask, margin = _layer_mask(params, q, embed, tvec, lambda_m, lambda_t)
        cache.mask_margin = min(cache.mask_margin, margin)
        fallback_count += int(np.sum(amask.fallback))
        ai = AttentionInputs(queries=q, keys=embed, values=values,
                             height=fm.height, width=fm.width)
        weights = masked_attention_weights(ai, amask)
        u = q + (weights.T @ values).T
        self_weights = softmax_columns((u.T @ u) / scale)
        mix = u @ self_weights
        v = u + layer.self_w @ mix
        z = layer.ffn_w1 @ v + layer.ffn_b1[:, None]
        h = relu(z)
        cache.relu_margin = min(cache.relu_margin, float(np.min(np.abs(z))))
        q_next = v + layer.ffn_w2 @ h + layer.ffn_b2[:, None]
        cache.layers.append(_LayerCache(q_in=q, weights=weights, u=u,
                                        self_weights=self_weights, mix=mix,
                                        v=v, z=z, h=h))
        q = q_next

    cache.q_final = q
    class_logits = params.class_w @ q + params.class_b[:, None]
    cache.memb = params.mask_w @ q + params.mask_b[:, None]
    mask_logits = cache.memb.T @ embed
    cache.prediction = prediction_from_logits(
        class_logits, mask_logits, fm.height, fm.width,
        fallback_count=fallback_count,
        fallback_slots=len(params.layers) * params.num_queries,
    )
    return cache


def forward(params: SegModelParams, fm: FeatureMap,
            tmap: TransferabilityMap | None = None,
            lambda_m: float = 0.5, p_t: float = 30.0) -> SegPrediction:
    """Run the decoder.  With a transferability map, every layer's attention
    is gated by it (threshold = the p_t percentile of this image's values);
    without one, only the mask-probability condition applies."""
    return _forward(params, fm, tmap, lambda_m, p_t).prediction


def _mask_targets(labels_flat: np.ndarray, num_queries: int, num_classes: int) -> np.ndarray:
    targets = np.zeros((num_queries, labels_flat.size))
    for n in range(min(num_queries, num_classes)):
        targets[n] = labels_flat == n
    return targets


def seg_loss(pred: SegPrediction, labels: np.ndarray,
             pixel_weights: np.ndarray | None = None
             ) -> tuple[float, np.ndarray, np.ndarray]:
    """Fixed-assignment segmentation loss with gradients at the logits.

    Query n is responsible for class n (queries beyond the class count target
    no-object and an empty mask).  The loss is mean per-query class
    cross-entropy plus mean per-pixel binary mask loss; optional pixel
    weights rescale the mask term per pixel.  Returns (loss,
    d_class_logits, d_mask_logits).
    """
    labels = np.asarray(labels)
    num_classes = pred.num_classes
    n_queries = pred.mask_logits.shape[0]
    num_pixels = pred.mask_logits.shape[1]
    if labels.size != num_pixels:
        raise ShapeError(f"labels {labels.shape} do not cover {num_pixels} pixels")
    flat = labels.reshape(-1)
    if flat.min() < 0 or flat.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes}), got "
                         f"[{flat.min()}, {flat.max()}]")
    if pixel_weights is None:
        weights = np.ones(num_pixels)
    else:
        weights = np.asarray(pixel_weights, dtype=float).reshape(-1)
        if weights.shape != (num_pixels,):
            raise ShapeError(f"pixel weights {weights.shape} do not cover {num_pixels} pixels")

    # Class term: stable log-softmax cross-entropy against the fixed targets.
    cls = pred.class_logits
    targets = np.array([n if n < num_classes else num_classes
                        for n in range(n_queries)])
    col_max = cls.max(axis=0)
    lse = col_max + np.log(np.sum(np.exp(cls - col_max), axis=0))
    class_loss = float(np.mean(lse - cls[targets, np.arange(n_queries)]))
    soft = softmax_columns(cls)
    d_class = soft.copy()
    d_class[targets, np.arange(n_queries)] -= 1.0
    d_class /= n_queries

    # Mask term: per-pixel binary cross-entropy, probabilities clamped so the
    # loss stays finite at saturation.
    probs = pred.mask_probs
    y = _mask_targets(flat, n_queries, num_classes)
    clamped = np.clip(probs, MASK_EPS, 1.0 - MASK_EPS)
    bce = -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    scale = 1.0 / (n_queries * num_pixels)
    mask_loss = float(np.sum(weights[None, :] * bce) * scale)
    inside = (probs > MASK_EPS) & (probs < 1.0 - MASK_EPS)
    d_mask = np.where(inside, probs - y, 0.0) * weights[None, :] * scale

    return class_loss + mask_loss, d_class, d_mask


def model_loss_and_grads(
    params: SegModelParams,
    fm: FeatureMap,
    labels: np.ndarray,
    tmap: TransferabilityMap | None = None,
    lambda_m: float = 0.5,
    p_t: float = 30.0,
    pixel_weights: np.ndarray | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Loss plus analytic gradients for every entry of ``param_list``.

    Attention masks are threshold constants, so gradients flow through the
    attention weights, the feed-forward blocks, both heads and the pixel
    embedding, but not through the mask-building comparisons.
    """
    cache = _forward(params, fm, tmap, lambda_m, p_t)
    loss, d_class, d_mask_logits = seg_loss(cache.prediction, labels, pixel_weights)

    q_final = cache.q_final
    embed = cache.embed

    dq = params.class_w.T @ d_class
    g_class_w = d_class @ q_final.T
    g_class_b = d_class.sum(axis=1)

    d_memb = embed @ d_mask_logits.T           # (C, N)
    d_embed = cache.memb @ d_mask_logits       # (C, H*W)
    g_mask_w = d_memb @ q_final.T
    g_mask_b = d_memb.sum(axis=1)
    dq = dq + params.mask_w.T @ d_memb

    layer_grads: list[list[np.ndarray]] = []
    values = embed.T
    scale = math.sqrt(params.channels)
    for layer, lc in zip(reversed(params.layers), reversed(cache.layers)):
        g_w2 = dq @ lc.h.T
        g_b2 = dq.sum(axis=1)
        dh = layer.ffn_w2.T @ dq
        dz = dh * (lc.z > 0)
        g_w1 = dz @ lc.v.T
        g_b1 = dz.sum(axis=1)
        dv_res = dq + layer.ffn_w1.T @ dz       # gradient at v

        # self-attention: v = u + self_w @ (u @ self_weights), scores u^T u
        g_self_w = dv_res @ lc.mix.T
        d_mix = layer.self_w.T @ dv_res         # (C, N)
        du = dv_res + d_mix @ lc.self_weights.T
        d_sw = lc.u.T @ d_mix                   # (N, N)
        d_scores = lc.self_weights * (
            d_sw - np.sum(lc.self_weights * d_sw, axis=0))
        du = du + (lc.u @ (d_scores + d_scores.T)) / scale

        d_attn = du.T                           # (N, C)
        dqa, dk, dv = attention_backward_from_weights(
            lc.q_in, embed, values, lc.weights, d_attn)
        d_embed = d_embed + dk + dv.T
        dq = du + dqa
        layer_grads.append([g_self_w, g_w1, g_b1, g_w2, g_b2])
    layer_grads.reverse()

    g_embed_w = d_embed @ cache.x.T
    g_embed_b = d_embed.sum(axis=1)

    grads: list[np.ndarray] = [g_embed_w, g_embed_b, dq]
    for lg in layer_grads:
        grads.extend(lg)
    grads += [g_class_w, g_class_b, g_mask_w, g_mask_b]
    return loss, grads


@dataclass
class TrainItem:
    """One training example: features, labels, and optional gating inputs."""

    fm: FeatureMap
    labels: np.ndarray
    tmap: TransferabilityMap | None = None
    pixel_weights: np.ndarray | None = None


def train(
    params: SegModelParams,
    items: list[TrainItem],
    steps: int,
    batch_size: int = 8,
    lr: float = 1e-4,
    weight_decay: float = 0.01,
    seed: int = 0,
    lambda_m: float = 0.5,
    p_t: float = 30.0,
) -> tuple[SegModelParams, list[float]]:
    """AdamW training over uniformly sampled batches; returns new params and
    the per-step mean batch loss."""
    if not items:
        raise InputError("training set is empty")
    rng = np.random.default_rng(seed)
    flat = [a.copy() for a in params.param_list()]
    state = AdamWState.for_params(flat, lr=lr, weight_decay=weight_decay)
    losses: list[float] = []
    for _ in range(steps):
        picks = rng.integers(0, len(items), size=batch_size)
        total = 0.0
        acc: list[np.ndarray] | None = None
        current = params.with_params(flat)
        for idx in picks:
            item = items[idx]
            loss, grads = model_loss_and_grads(
                current, item.fm, item.labels, tmap=item.tmap,
                lambda_m=lambda_m, p_t=p_t, pixel_weights=item.pixel_weights)
            total += loss
            if acc is None:
                acc = grads
            else:
                acc = [a + g for a, g in zip(acc, grads)]
        assert acc is not None
        mean_grads = [a / batch_size for a in acc]
        flat = adamw_step(state, flat, mean_grads)
        losses.append(total / batch_size)
    return params.with_params(flat), losses


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _named_arrays(params: SegModelParams) -> dict[str, np.ndarray]:
    named = {"embed_w": params.embed_w, "embed_b": params.embed_b,
             "queries": params.queries}
    for i, layer in enumerate(params.layers):
        named[f"layer{i}.self_w"] = layer.self_w
        named[f"layer{i}.ffn_w1"] = layer.ffn_w1
        named[f"layer{i}.ffn_b1"] = layer.ffn_b1
        named[f"layer{i}.ffn_w2"] = layer.ffn_w2
        named[f"layer{i}.ffn_b2"] = layer.ffn_b2
    named["class_w"] = params.class_w
    named["class_b"] = params.class_b
    named["mask_w"] = params.mask_w
    named["mask_b"] = params.mask_b
    return named


def save_params(params: SegModelParams, bin_path: str | Path, json_path: str | Path) -> None:
    meta = {"num_classes": params.num_classes, "num_layers": len(params.layers)}
    save_arrays(_named_arrays(params), bin_path, json_path, meta=meta)


def load_params(bin_path: str | Path, json_path: str | Path) -> SegModelParams:
    named, meta = load_arrays(bin_path, json_path)
    num_layers = int(meta["num_layers"])
    layers = [
        DecoderLayer(
            self_w=named[f"layer{i}.self_w"],
            ffn_w1=named[f"layer{i}.ffn_w1"],
            ffn_b1=named[f"layer{i}.ffn_b1"],
            ffn_w2=named[f"layer{i}.ffn_w2"],
            ffn_b2=named[f"layer{i}.ffn_b2"],
        )
        for i in range(num_layers)
    ]
    return SegModelParams(
        num_classes=int(meta["num_classes"]),
        embed_w=named["embed_w"],
        embed_b=named["embed_b"],
        queries=named["queries"],
        layers=layers,
        class_w=named["class_w"],
        class_b=named["class_b"],
        mask_w=named["mask_w"],
        mask_b=named["mask_b"],
    )
