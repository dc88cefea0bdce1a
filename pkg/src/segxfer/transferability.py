"""Domain discriminator training, per-region transferability scores, and the
proxy distance between the two domains.

A small MLP is trained to tell source region features (label 1) from target
region features (label 0) with balanced half/half batches.  A region's
transferability is the discriminator's confusion on it, 2*min(E, 1-E): 1
where domains are indistinguishable, 0 where the discriminator is certain.
The proxy distance 2*(1 - 2*eps) comes from the held-out balanced error.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .adaptive_cluster import ClusterState
from .errors import InputError
from .numkit import (
    AdamWState,
    MlpParams,
    adamw_step,
    init_mlp,
    mlp_forward,
    mlp_forward_batch,
    mlp_loss_and_grads,
    mlp_params_from_list,
)

SOURCE_LABEL = 1
TARGET_LABEL = 0


@dataclass
class DomainSample:
    """A region feature vector tagged with its domain of origin."""

    feature: np.ndarray
    label: int  # 1 = source, 0 = target

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise InputError(f"domain label must be 0 or 1, got {self.label!r}")
        self.feature = np.asarray(self.feature, dtype=float)
        if not np.all(np.isfinite(self.feature)):
            raise InputError("non-finite region feature")


@dataclass
class TrainingLog:
    epoch_losses: list[float]
    epoch_accuracies: list[float]


@dataclass
class DiscriminatorResult:
    params: MlpParams
    log: TrainingLog
    held_out: list[DomainSample]
    provenance: str


@dataclass
class TransferabilityMap:
    """Per-region scores plus their broadcast onto the pixel grid."""

    region_scores: np.ndarray  # (N_p,) in [0, 1]
    pixel: np.ndarray          # (H, W), piecewise constant on the region partition
    provenance: str


@dataclass
class PadEstimate:
    """Held-out balanced error and the proxy distance 2*(1 - 2*eps)."""

    epsilon: float
    distance: float


def _split_train_held(features: np.ndarray, rng: np.random.Generator,
                      frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 80/20 shuffle-split of one domain's features."""
    n = features.shape[0]
    if n < 2:
        raise InputError("need at least 2 samples per domain to hold out a split")
    perm = rng.permutation(n)
    cut = min(n - 1, max(1, int(round(frac * n))))
    return features[perm[:cut]], features[perm[cut:]]


def train_discriminator(
    source_regions: np.ndarray,
    target_regions: np.ndarray,
    epochs: int = 5,
    lr: float = 1e-3,
    seed: int = 0,
    hidden: tuple[int, ...] = (64, 64),
    batch_size: int = 16,
) -> DiscriminatorResult:
    """Train the domain discriminator on region features from both domains.

    Each batch is drawn half from source and half from target so supervision
    stays balanced.  Each domain is shuffle-split 80/20; the held-out 20%
    yields the per-epoch balanced accuracy and feeds ``compute_pad``.
    """
    source = np.atleast_2d(np.asarray(source_regions, dtype=float))
    target = np.atleast_2d(np.asarray(target_regions, dtype=float))
    if source.size == 0 or target.size == 0:
        raise InputError("both domains must contribute at least one region")
    if source.shape[1] != target.shape[1]:
        raise InputError(
            f"feature dims differ between domains: {source.shape[1]} vs {target.shape[1]}"
        )

    rng = np.random.default_rng(seed)
    src_train, src_held = _split_train_held(source, rng)
    tgt_train, tgt_held = _split_train_held(target, rng)

    params = init_mlp(source.shape[1], hidden, rng)
    state = AdamWState.for_params(params.param_list(), lr=lr)

    half = max(1, batch_size // 2)
    steps_per_epoch = max(1, (src_train.shape[0] + tgt_train.shape[0]) // (2 * half))
    held_x = np.vstack([src_held, tgt_held])
    held_y = np.concatenate([
        np.full(src_held.shape[0], SOURCE_LABEL, dtype=float),
        np.full(tgt_held.shape[0], TARGET_LABEL, dtype=float),
    ])

    epoch_losses: list[float] = []
    epoch_accuracies: list[float] = []
    for _ in range(epochs):
        losses = []
        for _ in range(steps_per_epoch):
            si = rng.integers(0, src_train.shape[0], size=half)
            ti = rng.integers(0, tgt_train.shape[0], size=half)
            x = np.vstack([src_train[si], tgt_train[ti]])
            y = np.concatenate([np.ones(half), np.zeros(half)])
            loss, grads = mlp_loss_and_grads(params, x, y)
            new = adamw_step(state, params.param_list(), grads)
            params = mlp_params_from_list(new)
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
        epoch_accuracies.append(_balanced_accuracy(params, held_x, held_y))

    held_out = [DomainSample(f, SOURCE_LABEL) for f in src_held]
    held_out += [DomainSample(f, TARGET_LABEL) for f in tgt_held]
    provenance = f"disc(seed={seed},epochs={epochs},hidden={'x'.join(map(str, hidden))})"
    return DiscriminatorResult(
        params=params,
        log=TrainingLog(epoch_losses, epoch_accuracies),
        held_out=held_out,
        provenance=provenance,
    )


def _balanced_accuracy(params: MlpParams, x: np.ndarray, y: np.ndarray) -> float:
    probs = mlp_forward_batch(params, x)
    pred = (probs >= 0.5).astype(float)
    acc_src = float(np.mean(pred[y == SOURCE_LABEL] == SOURCE_LABEL))
    acc_tgt = float(np.mean(pred[y == TARGET_LABEL] == TARGET_LABEL))
    return 0.5 * (acc_src + acc_tgt)


def region_transferability(params: MlpParams, region_feature: np.ndarray) -> float:
    """Confusion score 2*min(E, 1-E): 1 when the discriminator cannot tell the
    domains apart on this region, 0 when it is certain."""
    e = mlp_forward(params, region_feature)
    return 2.0 * min(e, 1.0 - e)


def region_transferability_batch(params: MlpParams, region_features: np.ndarray) -> np.ndarray:
    probs = mlp_forward_batch(params, np.atleast_2d(region_features))
    return 2.0 * np.minimum(probs, 1.0 - probs)


def build_transferability_map(params: MlpParams, state: ClusterState,
                              provenance: str = "") -> TransferabilityMap:
    """Score every region center and broadcast scores to pixels by hard label.

    The pixel map is piecewise constant on the region partition; regions with
    no assigned pixels keep their score but contribute nothing to the map.
    """
    scores = region_transferability_batch(params, state.centers)
    pixel = scores[state.hard_labels].reshape(state.height, state.width)
    return TransferabilityMap(region_scores=scores, pixel=pixel, provenance=provenance)


def compute_pad(params: MlpParams, held_out: list[DomainSample]) -> PadEstimate:
    """Proxy distance from the held-out balanced error rate.

    eps is the mean of the two per-domain error rates; the distance
    2*(1 - 2*eps) is clamped to [-2, 2].
    """
    if not held_out:
        raise InputError("held-out set is empty")
    labels = np.array([s.label for s in held_out], dtype=float)
    if not (np.any(labels == SOURCE_LABEL) and np.any(labels == TARGET_LABEL)):
        raise InputError("held-out set must contain both domains")
    x = np.vstack([s.feature for s in held_out])
    epsilon = 1.0 - _balanced_accuracy(params, x, labels)
    distance = float(np.clip(2.0 * (1.0 - 2.0 * epsilon), -2.0, 2.0))
    return PadEstimate(epsilon=float(epsilon), distance=distance)


# ---------------------------------------------------------------------------
# Export helpers
# ---------------------------------------------------------------------------


def write_tmap_pgm(tmap: TransferabilityMap, path: str | Path) -> None:
    """8-bit PGM of the pixel map, gray = round(T * 255)."""
    netpbm.write_pgm(path, netpbm.gray_from_unit(tmap.pixel))


def write_region_csv(tmap: TransferabilityMap, path: str | Path) -> None:
    """CSV of (region_id, T_i) rows for every region."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["region_id", "T"])
        for i, score in enumerate(tmap.region_scores):
            writer.writerow([i, repr(float(score))])


def write_pad_csv(pad: PadEstimate, path: str | Path) -> None:
    """Single-row CSV with the held-out error and proxy distance."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epsilon", "d_A"])
        writer.writerow([repr(pad.epsilon), repr(pad.distance)])
