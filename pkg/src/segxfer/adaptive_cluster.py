"""Iterative part-level grouping of a feature map into local soft regions.

A feature map is seeded with a regular r x r grid of region centers.  Each
round computes temperature-scaled cosine similarity between every pixel and
the 3 x 3 block of grid cells around it (-inf elsewhere), softmax-normalizes
per pixel, and recomputes centers as assignment-weighted feature means.
Nothing here is trained; clustering is a gradient-free preprocessing step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ShapeError
from .numkit import softmax_columns

NORM_GUARD = 1e-12
MASS_GUARD = 1e-12


@dataclass
class FeatureMap:
    """Per-pixel feature vectors on an H x W grid, flattened row-major."""

    height: int
    width: int
    features: np.ndarray  # (H*W, d)

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise InputError(f"degenerate image {self.height}x{self.width}")
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or self.features.shape[0] != self.height * self.width:
            raise ShapeError(
                f"features {self.features.shape} do not cover a "
                f"{self.height}x{self.width} grid"
            )
        if not np.all(np.isfinite(self.features)):
            raise InputError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FeatureMap":
        """Build from an (H, W, d) array."""
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 3:
            raise ShapeError(f"expected (H, W, d), got {grid.shape}")
        h, w, d = grid.shape
        return cls(h, w, grid.reshape(h * w, d))


@dataclass
class ClusterState:
    """Grid stride, centers, soft assignment, hard labels and locality mask."""

    height: int
    width: int
    stride: int
    tau: float
    centers: np.ndarray        # (N_p, d)
    assign: np.ndarray         # (N_p, H*W), column-stochastic
    hard_labels: np.ndarray    # (H*W,) region indices
    neighbor_mask: np.ndarray  # (N_p, H*W) bool, True where the center is nearby

    @property
    def num_regions(self) -> int:
        return self.centers.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride


def _cell_index(height: int, width: int, stride: int) -> np.ndarray:
    """Grid-cell id of every pixel, row-major over cells."""
    grid_w = width // stride
    rows = np.arange(height) // stride
    cols = np.arange(width) // stride
    return (rows[:, None] * grid_w + cols[None, :]).reshape(-1)


def _neighbor_mask(height: int, width: int, stride: int) -> np.ndarray:
    """(N_p, H*W) mask of the 3 x 3 block of cells around each pixel's cell."""
    grid_h, grid_w = height // stride, width // stride
    n_regions = grid_h * grid_w
    cell = _cell_index(height, width, stride)
    pix_cy, pix_cx = cell // grid_w, cell % grid_w
    reg = np.arange(n_regions)
    reg_cy, reg_cx = reg // grid_w, reg % grid_w
    return (np.abs(reg_cy[:, None] - pix_cy[None, :]) <= 1) & (
        np.abs(reg_cx[:, None] - pix_cx[None, :]) <= 1
    )


def init_grid(fm: FeatureMap, stride: int, tau: float = 0.07) -> ClusterState:
    """Seed regions from a regular grid; centers are per-cell feature means."""
    if stride < 1 or fm.height % stride or fm.width % stride:
        raise ConfigError(
            f"stride {stride} must divide image {fm.height}x{fm.width}"
        )
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    cell = _cell_index(fm.height, fm.width, stride)
    n_regions = (fm.height // stride) * (fm.width // stride)
    assign = np.zeros((n_regions, fm.num_pixels))
    assign[cell, np.arange(fm.num_pixels)] = 1.0
    centers = update_centers(assign, fm)
    return ClusterState(
        height=fm.height,
        width=fm.width,
        stride=stride,
        tau=tau,
        centers=centers,
        assign=assign,
        hard_labels=cell.copy(),
        neighbor_mask=_neighbor_mask(fm.height, fm.width, stride),
    )


def compute_similarity(state: ClusterState, fm: FeatureMap) -> np.ndarray:
    """Temperature-scaled cosine similarity, -inf outside the locality mask.

    Norms are guarded by +1e-12, so zero vectors never raise.
    """
    if state.tau <= 0:
        raise ConfigError(f"temperature must be positive, got {state.tau}")
    if fm.num_pixels != state.assign.shape[1]:
        raise ShapeError("feature map does not match cluster state geometry")
    q = state.centers
    k = fm.features
    q_norm = np.linalg.norm(q, axis=1) + NORM_GUARD
    k_norm = np.linalg.norm(k, axis=1) + NORM_GUARD
    sims = (q @ k.T) / (q_norm[:, None] * k_norm[None, :]) / state.tau
    return np.where(state.neighbor_mask, sims, -np.inf)


def soft_assign(similarity: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over nearby centers; zeros exactly at non-neighbors."""
    return softmax_columns(similarity)


def update_centers(assign: np.ndarray, fm: FeatureMap) -> np.ndarray:
    """Assignment-weighted mean of pixel features per region.

    The raw product assign @ features is normalized by each region's
    assignment mass (guarded at 1e-12) so centers stay on the feature scale
    regardless of region size.
    """
    assign = np.asarray(assign, dtype=float)
    if assign.shape[1] != fm.num_pixels:
        raise ShapeError(f"assignment {assign.shape} does not cover {fm.num_pixels} pixels")
    mass = assign.sum(axis=1)
    return (assign @ fm.features) / np.maximum(mass, MASS_GUARD)[:, None]


def cluster(fm: FeatureMap, stride: int, tau: float = 0.07, iters: int = 6) -> ClusterState:
    """Run the full grouping loop and attach argmax hard labels.

    Each round recomputes similarity from the current centers, softmax-assigns
    every pixel over its nearby centers, and re-estimates the centers.  Ties
    in the final argmax go to the lowest region index.
    """
    if iters < 1:
        raise ConfigError(f"need at least one iteration, got {iters}")
    state = init_grid(fm, stride, tau)
    assign = state.assign
    centers = state.centers
    for _ in range(iters):
        state.centers = centers
        similarity = compute_similarity(state, fm)
        assign = soft_assign(similarity)
        centers = update_centers(assign, fm)
    hard = np.argmax(assign, axis=0)
    return ClusterState(
        height=state.height,
        width=state.width,
        stride=stride,
        tau=tau,
        centers=centers,
        assign=assign,
        hard_labels=hard,
        neighbor_mask=state.neighbor_mask,
    )


def region_pixel_lists(state: ClusterState) -> list[np.ndarray]:
    """Pixel indices per region from the hard labels; empty regions stay empty."""
    if state.hard_labels.shape != (state.height * state.width,):
        raise ShapeError("hard labels do not cover the image")
    order = np.argsort(state.hard_labels, kind="stable")
    sorted_labels = state.hard_labels[order]
    boundaries = np.searchsorted(sorted_labels, np.arange(state.num_regions + 1))
    return [order[boundaries[i]:boundaries[i + 1]] for i in range(state.num_regions)]
