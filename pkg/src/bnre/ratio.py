"""Likelihood-to-evidence ratios and grid posteriors from a trained classifier.

A classifier trained to separate joint from product-of-marginal pairs
carries the log ratio log r(x|theta) in its raw logit; adding the log prior
gives the (unnormalized) log posterior. Posteriors are materialized on a
regular grid over the prior box of the inferred parameters, normalized
empirically so that sum(density) * cell_volume = 1. All manipulation happens
in log space until the final normalization, since trained logits routinely
reach +-30.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .nets import ClassifierNet
from .simulators import Benchmark, Tractable1D, tractable_posterior

__all__ = [
    "PosteriorGrid",
    "DegenerateGridError",
    "classifier_prob",
    "log_ratio",
    "log_posterior_at",
    "posterior_grid",
    "grid_axes",
    "tractable_posterior_grid",
    "total_variation",
]

NORMALIZATION_TOL = 1e-9


class DegenerateGridError(RuntimeError):
    """Every grid cell evaluated to zero posterior density."""


@dataclass
class PosteriorGrid:
    """Empirically normalized posterior over a regular grid of cell centers."""

    axes: tuple[np.ndarray, ...]
    densities: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.axes = tuple(np.asarray(a, dtype=np.float64) for a in self.axes)
        self.densities = np.asarray(self.densities, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.densities.shape != tuple(len(a) for a in self.axes):
            raise ValueError("densities shape must match the grid axes")

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def cell_widths(self) -> tuple[float, ...]:
        return tuple(float(a[1] - a[0]) if len(a) > 1 else 1.0 for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_widths))

    @property
    def cell_masses(self) -> np.ndarray:
        return self.densities * self.cell_volume

    def total_mass(self) -> float:
        return float(self.densities.sum() * self.cell_volume)

    def locate(self, theta: np.ndarray) -> tuple[int, ...]:
        """Index of the cell containing theta (clipped to the grid)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        idx = []
        for d, axis in enumerate(self.axes):
            width = self.cell_widths[d]
            i = int(math.floor((theta[d] - (axis[0] - 0.5 * width)) / width))
            idx.append(min(max(i, 0), len(axis) - 1))
        return tuple(idx)

    def density_at(self, theta: np.ndarray) -> float:
        return float(self.densities[self.locate(theta)])

    def mean(self) -> np.ndarray:
        """Posterior mean per dimension from the grid masses."""
        return np.array([float(m @ a) for m, a in zip(self._marginals(), self.axes)])

    def second_central_moment(self) -> np.ndarray:
        out = []
        for m, a in zip(self._marginals(), self.axes):
            mu = float(m @ a)
            out.append(float(m @ (a - mu) ** 2))
        return np.array(out)

    def _marginals(self) -> list[np.ndarray]:
        masses = self.cell_masses
        return [np.apply_over_axes(np.sum, masses,
                                   [k for k in range(self.ndim) if k != d]).reshape(-1)
                for d in range(self.ndim)]

    def to_json(self, benchmark_name: str) -> str:
        return json.dumps({
            "benchmark": benchmark_name,
            "x": self.x.tolist(),
            "grid_spec": {
                "shape": list(self.densities.shape),
                "lower": [float(a[0] - 0.5 * w) for a, w in zip(self.axes, self.cell_widths)],
                "upper": [float(a[-1] + 0.5 * w) for a, w in zip(self.axes, self.cell_widths)],
            },
            "densities": self.densities.reshape(-1).tolist(),
        })


_PROB_LO = np.nextafter(0.0, 1.0)
_PROB_HI = np.nextafter(1.0, 0.0)


def classifier_prob(net: ClassifierNet, benchmark: Benchmark, theta_sub: np.ndarray,
                    x: np.ndarray) -> float:
    """d_hat(theta, x), evaluated stably from the logit.

    The returned probability is pinned to the open interval (0, 1) even at
    saturating logits; anything needing more precision should stay in logit
    space via :func:`log_ratio`.
    """
    p = expit(log_ratio(net, benchmark, theta_sub, x))
    return float(min(max(p, _PROB_LO), _PROB_HI))


def _features(benchmark: Benchmark, theta_sub: np.ndarray, x: np.ndarray) -> np.ndarray:
    theta_sub = np.atleast_1d(np.asarray(theta_sub, dtype=np.float64))
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if theta_sub.shape != (len(benchmark.inference_dims),):
        raise ValueError(
            f"expected the inferred sub-vector of length {len(benchmark.inference_dims)}, "
            f"got shape {theta_sub.shape}")
    if x.shape != (benchmark.x_dim,):
        raise ValueError(f"expected x of length {benchmark.x_dim}, got shape {x.shape}")
    return np.concatenate([benchmark.theta_features(theta_sub), benchmark.x_features(x)])


def log_ratio(net: ClassifierNet, benchmark: Benchmark, theta_sub: np.ndarray,
              x: np.ndarray) -> float:
    """log r_hat(x | theta): the raw network logit (logit of sigmoid = identity)."""
    feats = _features(benchmark, theta_sub, x)
    if net.input_dim != feats.size:
        raise ValueError(
            f"net consumes {net.input_dim} features but benchmark produces {feats.size}")
    return net.logit(feats)


def log_posterior_at(net: ClassifierNet, benchmark: Benchmark, theta_sub: np.ndarray,
                     x: np.ndarray) -> float:
    """log p(theta) + log r_hat(x | theta); -inf outside the prior box."""
    box = benchmark.inference_prior
    theta_sub = np.atleast_1d(np.asarray(theta_sub, dtype=np.float64))
    if not box.contains(theta_sub):
        return -math.inf
    return -math.log(box.volume) + log_ratio(net, benchmark, theta_sub, x)


@lru_cache(maxsize=32)
def _cached_axes(lower: tuple, upper: tuple, shape: tuple):
    axes = []
    for lo, hi, n in zip(lower, upper, shape):
        width = (hi - lo) / n
        axes.append(lo + width * (np.arange(n) + 0.5))
    return tuple(axes)


def grid_axes(benchmark: Benchmark, shape: tuple[int, ...] | None = None) -> tuple[np.ndarray, ...]:
    """Cell-center axes covering exactly the inference prior box."""
    box = benchmark.inference_prior
    shape = tuple(shape or benchmark.grid_shape)
    if len(shape) != box.dim:
        raise ValueError("grid shape must have one resolution per inferred dimension")
    return _cached_axes(tuple(box.lower), tuple(box.upper), shape)


def _grid_features(benchmark: Benchmark, axes: tuple[np.ndarray, ...],
                   x: np.ndarray) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    theta_flat = np.stack([m.reshape(-1) for m in mesh], axis=1)
    t_feats = benchmark.theta_features(theta_flat)
    x_feat = benchmark.x_features(np.asarray(x, dtype=np.float64))
    x_tiled = np.broadcast_to(x_feat, (t_feats.shape[0], x_feat.size))
    return np.concatenate([t_feats, x_tiled], axis=1)


def posterior_grid(net: ClassifierNet, benchmark: Benchmark, x: np.ndarray,
                   shape: tuple[int, ...] | None = None) -> PosteriorGrid:
    """Approximate posterior on the grid, exp'd with max-subtraction.

    Grid-based credible regions are only computed for inference dimension
    <= 2; higher-dimensional gridding is rejected.
    """
    if len(benchmark.inference_dims) > 2:
        raise ValueError("grid posteriors support at most 2 inferred dimensions")
    axes = grid_axes(benchmark, shape)
    feats = _grid_features(benchmark, axes, x)
    log_post = net.logits(feats)  # + log prior, constant over the box
    finite = np.isfinite(log_post)
    if not finite.any():
        raise DegenerateGridError("posterior density is zero on every grid cell")
    peak = log_post[finite].max()
    dens = np.where(finite, np.exp(log_post - peak), 0.0)
    cell_volume = float(np.prod([a[1] - a[0] if len(a) > 1 else 1.0 for a in axes]))
    total = dens.sum() * cell_volume
    if total <= 0.0 or not np.isfinite(total):
        raise DegenerateGridError("posterior density is zero on every grid cell")
    dens /= total
    shape_out = tuple(len(a) for a in axes)
    return PosteriorGrid(axes, dens.reshape(shape_out), np.asarray(x, dtype=np.float64))


def tractable_posterior_grid(benchmark: Tractable1D, x: np.ndarray,
                             shape: tuple[int, ...] | None = None) -> PosteriorGrid:
    """Exact posterior grid for the tractable benchmark (calibration oracle)."""
    if not isinstance(benchmark, Tractable1D):
        raise ValueError("exact posterior is only available for tractable1d")
    axes = grid_axes(benchmark, shape)
    dens = tractable_posterior(x, axes[0], sigma_x=benchmark.sigma_x)
    return PosteriorGrid(axes, dens, np.asarray(x, dtype=np.float64))


def total_variation(a: PosteriorGrid, b: PosteriorGrid) -> float:
    """TV distance between two posteriors on the same grid."""
    if a.densities.shape != b.densities.shape:
        raise ValueError("grids must share a shape")
    return float(0.5 * np.abs(a.cell_masses - b.cell_masses).sum())
