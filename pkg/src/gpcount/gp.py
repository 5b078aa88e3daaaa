"""Gaussian-process pseudo-labels over encoder latents.

A bank of labeled latents F (rows) and flattened density targets T defines
a GP with cosine kernel k(a, b) = <a, b> / (|a| |b|) and observation noise
sigma_eps^2.  For an unlabeled latent z restricted to its n most similar
bank rows:

    mean     = k_*^T (K + sigma^2 I)^(-1) T
    variance = k(z, z) - k_*^T (K + sigma^2 I)^(-1) k_* + sigma^2

where K is the neighbors' kernel Gram matrix and k_* the vector of kernel
values between z and each neighbor.  Since the kernel is a cosine, k(z, z)
and K's diagonal are exactly 1 for any nonzero vector, so the variance lies
in [sigma^2, 1 + sigma^2].

The mean is served detached (a pseudo ground truth); the variance is also
available as a differentiable graph node whose gradient with respect to z
is computed analytically:

    dVar/dk_* = -2 (K + sigma^2 I)^(-1) k_*
    dk_i/dz   = (f_i / |f_i| - k_i * z / |z|) / |z|

rather than by differentiating through the factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Node
from .density import synthesize_density
from .errors import (ConfigError, ContractError, DegenerateLatentError,
                     ShapeError, StateError)
from .model import ModelParams, encode_values

DEFAULT_NEIGHBORS = 8
NEIGHBOR_METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class GPConfig:
    """Posterior hyperparameters."""
    n_neighbors: int = DEFAULT_NEIGHBORS
    noise_variance: float = 1.0
    neighbor_metric: str = "cosine"

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ConfigError(f"n_neighbors must be >= 1, got {self.n_neighbors}")
        if not self.noise_variance > 0.0:
            raise ConfigError(
                f"noise_variance must be > 0, got {self.noise_variance}")
        if self.neighbor_metric not in NEIGHBOR_METRICS:
            raise ConfigError(
                f"neighbor_metric must be one of {NEIGHBOR_METRICS}, "
                f"got {self.neighbor_metric!r}")


@dataclass
class LatentBank:
    """Latent features and flattened density targets of the labeled set."""
    features: Array          # [N, M]
    targets: Array           # [N, D]
    ids: list[str]
    unit_features: Array = field(init=False, repr=False)

    def __post_init__(self):
        self.features = ad.as_array(self.features)
        self.targets = ad.as_array(self.targets)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("LatentBank: features and targets must be 2-D")
        n = self.features.shape[0]
        if self.targets.shape[0] != n or len(self.ids) != n:
            raise ShapeError(
                f"LatentBank: row counts differ "
                f"(features {n}, targets {self.targets.shape[0]}, ids {len(self.ids)})")
        norms = np.linalg.norm(self.features, axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if bad.size:
            raise DegenerateLatentError(
                f"LatentBank: zero-norm latent for id {self.ids[int(bad[0])]!r}")
        self.unit_features = self.features / norms[:, None]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class NeighborSet:
    """The rows of a bank most similar to one query latent."""
    unit_features: Array     # [n, M] unit-norm rows
    targets: Array           # [n, D]
    ids: list[str]


@dataclass(frozen=True)
class GPPosterior:
    """Detached posterior mean (a pseudo target) and predictive variance."""
    mean: Array              # [D]
    variance: float
    neighbor_ids: list[str]


def _unit(z: Array, what: str = "latent") -> Array:
    z = ad.as_array(z)
    if z.ndim != 1:
        raise ShapeError(f"{what} must be a 1-D vector, got shape {z.shape}")
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise DegenerateLatentError(f"{what} has zero norm")
    return z / norm


def cosine_kernel(a: Array, b: Array) -> float:
    """k(a, b) = <a, b> / (|a| |b|); both vectors must have nonzero norm.

    Self-similarity is exactly 1 by mathematical identity; the general case
    is clamped into [-1, 1] to absorb last-bit rounding of the unit dot.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_kernel: shapes differ ({a.shape} vs {b.shape})")
    ua = _unit(a, "first argument")
    if np.array_equal(a, b):
        return 1.0
    ub = _unit(b, "second argument")
    return float(min(1.0, max(-1.0, ua @ ub)))


def nearest(z: Array, bank: LatentBank, n_neighbors: int,
            metric: str = "cosine") -> NeighborSet:
    """The ``n_neighbors`` bank rows most similar to ``z``.

    Cosine metric ranks by descending kernel value; the euclidean
    alternative ranks by ascending distance.  Ties break by ascending id so
    the selection is deterministic.
    """
    if len(bank) == 0:
        raise StateError("nearest: bank is empty")
    uz = _unit(z)
    if bank.features.shape[1] != uz.shape[0]:
        raise ShapeError(
            f"nearest: latent dim {uz.shape[0]} does not match bank "
            f"{bank.features.shape[1]}")
    n = min(int(n_neighbors), len(bank))
    if metric == "cosine":
        score = -(bank.unit_features @ uz)        # ascending sort order
    elif metric == "euclidean":
        diffs = bank.features - ad.as_array(z)
        score = np.linalg.norm(diffs, axis=1)
    else:
        raise ConfigError(f"nearest: unknown metric {metric!r}")
    order = sorted(range(len(bank)), key=lambda i: (score[i], bank.ids[i]))[:n]
    return NeighborSet(unit_features=bank.unit_features[order].copy(),
                       targets=bank.targets[order].copy(),
                       ids=tuple(bank.ids[i] for i in order))


def _variance_core(z: Array, unit_neighbors: Array, noise_variance: float):
    """Shared forward computation for the predictive variance.

    Returns (uz, k_star, chol, w, variance).  Both ``posterior`` and
    ``variance_node`` call this, so their variance values are bitwise equal
    for identical inputs.
    """
    uz = _unit(z)
    k_star = unit_neighbors @ uz
    gram = unit_neighbors @ unit_neighbors.T
    # The kernel's self-similarity is exactly 1 for any nonzero vector.
    np.fill_diagonal(gram, 1.0)
    chol = ad.spd_cholesky(gram + noise_variance * np.eye(len(k_star)))
    w = ad.cholesky_solve(chol, k_star)
    variance = 1.0 - float(k_star @ w) + noise_variance
    return uz, k_star, chol, w, variance


def _check_variance_bounds(variance: float, noise_variance: float):
    if not noise_variance <= variance <= 1.0 + noise_variance:
        raise ContractError(
            f"predictive variance {variance} outside "
            f"[{noise_variance}, {1.0 + noise_variance}]")


def posterior(z: Array, bank: LatentBank, cfg: GPConfig) -> GPPosterior:
    """GP posterior for one latent, restricted to its nearest bank rows.

    One Cholesky factorization serves both the mean and the variance.  The
    returned mean is detached: no gradient can flow into the bank.
    """
    neighbors = nearest(z, bank, cfg.n_neighbors, cfg.neighbor_metric)
    uz, k_star, chol, w, variance = _variance_core(
        z, neighbors.unit_features, cfg.noise_variance)
    _check_variance_bounds(variance, cfg.noise_variance)
    solved_targets = ad.cholesky_solve(chol, neighbors.targets)   # [n, D]
    mean = k_star @ solved_targets
    return GPPosterior(mean=mean, variance=variance, neighbor_ids=neighbors.ids)


def variance_node(z_node: Node, neighbors: NeighborSet,
                  noise_variance: float) -> Node:
    """Predictive variance as a differentiable scalar node in z.

    The neighbors are constants.  The forward value equals
    ``posterior(...).variance`` bitwise for the same inputs; the backward
    pass applies the analytic gradient documented in the module docstring.
    """
    if z_node.value.ndim != 1:
        raise ShapeError(
            f"variance_node: latent node must be 1-D, got {z_node.value.shape}")
    unit_neighbors = neighbors.unit_features
    z = z_node.value
    uz, k_star, _, w, variance = _variance_core(z, unit_neighbors, noise_variance)
    norm_z = float(np.linalg.norm(z))
    q = float(k_star @ w)

    def vjp(g):
        dz = (-2.0 / norm_z) * (unit_neighbors.T @ w - q * uz)
        return (float(g) * dz,)

    out = Node(variance, requires_grad=z_node.requires_grad,
               parents=(z_node,) if z_node.requires_grad else (),
               vjp=vjp if z_node.requires_grad else None)
    return out


def posterior_mean_node(z_node: Node, neighbors: NeighborSet,
                        noise_variance: float) -> Node:
    """Posterior mean as a differentiable node in z (study variant).

    By default training treats the mean as a detached pseudo target; this
    node exists to flip that choice and let gradients flow through the mean.
    """
    if z_node.value.ndim != 1:
        raise ShapeError(
            f"posterior_mean_node: latent node must be 1-D, got {z_node.value.shape}")
    unit_neighbors = neighbors.unit_features
    z = z_node.value
    uz, k_star, chol, _, _ = _variance_core(z, unit_neighbors, noise_variance)
    solved_targets = ad.cholesky_solve(chol, neighbors.targets)   # [n, D]
    mean = k_star @ solved_targets
    norm_z = float(np.linalg.norm(z))

    def vjp(g):
        v = solved_targets @ g                   # dMean/dk_* pulled back, [n]
        dz = (unit_neighbors.T @ v - float(v @ k_star) * uz) / norm_z
        return (dz,)

    return Node(mean, requires_grad=z_node.requires_grad,
                parents=(z_node,) if z_node.requires_grad else (),
                vjp=vjp if z_node.requires_grad else None)


def rebuild_bank(labeled_images, params: ModelParams, *,
                 gt_sigma: float = 2.0,
                 targets_by_id: dict[str, Array] | None = None) -> LatentBank:
    """Encode every labeled image with the current parameters.

    Targets are flattened ground-truth density maps; pass ``targets_by_id``
    to reuse precomputed maps (keyed by image id) instead of synthesizing.
    """
    if not labeled_images:
        raise StateError("rebuild_bank: labeled set is empty")
    pixels = np.stack([img.pixels for img in labeled_images])
    features = encode_values(pixels, params)
    rows = []
    for img in labeled_images:
        if targets_by_id is not None:
            target = targets_by_id[img.id]
        else:
            h, w = img.pixels.shape
            target = synthesize_density(img.points, h, w, gt_sigma).values
        rows.append(ad.as_array(target).reshape(-1))
    ids = [img.id for img in labeled_images]
    return LatentBank(features=features, targets=np.stack(rows), ids=ids)
