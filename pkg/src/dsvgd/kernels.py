"""RBF kernel, median-heuristic bandwidth and Gaussian KDE scores.

Two kernels appear throughout the package and should not be confused:

* the RKHS kernel ``k(x, y) = exp(-||x - y||^2 / h)`` that drives the
  SVGD transport, with ``h`` picked by the median heuristic;
* the isotropic Gaussian KDE kernel of standard deviation ``lambda`` used
  to turn a particle set into a density (global posterior iterates and
  approximate likelihood factors).
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

DEFAULT_KDE_BANDWIDTH = 0.55


def as_particles(particles) -> np.ndarray:
    """Return ``particles`` as a finite float64 array of shape ``(N, d)``."""
    arr = np.asarray(particles, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"particles must have shape (N, d) with N, d >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("particles contain non-finite values")
    return arr


def _check_bandwidth(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value}")
    return value


def rbf_kernel_and_grad(x, y, h: float) -> tuple[float, np.ndarray]:
    """Evaluate ``k(x, y)`` and its gradient with respect to ``x``."""
    h = _check_bandwidth(h, "h")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("kernel inputs must be finite")
    diff = x - y
    k = float(np.exp(-np.dot(diff, diff) / h))
    return k, -(2.0 / h) * diff * k


def rbf_kernel_matrix(particles: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel matrix and kernel gradients for a whole particle set.

    Returns ``(K, G)`` where ``K[j, n] = k(theta_j, theta_n)`` and
    ``G[j, n] = grad_{theta_j} k(theta_j, theta_n)`` with shape ``(N, N, d)``.
    """
    h = _check_bandwidth(h, "h")
    diff = particles[:, None, :] - particles[None, :, :]
    sq = np.einsum("jnd,jnd->jn", diff, diff)
    K = np.exp(-sq / h)
    G = -(2.0 / h) * diff * K[:, :, None]
    return K, G


def median_bandwidth(particles) -> float:
    """Median heuristic ``h = med^2 / log N`` (natural log).

    Falls back to ``h = 1`` when the heuristic is undefined: a single
    particle, collapsed particles, or a non-positive/non-finite result.
    """
    particles = as_particles(particles)
    n = particles.shape[0]
    if n <= 1:
        return 1.0
    med = float(np.median(pdist(particles)))
    h = med**2 / np.log(n)
    if not np.isfinite(h) or h <= 0:
        return 1.0
    return float(h)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff), diff


def kde_log_density(points, particles, bandwidth: float = DEFAULT_KDE_BANDWIDTH) -> np.ndarray:
    """Normalized log-density of the Gaussian KDE at ``points``.

    The mixture is ``(1/N) sum_n N(theta | theta_n, lambda^2 I)``.
    Accepts a single point of shape ``(d,)`` or a batch ``(M, d)``.
    """
    lam = _check_bandwidth(bandwidth, "bandwidth")
    particles = as_particles(particles)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    n, d = particles.shape
    sq, _ = _sq_dists(pts, particles)
    log_norm = -np.log(n) - 0.5 * d * np.log(2.0 * np.pi * lam**2)
    out = logsumexp(-sq / (2.0 * lam**2), axis=1) + log_norm
    return out[0] if single else out


def kde_score(points, particles, bandwidth: float = DEFAULT_KDE_BANDWIDTH) -> np.ndarray:
    """Gradient of the KDE log-density, ``sum_n w_n (theta_n - theta) / lambda^2``.

    The weights ``w_n`` are a softmax over ``-||theta - theta_n||^2 / (2 lambda^2)``
    so distant query points do not underflow.
    """
    lam = _check_bandwidth(bandwidth, "bandwidth")
    particles = as_particles(particles)
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != particles.shape[1]:
        raise ValueError(f"dimension mismatch: points d={pts.shape[1]}, particles d={particles.shape[1]}")
    sq, diff = _sq_dists(pts, particles)
    logits = -sq / (2.0 * lam**2)
    w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    out = -np.einsum("mn,mnd->md", w, diff) / lam**2
    return out[0] if single else out
