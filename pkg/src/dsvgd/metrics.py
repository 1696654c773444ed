"""Evaluation: grid KL, predictive distributions, point metrics and calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import expit

from .kernels import DEFAULT_KDE_BANDWIDTH, as_particles, kde_log_density

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over one or two dimensions: ``((lo, hi, num_points), ...)``."""

    axes: tuple

    def __post_init__(self):
        if not 1 <= len(self.axes) <= 2:
            raise ValueError("grid KL supports d = 1 or d = 2 only")
        for lo, hi, n in self.axes:
            if not lo < hi or int(n) < 2:
                raise ValueError(f"bad grid axis {(lo, hi, n)}")

    @classmethod
    def uniform(cls, lo: float, hi: float, num_points: int, dim: int = 1) -> "GridSpec":
        return cls(tuple((lo, hi, num_points) for _ in range(dim)))

    @property
    def dim(self) -> int:
        return len(self.axes)

    def coords(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, int(n)) for lo, hi, n in self.axes]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.coords(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def integrate(self, values: np.ndarray) -> float:
        """Trapezoidal integral of grid values (flattened in ``points`` order)."""
        coords = self.coords()
        vals = values.reshape([c.size for c in coords])
        for c in reversed(coords):
            vals = trapezoid(vals, c, axis=-1)
        return float(vals)


def grid_kl_from_log(log_q: np.ndarray, log_p: np.ndarray, grid: GridSpec) -> float:
    """KL(q || p) for two unnormalized log-densities tabulated on ``grid``."""
    with np.errstate(invalid="ignore"):
        q = np.exp(log_q - np.max(log_q))
        p_max = np.max(log_p)
        if not np.isfinite(p_max):
            raise ValueError("target has no mass on the grid")
        p = np.exp(log_p - p_max)
    zq, zp = grid.integrate(q), grid.integrate(p)
    if zp <= 0:
        raise ValueError("target has no mass on the grid")
    qn, pn = q / zq, p / zp
    mask = qn > 0
    integrand = np.zeros_like(qn)
    with np.errstate(divide="ignore"):
        integrand[mask] = qn[mask] * (np.log(qn[mask]) - np.log(pn[mask]))
    return grid.integrate(integrand)


def grid_kl(
    particles,
    target_log_density: Callable[[np.ndarray], np.ndarray],
    grid: GridSpec,
    bandwidth: float = DEFAULT_KDE_BANDWIDTH,
) -> float:
    """KL between the particles' Gaussian KDE and a target, both normalized on the grid."""
    particles = as_particles(particles)
    if particles.shape[1] != grid.dim:
        raise ValueError("particle dimension does not match the grid")
    pts = grid.points()
    return grid_kl_from_log(kde_log_density(pts, particles, bandwidth), target_log_density(pts), grid)


def grid_mean(log_density: Callable[[np.ndarray], np.ndarray], grid: GridSpec) -> np.ndarray:
    """Mean of a normalized-on-grid density (quadrature oracle)."""
    pts = grid.points()
    logp = log_density(pts)
    p = np.exp(logp - np.max(logp))
    z = grid.integrate(p)
    return np.array([grid.integrate(p * pts[:, j]) / z for j in range(pts.shape[1])])


def probit_kappa(sigma_sq):
    return 1.0 / np.sqrt(1.0 + np.pi * np.asarray(sigma_sq, dtype=np.float64) / 8.0)


def blr_predictive_probit(particles, x, bandwidth: float = DEFAULT_KDE_BANDWIDTH):
    """``p(y = +1 | x)`` averaged over BLR particles with the probit correction.

    Particles use the ``[w, log xi]`` layout; only ``w`` enters. The
    variance term is ``sigma^2 = x x^T / lambda^2`` and
    ``kappa = (1 + pi sigma^2 / 8)^{-1/2}``. ``x`` may be one feature vector
    or an ``(M, d_x)`` matrix.
    """
    particles = as_particles(particles)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != particles.shape[1] - 1:
        raise ValueError(f"features have d_x={x.shape[1]}, particles expect {particles.shape[1] - 1}")
    w = particles[:, :-1]
    mu = x @ w.T  # (M, N)
    kappa = probit_kappa(np.sum(x**2, axis=1) / bandwidth**2)
    out = expit(kappa[:, None] * mu).mean(axis=1)
    return out[0] if single else out


def bnn_predictive_mean(particles, model, x) -> np.ndarray:
    """Average of per-particle network outputs, shape ``(M, d_out)``."""
    particles = as_particles(particles)
    if particles.shape[1] != model.dim:
        raise ValueError(f"particle dimension {particles.shape[1]} does not match model {model.dim}")
    return model.outputs(particles, x).mean(axis=0)


def accuracy(pred_labels, labels) -> float:
    pred_labels, labels = np.asarray(pred_labels), np.asarray(labels)
    _check_aligned(pred_labels, labels)
    return float(np.mean(pred_labels == labels))


def log_likelihood(true_label_probs) -> float:
    """Mean log predictive probability of the true label, floored at 1e-12."""
    p = np.asarray(true_label_probs, dtype=np.float64)
    return float(np.mean(np.log(np.maximum(p, LOG_FLOOR))))


def rmse(pred, target, y_std: float = 1.0) -> float:
    """RMSE in original units; ``y_std`` undoes target standardization."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_aligned(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)) * y_std)


def _check_aligned(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"length mismatch: {a.shape[0]} predictions vs {b.shape[0]} labels")


def point_metrics(probs, labels, task: str, y_std: float = 1.0) -> dict:
    """Accuracy and log-likelihood for classification, RMSE for regression.

    ``probs`` is ``p(y=+1|x)`` for ``"binary"`` (labels in {-1, +1}), a
    ``(M, C)`` probability matrix for ``"multiclass"``, and predicted means
    for ``"regression"``.
    """
    labels = np.asarray(labels)
    if task == "regression":
        return {"rmse": rmse(np.ravel(probs), labels, y_std)}
    if task == "binary":
        p1 = np.asarray(probs, dtype=np.float64).ravel()
        _check_aligned(p1, labels)
        pred = np.where(p1 >= 0.5, 1, -1)
        p_true = np.where(labels > 0, p1, 1.0 - p1)
    elif task == "multiclass":
        pm = np.asarray(probs, dtype=np.float64)
        _check_aligned(pm, labels)
        pred = np.argmax(pm, axis=1)
        p_true = pm[np.arange(labels.size), labels.astype(np.int64)]
    else:
        raise ValueError(f"unknown task {task!r}")
    return {"accuracy": accuracy(pred, labels), "loglik": log_likelihood(p_true)}


def confidence_and_correct(probs, labels, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Confidence of the predicted class and whether it is correct."""
    labels = np.asarray(labels)
    if task == "binary":
        p1 = np.asarray(probs, dtype=np.float64).ravel()
        pred = np.where(p1 >= 0.5, 1, -1)
        conf = np.where(pred > 0, p1, 1.0 - p1)
    else:
        pm = np.asarray(probs, dtype=np.float64)
        pred = np.argmax(pm, axis=1)
        conf = pm.max(axis=1)
    return conf, pred == labels


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin counts, accuracies and mean confidences (NaN for empty bins)."""

    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    def rows(self):
        for j in range(self.counts.size):
            yield j, self.edges[j], self.edges[j + 1], int(self.counts[j]), self.accuracy[j], self.confidence[j]


def reliability_bins(confidences, correct, num_bins: int = 10) -> ReliabilityBins:
    """Bin ``j`` (1-based) holds confidences in ``((j-1)/B, j/B]``.

    A confidence of exactly 0 belongs to no interval and is not counted.
    """
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags must align")
    if num_bins < 1:
        raise ValueError("need at least one bin")
    if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    keep = conf > 0
    conf, corr = conf[keep], corr[keep]
    # edges[j] < c <= edges[j + 1]  ->  bin j (0-based)
    idx = np.searchsorted(edges, conf, side="left") - 1
    counts = np.bincount(idx, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
    return ReliabilityBins(edges, counts, acc, mean_conf)


def max_calibration_error(bins: ReliabilityBins) -> float:
    nonempty = bins.counts > 0
    if not nonempty.any():
        return 0.0
    return float(np.max(np.abs(bins.accuracy[nonempty] - bins.confidence[nonempty])))


def reliability_and_mce(confidences, correct, num_bins: int = 10) -> tuple[ReliabilityBins, float]:
    bins = reliability_bins(confidences, correct, num_bins)
    return bins, max_calibration_error(bins)
