"""Targets, priors and per-agent losses.

Every density-like object exposes ``log_density(points)`` and
``score(points)`` on ``(M, d)`` batches (a single ``(d,)`` point is also
accepted). Priors add ``sample(n, rng)`` and, where the support is
bounded, ``project(points)``.

Local losses follow the convention ``p~_k(theta) = p_0(theta) exp(-L_k(theta) / alpha)``
and expose ``loss_grad(points, rng)`` returning an (optionally minibatch)
estimate of ``grad L_k`` on the full local dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax


def _batch(points) -> tuple[np.ndarray, bool]:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


def _unbatch(arr: np.ndarray, single: bool):
    return arr[0] if single else arr


class DomainError(ValueError):
    """Point outside the support of a density."""


class GaussianMixture:
    """Unnormalized mixture ``sum_c w_c N(theta | mu_c, Sigma_c)``.

    Weights are used as given (the toy targets add normalized Gaussian
    densities with unit weights). A single component is a plain Gaussian.
    """

    def __init__(self, weights: Sequence[float], means, covs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covs = np.asarray(covs, dtype=np.float64)
        c, d = self.means.shape
        if covs.ndim == 1:
            covs = covs.reshape(c, 1, 1)
        self.covs = covs.reshape(c, d, d)
        if self.weights.shape != (c,):
            raise ValueError("one weight per component required")
        if np.any(self.weights < 0) or not np.any(self.weights > 0):
            raise ValueError("weights must be non-negative and not all zero")
        self.precisions = np.linalg.inv(self.covs)
        chol = np.linalg.cholesky(self.covs)  # raises on non-SPD
        self._chol = chol
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            self._log_coef = np.log(self.weights) - 0.5 * (d * np.log(2 * np.pi) + logdet)
        self.dim = d

    @classmethod
    def gaussian(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls([1.0], mean[None, :], cov[None, :, :])

    def _component_logs(self, pts: np.ndarray):
        diff = pts[:, None, :] - self.means[None, :, :]  # (M, C, d)
        prec_diff = np.einsum("cij,mcj->mci", self.precisions, diff)
        maha = np.einsum("mci,mci->mc", diff, prec_diff)
        return self._log_coef[None, :] - 0.5 * maha, prec_diff

    def log_density(self, points):
        pts, single = _batch(points)
        logs, _ = self._component_logs(pts)
        return _unbatch(logsumexp(logs, axis=1), single)

    def score(self, points):
        pts, single = _batch(points)
        logs, prec_diff = self._component_logs(pts)
        resp = softmax(logs, axis=1)
        return _unbatch(-np.einsum("mc,mci->mi", resp, prec_diff), single)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.weights / self.weights.sum()
        comp = rng.choice(len(p), size=n, p=p)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chol[comp], z)


class UniformBox:
    """Uniform density on an axis-aligned box ``[lo, hi]^d``."""

    def __init__(self, lo, hi, dim: int = 1):
        self.lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (dim,)).copy()
        self.hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (dim,)).copy()
        if np.any(self.lo >= self.hi):
            raise ValueError("need lo < hi")
        self.dim = dim
        self._log_vol = float(np.log(self.hi - self.lo).sum())

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)

    def log_density(self, points):
        pts, single = _batch(points)
        out = np.where(self.contains(pts), -self._log_vol, -np.inf)
        return _unbatch(out, single)

    def score(self, points):
        pts, single = _batch(points)
        inside = self.contains(pts)
        if not inside.all():
            raise DomainError(f"point {pts[~inside][0]} outside [{self.lo}, {self.hi}]")
        return _unbatch(np.zeros_like(pts), single)

    def project(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lo, self.hi)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


class ProductTarget:
    """Product of density factors; log-densities and scores add."""

    def __init__(self, factors):
        self.factors = list(factors)
        if not self.factors:
            raise ValueError("need at least one factor")
        self.dim = self.factors[0].dim

    def log_density(self, points):
        return sum(f.log_density(points) for f in self.factors)

    def score(self, points):
        return sum(f.score(points) for f in self.factors)


def mixture_score(target, theta):
    return target.score(theta)


# ---------------------------------------------------------------------------
# Local losses
# ---------------------------------------------------------------------------


class FactorLoss:
    """Loss ``L(theta) = -log f(theta)`` for a density factor ``f``.

    Used by the toy problems, where each agent's local posterior is the
    prior times a known factor.
    """

    def __init__(self, factor):
        self.factor = factor
        self.dim = factor.dim

    def loss(self, points):
        return -self.factor.log_density(points)

    def loss_grad(self, points, rng: Optional[np.random.Generator] = None):
        return -self.factor.score(points)


@dataclass
class ToyProblem:
    """Prior plus one density factor per agent."""

    prior: object
    factors: list

    @property
    def dim(self) -> int:
        return self.prior.dim

    def losses(self) -> list:
        return [FactorLoss(f) for f in self.factors]

    def log_target(self, points):
        """Unnormalized log of the global posterior ``p_0 prod_k f_k``."""
        return self.prior.log_density(points) + sum(f.log_density(points) for f in self.factors)

    def log_local(self, k: int, points):
        return self.prior.log_density(points) + self.factors[k].log_density(points)


def toy1d(prior: str = "uniform") -> ToyProblem:
    """Two-agent 1-D toy: ``N(1, 4)`` at agent 1, ``N(-3, 1) + N(3, 2)`` at agent 2.

    Second arguments are variances. ``prior`` is ``"uniform"`` (on [-6, 6])
    or ``"gaussian"`` (standard normal).
    """
    if prior == "uniform":
        p0 = UniformBox(-6.0, 6.0, dim=1)
    elif prior == "gaussian":
        p0 = GaussianMixture.gaussian([0.0], 1.0)
    else:
        raise ValueError(f"unknown toy prior {prior!r}")
    f1 = GaussianMixture.gaussian([1.0], 4.0)
    f2 = GaussianMixture([1.0, 1.0], [[-3.0], [3.0]], [1.0, 2.0])
    return ToyProblem(p0, [f1, f2])


def toy2d() -> ToyProblem:
    """Two-agent 2-D Gaussian-mixture toy with a correlated Gaussian prior."""
    p0 = GaussianMixture.gaussian([0.0, 0.0], [[4.0, 2.0], [2.0, 4.0]])
    f1 = GaussianMixture(
        [1.0, 1.0],
        [[-1.71, -1.801], [1.0, 0.0]],
        [[[0.226, 0.1652], [0.1652, 0.6779]], [[2.0, 0.5], [0.5, 2.0]]],
    )
    f2 = GaussianMixture.gaussian([1.0, 0.0], [[3.0, 0.5], [0.5, 3.0]])
    return ToyProblem(p0, [f1, f2])


# ---------------------------------------------------------------------------
# Datasets and data-driven models
# ---------------------------------------------------------------------------

TASKS = ("binary", "multiclass", "regression")


@dataclass
class Dataset:
    """Features ``x`` of shape ``(M, d_x)`` and labels ``y`` of shape ``(M,)``.

    Binary labels are in {-1, +1}; multiclass labels are class indices;
    regression targets are reals (standardized when ``y_std`` is set, in
    which case ``y_mean``/``y_std`` undo the transform).
    """

    x: np.ndarray
    y: np.ndarray
    task: str
    num_classes: int = 2
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(self.y)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.x.shape[0] < 1 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("features and labels must be non-empty and aligned")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite feature values")
        if self.task == "binary":
            if not np.all(np.isin(self.y, (-1, 1))):
                raise ValueError("binary labels must be in {-1, +1}")
            self.y = self.y.astype(np.float64)
        elif self.task == "multiclass":
            self.y = self.y.astype(np.int64)
            if self.y.min() < 0 or self.y.max() >= self.num_classes:
                raise ValueError("class index out of range")
        else:
            self.y = self.y.astype(np.float64)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.task, self.num_classes, self.y_mean, self.y_std)


@dataclass(frozen=True)
class BlrModel:
    """Hierarchical Bayesian logistic regression.

    Parameters are ``theta = [w (d_x values), log xi]`` with priors
    ``w | xi ~ N(0, xi^{-1} I)`` and ``xi ~ Gamma(a, rate=b)``.
    """

    d_x: int
    a: float = 1.0
    b: float = 0.01

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("Gamma hyperparameters must be positive")

    @property
    def dim(self) -> int:
        return self.d_x + 1

    def _split(self, theta):
        theta, single = _batch(theta)
        if theta.shape[1] != self.dim:
            raise ValueError(f"expected parameter dimension {self.dim}, got {theta.shape[1]}")
        return theta[:, :-1], theta[:, -1], single

    def prior_log_density(self, theta):
        # density over (w, log xi), Jacobian of xi = exp(u) included
        w, u, single = self._split(theta)
        d = self.d_x
        val = (
            0.5 * d * u
            - 0.5 * np.exp(u) * np.sum(w**2, axis=1)
            - 0.5 * d * np.log(2 * np.pi)
            + self.a * np.log(self.b)
            - lgamma(self.a)
            + (self.a - 1.0) * u
            - self.b * np.exp(u)
            + u
        )
        return _unbatch(val, single)

    def prior_score(self, theta):
        w, u, single = self._split(theta)
        xi = np.exp(u)[:, None]
        gw = -xi * w
        gu = 0.5 * self.d_x + self.a - xi[:, 0] * (0.5 * np.sum(w**2, axis=1) + self.b)
        return _unbatch(np.column_stack([gw, gu]), single)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        xi = rng.gamma(self.a, 1.0 / self.b, size=n)
        w = rng.standard_normal((n, self.d_x)) / np.sqrt(xi)[:, None]
        return np.column_stack([w, np.log(xi)])

    def _margins(self, w, x, y):
        if np.any(~np.isin(y, (-1, 1))):
            raise ValueError("labels must be in {-1, +1}")
        return y[None, :] * (w @ x.T)  # (P, B)

    def loss(self, theta, x, y):
        """Cross-entropy ``sum_b log(1 + exp(-y_b w.x_b))`` per parameter vector."""
        w, _, single = self._split(theta)
        return _unbatch(-log_expit(self._margins(w, x, y)).sum(axis=1), single)

    def loss_grad(self, theta, x, y):
        w, _, single = self._split(theta)
        m = self._margins(w, x, y)
        gw = -(expit(-m) * y[None, :]) @ x
        return _unbatch(np.column_stack([gw, np.zeros(w.shape[0])]), single)

    def predict_proba(self, theta, x):
        """``p(y = +1 | x, w)`` for each parameter vector, shape ``(P, M)``."""
        w, _, _ = self._split(theta)
        return expit(w @ np.asarray(x, dtype=np.float64).T)


def blr_score(model: BlrModel, theta, x, y, scale: float = 1.0, alpha: float = 1.0):
    """``grad [log p_0 - (scale / alpha) sum_batch l]`` for BLR."""
    return model.prior_score(theta) - (scale / alpha) * model.loss_grad(theta, x, y)


@dataclass(frozen=True)
class MlpModel:
    """One-hidden-layer ReLU network with a Gaussian weight prior.

    Flattening order: ``W1 (d_x, H)`` row-major, ``b1 (H)``, ``W2 (H, d_out)``
    row-major, ``b2 (d_out)``. Regression uses a unit-precision Gaussian
    likelihood; classification uses softmax cross-entropy.
    """

    d_x: int
    hidden: int
    d_out: int = 1
    task: str = "regression"
    prior_precision: float = float(np.e)

    def __post_init__(self):
        if self.hidden < 1 or self.d_x < 1 or self.d_out < 1:
            raise ValueError("layer sizes must be positive")
        if self.task not in ("regression", "multiclass"):
            # binary data goes through a two-class softmax with labels {0, 1}
            raise ValueError(f"MLP task must be regression or multiclass, got {self.task!r}")
        if self.task == "regression" and self.d_out != 1:
            raise ValueError("regression networks have a single output")

    @property
    def dim(self) -> int:
        return self.d_x * self.hidden + self.hidden + self.hidden * self.d_out + self.d_out

    def unflatten(self, theta):
        theta, single = _batch(theta)
        if theta.shape[1] != self.dim:
            raise ValueError(f"expected parameter dimension {self.dim}, got {theta.shape[1]}")
        p, dx, h, o = theta.shape[0], self.d_x, self.hidden, self.d_out
        i = 0
        W1 = theta[:, i : i + dx * h].reshape(p, dx, h)
        i += dx * h
        b1 = theta[:, i : i + h]
        i += h
        W2 = theta[:, i : i + h * o].reshape(p, h, o)
        i += h * o
        b2 = theta[:, i : i + o]
        return W1, b1, W2, b2, single

    def _forward(self, theta, x):
        W1, b1, W2, b2, single = self.unflatten(theta)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        pre = np.einsum("bx,pxh->pbh", x, W1) + b1[:, None, :]
        hid = np.maximum(pre, 0.0)
        out = np.einsum("pbh,pho->pbo", hid, W2) + b2[:, None, :]
        return x, pre, hid, out, (W1, b1, W2, b2), single

    def outputs(self, theta, x):
        """Network outputs ``(P, B, d_out)``: raw values or class probabilities."""
        _, _, _, out, _, _ = self._forward(theta, x)
        if self.task == "regression":
            return out
        return softmax(out, axis=2)

    def _out_grad(self, out, y):
        if self.task == "regression":
            return out - np.asarray(y, dtype=np.float64)[None, :, None]
        onehot = np.eye(self.d_out)[np.asarray(y, dtype=np.int64)]
        return softmax(out, axis=2) - onehot[None, :, :]

    def loss(self, theta, x, y):
        _, _, _, out, _, single = self._forward(theta, x)
        if self.task == "regression":
            r = out[:, :, 0] - np.asarray(y, dtype=np.float64)[None, :]
            val = 0.5 * np.sum(r**2, axis=1)
        else:
            logp = out - logsumexp(out, axis=2, keepdims=True)
            idx = np.asarray(y, dtype=np.int64)
            val = -logp[:, np.arange(idx.size), idx].sum(axis=1)
        return _unbatch(val, single)

    def loss_grad(self, theta, x, y):
        x, pre, hid, out, (W1, b1, W2, b2), single = self._forward(theta, x)
        g_out = self._out_grad(out, y)
        gW2 = np.einsum("pbh,pbo->pho", hid, g_out)
        gb2 = g_out.sum(axis=1)
        g_hid = np.einsum("pbo,pho->pbh", g_out, W2) * (pre > 0)
        gW1 = np.einsum("bx,pbh->pxh", x, g_hid)
        gb1 = g_hid.sum(axis=1)
        p = gW1.shape[0]
        flat = np.concatenate(
            [gW1.reshape(p, -1), gb1, gW2.reshape(p, -1), gb2], axis=1
        )
        return _unbatch(flat, single)

    def prior_log_density(self, theta):
        theta, single = _batch(theta)
        lam = self.prior_precision
        val = -0.5 * lam * np.sum(theta**2, axis=1) + 0.5 * self.dim * np.log(lam / (2 * np.pi))
        return _unbatch(val, single)

    def prior_score(self, theta):
        theta, single = _batch(theta)
        return _unbatch(-self.prior_precision * theta, single)

    def sample_prior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.dim)) / np.sqrt(self.prior_precision)


def mlp_score(model: MlpModel, theta, x, y, scale: float = 1.0, alpha: float = 1.0):
    """``grad [log p_0 - (scale / alpha) sum_batch loss]`` for the MLP."""
    return model.prior_score(theta) - (scale / alpha) * model.loss_grad(theta, x, y)


class ModelPrior:
    """Adapter exposing a data model's prior with the density interface."""

    def __init__(self, model):
        self.model = model
        self.dim = model.dim

    def log_density(self, points):
        return self.model.prior_log_density(points)

    def score(self, points):
        return self.model.prior_score(points)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.model.sample_prior(n, rng)


class DataLoss:
    """Summed loss of a model over one agent's dataset.

    With ``batch_size`` set, ``loss_grad`` draws a minibatch without
    replacement and rescales by ``|D| / |batch|`` so the estimate is
    unbiased for the full-data gradient.
    """

    def __init__(self, model, data: Dataset, batch_size: Optional[int] = None):
        self.model = model
        self.data = data
        self.dim = model.dim
        m = len(data)
        self.batch_size = m if batch_size is None else max(1, min(int(batch_size), m))

    def loss(self, points):
        return self.model.loss(points, self.data.x, self.data.y)

    def loss_grad(self, points, rng: Optional[np.random.Generator] = None):
        m = len(self.data)
        if self.batch_size >= m or rng is None:
            return self.model.loss_grad(points, self.data.x, self.data.y)
        idx = rng.choice(m, size=self.batch_size, replace=False)
        scale = m / self.batch_size
        return scale * self.model.loss_grad(points, self.data.x[idx], self.data.y[idx])


def sample_prior(prior, n: int, seed) -> np.ndarray:
    """``n`` i.i.d. prior draws; ``seed`` is an int or a ``Generator``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if hasattr(prior, "sample"):
        return prior.sample(n, rng)
    return prior.sample_prior(n, rng)
