"""Stein variational gradient descent against an arbitrary score field.

A *score field* is any callable mapping an ``(M, d)`` array of points to
the ``(M, d)`` array of ``grad log p~`` at those points, where ``p~`` is a
possibly unnormalized target. Fields may hold internal state (e.g. a
minibatch random stream); they are called exactly once per transport step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .kernels import as_particles, median_bandwidth, rbf_kernel_matrix

ScoreField = Callable[[np.ndarray], np.ndarray]


class TransportError(RuntimeError):
    """Numeric failure inside a transport loop."""


@dataclass
class AdaGrad:
    """AdaGrad with an exponential moving average of squared gradients.

    The first call seeds the history with ``grad**2``; later calls use
    ``hist = m * hist + (1 - m) * grad**2``. The step returned is
    ``base_rate * grad / (fudge + sqrt(hist))``.
    """

    base_rate: float
    momentum: float = 0.9
    fudge: float = 1e-6
    historical_sq_grad: Optional[np.ndarray] = None
    step_count: int = 0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.fudge <= 0:
            raise ValueError("fudge must be positive")

    def step(self, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if self.historical_sq_grad is None:
            self.historical_sq_grad = grad**2
        else:
            if self.historical_sq_grad.shape != grad.shape:
                raise ValueError(
                    f"gradient shape {grad.shape} does not match optimizer state "
                    f"{self.historical_sq_grad.shape}"
                )
            self.historical_sq_grad = (
                self.momentum * self.historical_sq_grad + (1.0 - self.momentum) * grad**2
            )
        self.step_count += 1
        return self.base_rate * grad / (self.fudge + np.sqrt(self.historical_sq_grad))


def adagrad_step(grad: np.ndarray, opt: AdaGrad) -> np.ndarray:
    return opt.step(grad)


@dataclass
class PlainStep:
    """Fixed step size: ``step = rate * grad``."""

    rate: float
    step_count: int = 0

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        return self.rate * np.asarray(grad, dtype=np.float64)


@dataclass(frozen=True)
class TransportConfig:
    """Settings for one SVGD loop.

    Attributes:
        num_steps: Number of transport steps ``L`` (>= 1).
        step_size: AdaGrad base rate, or the fixed step for ``optimizer="plain"``.
        optimizer: ``"adagrad"`` or ``"plain"``.
        momentum: AdaGrad moving-average coefficient.
        fudge: AdaGrad smoothing term.
        bandwidth: Fixed RBF bandwidth ``h``; ``None`` recomputes the
            median heuristic at every step.
    """

    num_steps: int
    step_size: float
    optimizer: str = "adagrad"
    momentum: float = 0.9
    fudge: float = 1e-6
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.optimizer not in ("adagrad", "plain"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def new_optimizer(self):
        if self.optimizer == "plain":
            return PlainStep(self.step_size)
        return AdaGrad(self.step_size, self.momentum, self.fudge)


def svgd_direction(particles: np.ndarray, score_field: ScoreField, h: float) -> np.ndarray:
    """Per-particle SVGD direction before step-size scaling.

    ``phi_n = (1/N) sum_j [k(theta_j, theta_n) s_j + grad_{theta_j} k(theta_j, theta_n)]``
    """
    particles = np.asarray(particles, dtype=np.float64)
    scores = np.asarray(score_field(particles), dtype=np.float64)
    if scores.shape != particles.shape:
        raise ValueError(f"score field returned shape {scores.shape}, expected {particles.shape}")
    bad = ~np.all(np.isfinite(scores), axis=1)
    if bad.any():
        raise TransportError(f"non-finite score at particle {int(np.argmax(bad))}")
    K, G = rbf_kernel_matrix(particles, h)
    return (K.T @ scores + G.sum(axis=0)) / particles.shape[0]


def svgd_run(
    particles,
    score_field: ScoreField,
    cfg: TransportConfig,
    opt=None,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Run ``cfg.num_steps`` SVGD steps and return the new particle array.

    ``opt`` is mutated in place; a fresh one is built from ``cfg`` when
    omitted. ``project`` maps particles back into a constrained support
    after every step (used for hard-support priors).
    """
    theta = as_particles(particles).copy()
    if opt is None:
        opt = cfg.new_optimizer()
    for step in range(cfg.num_steps):
        h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(theta)
        try:
            phi = svgd_direction(theta, score_field, h)
        except TransportError as exc:
            raise TransportError(f"step {step}: {exc}") from exc
        theta = theta + opt.step(phi)
        if project is not None:
            theta = project(theta)
        if not np.all(np.isfinite(theta)):
            raise TransportError(f"step {step}: particles became non-finite")
    return theta
