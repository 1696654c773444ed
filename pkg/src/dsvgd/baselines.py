"""Sampling and point-estimate baselines: SGLD, distributed SGLD and FedAvg.

SGLD and DSGLD use the annealed rate ``a0 (0.5 + t)^-0.55``. FedAvg
schedules one agent per round, like the particle protocols, so "averaging"
reduces to the server adopting the scheduled agent's iterate.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .federation import posterior_score_field, round_robin
from .kernels import as_particles
from .svgd import TransportConfig

ANNEAL_OFFSET = 0.5
ANNEAL_POWER = 0.55


class SamplerError(RuntimeError):
    """Non-finite score or iterate inside a baseline loop."""


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def annealed_rate(a0: float, t) -> float:
    """``a0 * (0.5 + t) ** -0.55`` for global step counter ``t >= 0``."""
    if not a0 > 0:
        raise ValueError(f"a0 must be positive, got {a0}")
    if t < 0:
        raise ValueError(f"step counter must be >= 0, got {t}")
    return a0 * (ANNEAL_OFFSET + t) ** (-ANNEAL_POWER)


def sgld_step(chains: np.ndarray, score: np.ndarray, rate: float, rng: np.random.Generator, noise: bool = True):
    """One Langevin step ``theta + (rate / 2) score + N(0, rate I)`` for every chain."""
    if not rate > 0:
        raise ValueError("rate must be positive")
    score = np.asarray(score, dtype=np.float64)
    bad = ~np.all(np.isfinite(score), axis=-1)
    if np.any(bad):
        raise SamplerError(f"non-finite score at chain {int(np.argmax(np.atleast_1d(bad)))}")
    out = chains + 0.5 * rate * score
    if noise:
        out = out + math.sqrt(rate) * rng.standard_normal(chains.shape)
    return out


def _langevin_loop(chains, score_field, num_steps, a0, rng, t0, noise, project):
    for l in range(num_steps):
        rate = annealed_rate(a0, t0 + l)
        chains = sgld_step(chains, score_field(chains), rate, rng, noise)
        if project is not None:
            chains = project(chains)
        if not np.all(np.isfinite(chains)):
            raise SamplerError(f"step {t0 + l}: chains became non-finite")
    return chains


def sgld_run(
    init_chains,
    score_field: Callable[[np.ndarray], np.ndarray],
    num_steps: int,
    a0: float,
    seed=0,
    noise: bool = True,
    project=None,
    hooks=None,
    every: Optional[int] = None,
):
    """Centralized SGLD with ``N`` parallel chains; the rate index is the step ``l``.

    ``score_field`` may consume the same generator as the injected noise
    (minibatching); the generator is passed in through the closure.
    Returns ``(chains, log)`` where ``hooks(chains, chunk)`` fills the log
    every ``every`` steps.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    rng = _rng(seed)
    chains = as_particles(init_chains).copy()
    every = every or num_steps
    log, done, chunk = [], 0, 0
    while done < num_steps:
        t_start = time.perf_counter()
        n = min(every, num_steps - done)
        chains = _langevin_loop(chains, score_field, n, a0, rng, done, noise, project)
        done += n
        chunk += 1
        metrics = hooks(chains, chunk) if hooks is not None else {}
        log.append({"round": chunk, "agent": -1, "metrics": metrics, "wall_ms": 1000.0 * (time.perf_counter() - t_start)})
    return chains, log


def partition_chains(num_chains: int, num_agents: int) -> list[np.ndarray]:
    """Contiguous blocks of ``ceil(N / K)`` chain ids per agent."""
    if num_agents < 1:
        raise ValueError("need at least one agent")
    per = -(-num_chains // num_agents)
    blocks = [np.arange(k * per, min((k + 1) * per, num_chains)) for k in range(num_agents)]
    if any(b.size == 0 for b in blocks):
        raise ValueError(f"cannot give every one of {num_agents} agents a chain out of {num_chains}")
    return blocks


def dsgld_local_score_field(prior, loss, num_agents: int, alpha: float = 1.0, rng=None):
    """``K * (grad log p_0^(1/K) - grad L_k / alpha)``.

    Each agent sees the prior once in total across the federation and
    scales its local loss up by ``K``, so one agent's chains follow an
    unbiased estimate of the global posterior score under equal splits.
    """

    def field_(points):
        return prior.score(points) - num_agents * loss.loss_grad(points, rng) / alpha

    return field_


def dsgld_run(
    prior,
    losses: Sequence,
    init_chains,
    rounds: int,
    trajectory_length: int,
    a0: float,
    alpha: float = 1.0,
    seed=0,
    noise: bool = True,
    hooks=None,
    schedule=round_robin,
):
    """Distributed SGLD: the scheduled agent advances its own chains.

    Round ``i`` (0-based ``i = round - 1``) uses rate index
    ``i * trajectory_length + l``; with one agent this is plain SGLD over
    ``rounds * trajectory_length`` steps. Returns ``(chains, log)``.
    """
    if rounds < 1 or trajectory_length < 1:
        raise ValueError("rounds and trajectory_length must be >= 1")
    rng = _rng(seed)
    chains = as_particles(init_chains).copy()
    num_agents = len(losses)
    blocks = partition_chains(chains.shape[0], num_agents)
    fields = [dsgld_local_score_field(prior, loss, num_agents, alpha, rng) for loss in losses]
    project = getattr(prior, "project", None)
    log = []
    for i in range(1, rounds + 1):
        t_start = time.perf_counter()
        k = schedule(i, num_agents)
        idx = blocks[k]
        try:
            chains[idx] = _langevin_loop(
                chains[idx], fields[k], trajectory_length, a0, rng, (i - 1) * trajectory_length, noise, project
            )
        except SamplerError as exc:
            raise SamplerError(f"round {i}, agent {k}: {exc}") from exc
        metrics = hooks(chains, i) if hooks is not None else {}
        log.append({"round": i, "agent": k, "metrics": metrics, "wall_ms": 1000.0 * (time.perf_counter() - t_start)})
    return chains, log


@dataclass
class PointEstimate:
    """Server-held point estimate for FedAvg."""

    theta: np.ndarray
    round_index: int = 0
    log: list = field(default_factory=list)


def map_gradient_field(prior, losses: Sequence, alpha: float = 1.0, rng=None):
    """Gradient of the MAP objective ``log p_0 - sum_k L_k / alpha``."""
    return posterior_score_field(prior, losses, alpha, rng)


def sgd_run(theta, grad_field, cfg: TransportConfig, opt=None, project=None) -> np.ndarray:
    """``cfg.num_steps`` ascent steps on the objective whose gradient is ``grad_field``."""
    theta = np.asarray(theta, dtype=np.float64).reshape(1, -1).copy()
    opt = opt if opt is not None else cfg.new_optimizer()
    for step in range(cfg.num_steps):
        g = np.asarray(grad_field(theta), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise SamplerError(f"step {step}: non-finite gradient")
        theta = theta + opt.step(g)
        if project is not None:
            theta = project(theta)
        if not np.all(np.isfinite(theta)):
            raise SamplerError(f"step {step}: iterate became non-finite")
    return theta[0]


def fedavg_run(
    prior,
    losses: Sequence,
    init_theta,
    rounds: int,
    local_cfg: TransportConfig,
    alpha: float = 1.0,
    seed=0,
    hooks=None,
    schedule=round_robin,
) -> PointEstimate:
    """Single-agent-per-round FedAvg on ``log p_0 - L_k / alpha``.

    Each scheduled agent starts a fresh optimizer, runs ``L`` steps from the
    current global point and the server adopts the result.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = _rng(seed)
    state = PointEstimate(np.asarray(init_theta, dtype=np.float64).ravel().copy())
    project = getattr(prior, "project", None)
    for i in range(1, rounds + 1):
        t_start = time.perf_counter()
        k = schedule(i, len(losses))
        field_ = map_gradient_field(prior, [losses[k]], alpha, rng)
        try:
            state.theta = sgd_run(state.theta, field_, local_cfg, project=project)
        except SamplerError as exc:
            raise SamplerError(f"round {i}, agent {k}: {exc}") from exc
        state.round_index = i
        metrics = hooks(state.theta[None, :], i) if hooks is not None else {}
        state.log.append({"round": i, "agent": k, "metrics": metrics, "wall_ms": 1000.0 * (time.perf_counter() - t_start)})
    return state
