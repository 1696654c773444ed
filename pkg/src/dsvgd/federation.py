"""Distributed SVGD: server state, agents and the round loop.

One agent is scheduled per global round (round robin). The scheduled agent
downloads the global particles, runs ``L`` SVGD steps against its tilted
distribution

    grad log p~_k = grad log q^(i-1) - grad log t_k^(i-1) - (1/alpha) grad L_k

and uploads the result. ``q^(i-1)`` is the KDE of the downloaded particles
(the exact prior when ``i = 1``). The approximate likelihood ``t_k`` comes
from one of two places:

* ``udsvgd``: a buffer of every (downloaded, uploaded) pair this agent ever
  produced, so ``grad log t_k`` is a telescoping sum of KDE score
  differences;
* ``dsvgd``: ``N`` local particles, refreshed after each scheduled round
  by ``L'`` distillation steps; they sample ``p_0 t_k`` so that
  ``grad log t_k = grad log KDE(local) - grad log p_0``.

``pvi1`` is ``udsvgd`` restricted to one particle and a fixed step size,
which reproduces PVI with a fixed-covariance Gaussian posterior.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .kernels import DEFAULT_KDE_BANDWIDTH, as_particles, kde_score
from .svgd import TransportConfig, TransportError, svgd_run

logger = logging.getLogger(__name__)

PROTOCOLS = ("dsvgd", "udsvgd", "pvi1")


class ProtocolError(RuntimeError):
    """Inconsistent state exchanged between server and agents."""


def round_robin(round_index: int, num_agents: int) -> int:
    """Agent (0-based) scheduled at 1-based ``round_index``."""
    return (round_index - 1) % num_agents


def _density_score(round_index: int, particles: np.ndarray, prior, bandwidth: float):
    """Score of ``q^(j)``: the prior for ``j = 0``, otherwise a KDE."""
    if round_index == 0:
        return prior.score
    return lambda pts: kde_score(pts, particles, bandwidth)


@dataclass
class Snapshot:
    """Global particles before and after round ``round_index`` (U-DSVGD buffer entry)."""

    round_index: int
    before: np.ndarray
    after: np.ndarray


@dataclass
class UdsvgdAgent:
    agent_id: int
    loss: object
    buffer: list = field(default_factory=list)
    # each term is ((round, particles) added, (round, particles) subtracted)
    terms: list = field(default_factory=list)
    last_round: int = 0

    def record(self, snap: Snapshot) -> None:
        self.buffer.append(snap)
        prev = self.terms[-1] if self.terms else None
        if prev is not None and prev[0][0] == snap.round_index - 1:
            # consecutive rounds: q^(j)/q^(j-1) * q^(j+1)/q^(j) telescopes
            self.terms[-1] = ((snap.round_index, snap.after), prev[1])
        else:
            self.terms.append(((snap.round_index, snap.after), (snap.round_index - 1, snap.before)))
        self.last_round = snap.round_index

    def t_score(self, points: np.ndarray, prior, bandwidth: float) -> np.ndarray:
        out = np.zeros_like(points)
        for (jp, plus), (jm, minus) in self.terms:
            out = out + (
                _density_score(jp, plus, prior, bandwidth)(points)
                - _density_score(jm, minus, prior, bandwidth)(points)
            )
        return out

    def t_score_from_buffer(self, points: np.ndarray, prior, bandwidth: float) -> np.ndarray:
        """Recompute ``grad log t_k`` directly from the raw buffer."""
        out = np.zeros_like(points)
        for snap in self.buffer:
            out = out + (
                _density_score(snap.round_index, snap.after, prior, bandwidth)(points)
                - _density_score(snap.round_index - 1, snap.before, prior, bandwidth)(points)
            )
        return out

    def natural_parameter(self, bandwidth: float) -> np.ndarray:
        """PVI view for one particle: ``eta_k = sum_j (theta^(j) - theta^(j-1)) / lambda^2``."""
        eta = 0.0
        for snap in self.buffer:
            eta = eta + (snap.after[0] - snap.before[0]) / bandwidth**2
        return np.asarray(eta, dtype=np.float64)


@dataclass
class DsvgdAgent:
    agent_id: int
    loss: object
    local_particles: np.ndarray
    distilled: bool = False
    last_round: int = 0

    def t_score(self, points: np.ndarray, prior, bandwidth: float) -> np.ndarray:
        # local particles encode p_0 * t_k; t^(0) = 1 until the first distillation
        if not self.distilled:
            return np.zeros_like(points)
        return kde_score(points, self.local_particles, bandwidth) - prior.score(points)


@dataclass
class FederationContext:
    """Quantities shared by every agent: prior, temperature and KDE bandwidth."""

    prior: object
    alpha: float = 1.0
    bandwidth: float = DEFAULT_KDE_BANDWIDTH

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def project(self):
        return getattr(self.prior, "project", None)


def tilted_score_field(
    agent,
    snapshot: np.ndarray,
    round_index: int,
    ctx: FederationContext,
    rng: Optional[np.random.Generator] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Score field of agent ``k``'s tilted distribution at round ``round_index``."""
    snapshot = as_particles(snapshot)
    q_score = _density_score(round_index - 1, snapshot, ctx.prior, ctx.bandwidth)

    def field_(points: np.ndarray) -> np.ndarray:
        if points.shape[1] != snapshot.shape[1]:
            raise ProtocolError("snapshot dimension does not match query points")
        return (
            q_score(points)
            - agent.t_score(points, ctx.prior, ctx.bandwidth)
            - agent.loss.loss_grad(points, rng) / ctx.alpha
        )

    return field_


def local_update(agent, downloaded, round_index, ctx, cfg: TransportConfig, rng=None) -> np.ndarray:
    """``L`` SVGD steps from the downloaded particles toward the tilted distribution."""
    field_ = tilted_score_field(agent, downloaded, round_index, ctx, rng)
    try:
        return svgd_run(downloaded, field_, cfg, project=ctx.project)
    except TransportError as exc:
        raise TransportError(f"agent {agent.agent_id}, round {round_index}: {exc}") from exc


def distillation_score_field(agent: DsvgdAgent, old_snapshot, new_globals, round_index, ctx):
    """Score of ``p_0 t_k^(i)`` with ``t_k^(i) = q^(i) / q^(i-1) * t_k^(i-1)``.

    The local particles sample ``p_0 t_k`` rather than ``t_k`` itself: a
    ratio of two equal-bandwidth KDEs has log-linear tails and is generally
    not normalizable, while the prior factor keeps the target proper. Under
    a flat prior the two targets coincide. ``t_k^(i-1)`` is frozen at the
    local particles as they stand before distillation starts.
    """
    old_snapshot = as_particles(old_snapshot)
    new_globals = as_particles(new_globals)
    if old_snapshot.shape != new_globals.shape:
        raise ProtocolError(f"snapshot shapes differ: {old_snapshot.shape} vs {new_globals.shape}")
    frozen = agent.local_particles.copy()
    if agent.distilled:
        base = lambda pts: kde_score(pts, frozen, ctx.bandwidth)  # noqa: E731
    else:
        base = ctx.prior.score
    q_new = _density_score(round_index, new_globals, ctx.prior, ctx.bandwidth)
    q_old = _density_score(round_index - 1, old_snapshot, ctx.prior, ctx.bandwidth)

    def field_(points):
        return q_new(points) - q_old(points) + base(points)

    return field_


def distill(agent: DsvgdAgent, old_snapshot, new_globals, round_index, ctx, cfg: TransportConfig) -> DsvgdAgent:
    """Refresh the agent's local particles with ``L'`` SVGD steps (in place)."""
    field_ = distillation_score_field(agent, old_snapshot, new_globals, round_index, ctx)
    try:
        agent.local_particles = svgd_run(agent.local_particles, field_, cfg, project=ctx.project)
    except TransportError as exc:
        raise TransportError(f"agent {agent.agent_id}, round {round_index} (distill): {exc}") from exc
    agent.distilled = True
    return agent


@dataclass
class FederationState:
    global_particles: np.ndarray
    round_index: int = 0
    log: list = field(default_factory=list)


@dataclass
class FederationResult:
    state: FederationState
    agents: list

    @property
    def particles(self) -> np.ndarray:
        return self.state.global_particles


MetricHook = Callable[[np.ndarray, int], dict]


def make_agents(protocol: str, losses: Sequence, init_particles: np.ndarray) -> list:
    if protocol == "dsvgd":
        return [DsvgdAgent(k, loss, init_particles.copy()) for k, loss in enumerate(losses)]
    if protocol in ("udsvgd", "pvi1"):
        return [UdsvgdAgent(k, loss) for k, loss in enumerate(losses)]
    raise ValueError(f"unknown protocol {protocol!r}")


def run_federation(
    protocol: str,
    ctx: FederationContext,
    losses: Sequence,
    init_particles,
    rounds: int,
    local_cfg: TransportConfig,
    distill_cfg: Optional[TransportConfig] = None,
    seed=0,
    hooks: Optional[MetricHook] = None,
    schedule: Callable[[int, int], int] = round_robin,
) -> FederationResult:
    """Run ``rounds`` global iterations of a particle-exchange protocol.

    Args:
        protocol: ``"dsvgd"``, ``"udsvgd"`` or ``"pvi1"``.
        ctx: Prior, temperature and KDE bandwidth shared by all agents.
        losses: One local loss per agent.
        init_particles: Initial global particles, usually prior draws.
        rounds: Number of global iterations ``I``.
        local_cfg: Transport settings for the ``L`` local steps.
        distill_cfg: Transport settings for the ``L'`` distillation steps
            (DSVGD only; defaults to ``local_cfg``).
        seed: Seed or ``Generator`` for minibatch sampling.
        hooks: Called as ``hooks(global_particles, round)`` after every
            round; the returned metrics land in the round log.
        schedule: Maps ``(round, K)`` to the scheduled agent.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not losses:
        raise ValueError("need at least one agent")
    particles = as_particles(init_particles)
    if protocol == "pvi1":
        if particles.shape[0] != 1:
            raise ValueError(f"pvi1 requires exactly one particle, got N={particles.shape[0]}")
        if local_cfg.optimizer != "plain":
            raise ValueError("pvi1 requires a plain fixed step size")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    distill_cfg = distill_cfg or local_cfg
    agents = make_agents(protocol, losses, particles)
    state = FederationState(particles.copy())
    num_agents = len(agents)

    for i in range(1, rounds + 1):
        t0 = time.perf_counter()
        k = schedule(i, num_agents)
        agent = agents[k]
        downloaded = state.global_particles.copy()
        try:
            uploaded = local_update(agent, downloaded, i, ctx, local_cfg, rng)
        except Exception as exc:
            raise RuntimeError(f"round {i}: {exc}") from exc
        if uploaded.shape != downloaded.shape:
            raise ProtocolError("agent changed the particle count or dimension")
        state.global_particles = uploaded
        state.round_index = i
        if protocol == "dsvgd":
            try:
                distill(agent, downloaded, uploaded, i, ctx, distill_cfg)
            except Exception as exc:
                raise RuntimeError(f"round {i}: {exc}") from exc
            agent.last_round = i
        else:
            agent.record(Snapshot(i, downloaded, uploaded.copy()))
        entry = {"round": i, "agent": k, "metrics": {}}
        if protocol == "pvi1":
            entry["metrics"]["eta"] = float(uploaded[0, 0] / ctx.bandwidth**2)
        if hooks is not None:
            entry["metrics"].update(hooks(uploaded, i))
        entry["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
        state.log.append(entry)
        logger.debug("round %d agent %d metrics %s", i, k, entry["metrics"])
    return FederationResult(state, agents)


def posterior_score_field(prior, losses: Sequence, alpha: float = 1.0, rng=None):
    """Score of the global generalized posterior ``p_0 exp(-sum_k L_k / alpha)``."""

    def field_(points):
        out = prior.score(points)
        for loss in losses:
            out = out - loss.loss_grad(points, rng) / alpha
        return out

    return field_


def run_centralized_svgd(prior, losses, init_particles, cfg: TransportConfig, alpha=1.0, seed=0, hooks=None, every=None):
    """Centralized SVGD on the global posterior, split into chunks of ``every`` steps.

    Optimizer state persists across chunks; ``hooks(particles, chunk)`` is
    called after each one so centralized curves line up with federated
    rounds (``every = L``).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    field_ = posterior_score_field(prior, losses, alpha, rng)
    opt = cfg.new_optimizer()
    project = getattr(prior, "project", None)
    every = every or cfg.num_steps
    particles = as_particles(init_particles)
    log = []
    done, chunk = 0, 0
    while done < cfg.num_steps:
        t0 = time.perf_counter()
        n = min(every, cfg.num_steps - done)
        sub = TransportConfig(n, cfg.step_size, cfg.optimizer, cfg.momentum, cfg.fudge, cfg.bandwidth)
        particles = svgd_run(particles, field_, sub, opt=opt, project=project)
        done += n
        chunk += 1
        metrics = hooks(particles, chunk) if hooks is not None else {}
        log.append({"round": chunk, "agent": -1, "metrics": metrics, "wall_ms": 1000.0 * (time.perf_counter() - t0)})
    return particles, log
