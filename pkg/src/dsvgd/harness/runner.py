"""Build a problem from an ``ExperimentConfig``, run it and persist the results.

Artifacts in the output directory:

* ``results.csv``: ``round,agent,metric,value,elapsed_ms``; values use 17
  significant digits so reruns compare byte for byte (``elapsed_ms`` is
  the only wall-clock column);
* ``manifest.json``: config echo, seed, package version, status and error;
* ``reliability.csv``: final reliability bins for classification runs;
* ``snapshots/round_XXXX.txt``: global particles at each evaluation point
  when ``metrics.snapshots`` is on.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .. import __version__
from ..baselines import dsgld_run, fedavg_run, sgld_run
from ..federation import FederationContext, posterior_score_field, round_robin, run_centralized_svgd, run_federation
from ..kernels import kde_log_density
from ..metrics import (
    GridSpec,
    blr_predictive_probit,
    bnn_predictive_mean,
    confidence_and_correct,
    grid_kl,
    grid_mean,
    point_metrics,
    reliability_and_mce,
)
from ..models import BlrModel, DataLoss, MlpModel, ModelPrior, sample_prior, toy1d, toy2d
from ..svgd import TransportConfig
from .config import ConfigError, ExperimentConfig
from .data import SYNTHETIC, SplitDataset, as_two_class, build_split, load_dataset, partition_dataset
from .snapshots import export_snapshot, format_float

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ("round", "agent", "metric", "value", "elapsed_ms")
KNOWN_METRICS = ("kl", "mean", "accuracy", "loglik", "mce", "rmse")
CENTRAL_AGENT = "-"


@dataclass
class Problem:
    """Everything a protocol needs: prior, per-agent losses and an evaluator."""

    prior: object
    losses: list
    evaluate: object  # particles -> {metric: value}
    dim: int
    toy: object = None
    grid: Optional[GridSpec] = None
    split: Optional[SplitDataset] = None
    reliability: object = None  # particles -> ReliabilityBins or None


@dataclass
class RunResult:
    status: int
    out_dir: Path
    rows: list = field(default_factory=list)
    particles: Optional[np.ndarray] = None
    error: Optional[str] = None
    history: dict = field(default_factory=dict)


def toy_grid(cfg: ExperimentConfig) -> GridSpec:
    if cfg.model == "toy2d":
        return GridSpec.uniform(-7.0, 7.0, 141, dim=2)
    if cfg.toy_prior == "uniform":
        # the target vanishes outside the support, so the grid stops there
        return GridSpec.uniform(-6.0, 6.0, 1201)
    return GridSpec.uniform(-8.0, 8.0, 1601)


def _seeds(seed: int) -> dict:
    names = ("data", "partition", "init", "run")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def load_split(cfg: ExperimentConfig, rng) -> SplitDataset:
    if cfg.source.startswith("synthetic:"):
        gen = SYNTHETIC[cfg.source.split(":", 1)[1]]
        rows = cfg.num_rows if cfg.max_rows is None else min(cfg.num_rows, cfg.max_rows)
        x, y = gen(rows, rng)
        return build_split(x, y, cfg.task, cfg.normalization, cfg.test_fraction, rng)
    return load_dataset(
        cfg.source, cfg.label_column, cfg.task, cfg.normalization, cfg.test_fraction, rng, cfg.max_rows
    )


def _toy_problem(cfg: ExperimentConfig) -> Problem:
    toy = toy1d(cfg.toy_prior) if cfg.model == "toy1d" else toy2d()
    grid = toy_grid(cfg)
    names = cfg.metric_names()
    _check_metrics(names, ("kl", "mean"))
    # quadrature reference for the posterior mean, computed once
    target_mean = grid_mean(toy.log_target, grid)

    def evaluate(particles):
        out = {}
        if "kl" in names:
            out["kl"] = grid_kl(particles, toy.log_target, grid, cfg.kl_bandwidth)
        if "mean" in names:
            mean = particles.mean(axis=0)
            for j in range(mean.size):
                suffix = "" if mean.size == 1 else f"_{j}"
                out[f"mean{suffix}"] = float(mean[j])
                out[f"mean_error{suffix}"] = float(abs(mean[j] - target_mean[j]))
        return out

    return Problem(toy.prior, toy.losses(), evaluate, toy.dim, toy=toy, grid=grid)


def _check_metrics(names, allowed):
    for n in names:
        if n not in KNOWN_METRICS:
            raise ConfigError(f"metrics.names: unknown metric {n!r}")
        if n not in allowed:
            raise ConfigError(f"metrics.names: {n!r} does not apply to this model/task")


def _data_problem(cfg: ExperimentConfig, seeds) -> Problem:
    split = load_split(cfg, seeds["data"])
    train, test = split.train, split.test
    task = train.task
    if cfg.model == "blr":
        if task != "binary":
            raise ConfigError(f"data.task: blr needs binary labels, got {task!r}")
        model = BlrModel(train.d_x)
    else:
        if task == "binary":
            train, test = as_two_class(train), as_two_class(test)
        d_out = 1 if train.task == "regression" else train.num_classes
        model = MlpModel(train.d_x, cfg.hidden, d_out, train.task)
    if len(train) < cfg.agents:
        raise ConfigError(f"federation.agents: {cfg.agents} agents but only {len(train)} training rows")
    parts = partition_dataset(train, cfg.agents, seeds["partition"])
    losses = [DataLoss(model, p, cfg.batch_size) for p in parts]
    names = cfg.metric_names()
    applicable = ("rmse",) if train.task == "regression" else ("accuracy", "loglik", "mce")
    if cfg.metrics:
        _check_metrics(names, applicable)
    names = [n for n in names if n in applicable]
    point_protocol = cfg.protocol == "fedavg"

    def predict(particles):
        if cfg.model == "blr":
            if point_protocol:
                # point estimate: plain sigmoid, no particle-spread correction
                return expit(test.x @ particles[0, :-1])
            return blr_predictive_probit(particles, test.x, cfg.predictive_bandwidth)
        out = bnn_predictive_mean(particles, model, test.x)
        return out[:, 0] if train.task == "regression" else out

    eval_task = "binary" if cfg.model == "blr" else train.task

    def evaluate(particles):
        probs = predict(particles)
        base = point_metrics(probs, test.y, eval_task, test.y_std)
        out = {n: base[n] for n in names if n in base}
        if "mce" in names:
            conf, correct = confidence_and_correct(probs, test.y, eval_task)
            out["mce"] = reliability_and_mce(conf, correct, cfg.bins)[1]
        return out

    def reliability(particles):
        if train.task == "regression":
            return None
        conf, correct = confidence_and_correct(predict(particles), test.y, eval_task)
        return reliability_and_mce(conf, correct, cfg.bins)[0]

    return Problem(ModelPrior(model), losses, evaluate, model.dim, split=SplitDataset(train, test), reliability=reliability)


def build_problem(cfg: ExperimentConfig, seeds) -> Problem:
    if cfg.is_toy:
        return _toy_problem(cfg)
    return _data_problem(cfg, seeds)


class _Recorder:
    """Metric hook shared by all protocols; rows carry time since the previous eval."""

    def __init__(self, cfg, problem, agent_of, out_dir: Optional[Path]):
        self.cfg = cfg
        self.problem = problem
        self.agent_of = agent_of
        self.out_dir = out_dir
        self.rows = []
        self.last = time.perf_counter()
        self.history = {}
        self.keep_history = False

    def __call__(self, particles, round_index):
        if self.keep_history:
            self.history[round_index] = np.array(particles, copy=True)
        if round_index % self.cfg.eval_every and round_index != self.cfg.rounds:
            return {}
        metrics = self.problem.evaluate(particles)
        now = time.perf_counter()
        elapsed = 1000.0 * (now - self.last)
        self.last = now
        agent = self.agent_of(round_index)
        for name, value in metrics.items():
            self.rows.append((round_index, agent, name, float(value), elapsed))
        if self.cfg.snapshots and self.out_dir is not None:
            snap_dir = self.out_dir / "snapshots"
            snap_dir.mkdir(parents=True, exist_ok=True)
            export_snapshot(snap_dir / f"round_{round_index:04d}.txt", particles, round_index, self.cfg.protocol)
        logger.info("round %d: %s", round_index, metrics)
        return metrics


def _transport(cfg: ExperimentConfig, steps: int, rate: float) -> TransportConfig:
    return TransportConfig(steps, rate, cfg.optimizer, cfg.momentum, cfg.fudge)


def execute(cfg: ExperimentConfig, problem: Problem, seeds, recorder: _Recorder) -> np.ndarray:
    """Dispatch on the protocol; returns the final particles (or point estimate as one row)."""
    init = sample_prior(problem.prior, cfg.particles, seeds["init"])
    run_rng = seeds["run"]
    total = cfg.rounds * cfg.local_steps
    if cfg.protocol in ("dsvgd", "udsvgd", "pvi1"):
        ctx = FederationContext(problem.prior, cfg.alpha, cfg.kde_bandwidth)
        res = run_federation(
            cfg.protocol,
            ctx,
            problem.losses,
            init,
            cfg.rounds,
            _transport(cfg, cfg.local_steps, cfg.lr),
            _transport(cfg, cfg.distill_steps, cfg.distill_lr),
            seed=run_rng,
            hooks=recorder,
        )
        return res.particles
    if cfg.protocol == "svgd":
        rate = cfg.lr / cfg.particles if cfg.scale_by_particles else cfg.lr
        particles, _ = run_centralized_svgd(
            problem.prior, problem.losses, init, _transport(cfg, total, rate), cfg.alpha, run_rng, recorder, cfg.local_steps
        )
        return particles
    if cfg.protocol == "sgld":
        field_ = posterior_score_field(problem.prior, problem.losses, cfg.alpha, run_rng)
        chains, _ = sgld_run(
            init, field_, total, cfg.a0, run_rng, project=getattr(problem.prior, "project", None),
            hooks=recorder, every=cfg.local_steps,
        )
        return chains
    if cfg.protocol == "dsgld":
        chains, _ = dsgld_run(
            problem.prior, problem.losses, init, cfg.rounds, cfg.local_steps, cfg.a0, cfg.alpha, run_rng, hooks=recorder
        )
        return chains
    if cfg.protocol == "fedavg":
        state = fedavg_run(
            problem.prior, problem.losses, init[0], cfg.rounds, _transport(cfg, cfg.local_steps, cfg.lr),
            cfg.alpha, run_rng, hooks=recorder,
        )
        return state.theta[None, :]
    raise ConfigError(f"experiment.protocol: unknown protocol {cfg.protocol!r}")


def _agent_labeller(cfg: ExperimentConfig):
    if cfg.protocol in ("svgd", "sgld"):
        return lambda i: CENTRAL_AGENT
    return lambda i: str(round_robin(i, cfg.agents) + 1)


def write_results(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for round_index, agent, metric, value, elapsed in rows:
            writer.writerow([round_index, agent, metric, format_float(value), "%.3f" % elapsed])


def write_reliability(path: Path, bins) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("bin", "lo", "hi", "count", "accuracy", "confidence"))
        for j, lo, hi, count, acc, conf in bins.rows():
            writer.writerow([j + 1, format_float(lo), format_float(hi), count, format_float(acc), format_float(conf)])


def write_manifest(path: Path, cfg: ExperimentConfig, status: str, error: Optional[str], rounds_done: int) -> None:
    manifest = {
        "config": cfg.to_dotted(),
        "seed": cfg.seed,
        "version": __version__,
        "status": status,
        "error": error,
        "rounds_completed": rounds_done,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None, keep_history: bool = False) -> RunResult:
    """Run one experiment and persist its artifacts; never raises for run-time failures."""
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(cfg.seed)
    recorder = None
    try:
        problem = build_problem(cfg, seeds)
        recorder = _Recorder(cfg, problem, _agent_labeller(cfg), out)
        recorder.keep_history = keep_history
        particles = execute(cfg, problem, seeds, recorder)
    except Exception as exc:  # reported through the manifest and exit status
        rows = recorder.rows if recorder is not None else []
        message = f"{type(exc).__name__}: {exc}"
        logger.error("run failed: %s", message)
        logger.debug("%s", traceback.format_exc())
        write_results(out / "results.csv", rows)
        write_manifest(out / "manifest.json", cfg, "error", message, _rounds_done(rows))
        return RunResult(1, out, rows, None, message)
    write_results(out / "results.csv", recorder.rows)
    if problem.reliability is not None:
        bins = problem.reliability(particles)
        if bins is not None:
            write_reliability(out / "reliability.csv", bins)
    write_manifest(out / "manifest.json", cfg, "ok", None, cfg.rounds)
    return RunResult(0, out, recorder.rows, particles, history=recorder.history)


def _rounds_done(rows) -> int:
    return max((r[0] for r in rows), default=0)


def toy_curves(cfg: ExperimentConfig, out_dir, snapshots: dict) -> Path:
    """Write per-round KDE curves next to the normalized target (1-D toy only)."""
    grid = toy_grid(cfg)
    toy = toy1d(cfg.toy_prior)
    pts = grid.points()
    logp = toy.log_target(pts)
    p = np.exp(logp - logp.max())
    p = p / grid.integrate(p)
    path = Path(out_dir) / "curves.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("round", "theta", "kde", "target"))
        for round_index in sorted(snapshots):
            q = np.exp(kde_log_density(pts, snapshots[round_index], cfg.kde_bandwidth))
            q = q / grid.integrate(q)
            for t, qv, pv in zip(pts[:, 0], q, p):
                writer.writerow([round_index, format_float(t), format_float(qv), format_float(pv)])
    return path
