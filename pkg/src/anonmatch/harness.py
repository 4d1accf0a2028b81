"""Experiment orchestration: training runs, evaluation periods, metrics, CSVs."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError, UnknownLearnerError
from .learners import LEARNER_KINDS, HyperParams, make_learner
from .matchenv import EnvConfig, MatchingEnv

log = logging.getLogger(__name__)

RUN_COLUMNS = ("period", "welfare", "running_avg", "density_mse", "entropy_mean", "local_density_loss", "epsilon", "phase")
RUNNING_WINDOW = 100


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    learner: str = "dedqn"
    hyper: HyperParams = field(default_factory=HyperParams)
    train_steps: int = 200_000
    eval_period: int = 1000
    # evaluation periods run after training with exploration frozen at its floor
    converged_periods: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "results"
    # when set, overrides env.total_rate = dar * env.num_agents
    dar: float | None = None
    # density-prediction error is measured on every n-th step's decisions
    density_every: int = 5
    name: str = "experiment"

    def resolved_env(self) -> EnvConfig:
        env = EnvConfig(**asdict(self.env))
        if self.dar is not None:
            if env.zone_rates is not None:
                raise ConfigError("dar cannot be combined with env.zone_rates")
            env.total_rate = self.dar * env.num_agents
        return env

    def validate(self) -> None:
        if self.learner not in LEARNER_KINDS:
            raise UnknownLearnerError(f"unknown learner kind {self.learner!r}; expected one of {LEARNER_KINDS}")
        if self.eval_period <= 0:
            raise ConfigError("eval_period must be > 0")
        if self.train_steps < 0 or self.converged_periods < 0:
            raise ConfigError("train_steps and converged_periods must be >= 0")
        if self.train_steps + self.converged_periods * self.eval_period <= 0:
            raise ConfigError("experiment has no steps")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.dar is not None and self.dar < 0:
            raise ConfigError("dar must be nonnegative")
        if self.density_every < 1:
            raise ConfigError("density_every must be >= 1")
        self.resolved_env().validate()
        self.hyper.validate()

    @property
    def total_steps(self) -> int:
        return self.train_steps + self.converged_periods * self.eval_period

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsLog:
    learner: str
    seed: int
    welfare: list[float] = field(default_factory=list)
    running_avg: list[float] = field(default_factory=list)
    density_mse: list[float] = field(default_factory=list)
    entropy_mean: list[float] = field(default_factory=list)
    local_density_loss: list[float] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)
    revenues: list[np.ndarray] = field(default_factory=list)
    converged_periods: int = 0
    wall_clock: float = 0.0

    @property
    def n_periods(self) -> int:
        return len(self.welfare)

    def converged_window(self) -> np.ndarray:
        """Per-agent revenues of the final evaluation window, shape (periods, agents)."""
        k = self.converged_periods or min(RUNNING_WINDOW, self.n_periods)
        return np.array(self.revenues[-k:])

    def converged_welfare(self) -> float:
        return float(np.mean(self.converged_window().mean(axis=1)))

    def final_revenues(self) -> np.ndarray:
        return self.converged_window().mean(axis=0)


def social_welfare(revenues) -> float:
    """Mean per-agent revenue of one evaluation period."""
    revenues = np.asarray(revenues, dtype=float)
    if revenues.size == 0:
        raise ConfigError("social welfare of an empty population")
    return float(revenues.mean())


@dataclass
class Spread:
    std: float
    q1: float
    median: float
    q3: float
    per_agent: np.ndarray


def fairness_spread(revenues) -> Spread:
    """Dispersion of per-agent revenue.

    ``revenues`` is either a per-agent vector or a (periods, agents) window
    that is first averaged over periods.
    """
    r = np.asarray(revenues, dtype=float)
    per_agent = r.mean(axis=0) if r.ndim == 2 else r
    q1, med, q3 = np.percentile(per_agent, [25, 50, 75])
    return Spread(float(per_agent.std()), float(q1), float(med), float(q3), per_agent)


def density_mse(predicted, truth) -> np.ndarray:
    """Full-vector squared error ``sum_z (pred[z] - truth[z])^2`` per row."""
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return ((predicted - truth) ** 2).sum(axis=-1)


def density_mse_track(learner, experiences, counts_at_decision) -> float | None:
    """Harness-side error of the learner's density prediction for the given
    experiences against the realized, normalized population distribution."""
    preds = learner.density_predictions(experiences)
    if preds is None:
        return None
    total = counts_at_decision.sum()
    if total == 0:
        return None
    return float(density_mse(preds, counts_at_decision / total).mean())


def _mean_or_nan(values) -> float:
    return float(np.mean(values)) if values else math.nan


def run_single(config: ExperimentConfig, seed: int) -> MetricsLog:
    """Train and evaluate one seed; fully deterministic given (config, seed)."""
    start = time.perf_counter()
    env_seq, learner_seq = np.random.SeedSequence(seed).spawn(2)
    env = MatchingEnv(config.resolved_env())
    env.reset(np.random.default_rng(env_seq))
    learner = make_learner(config.learner, env.n_agents, env.n_zones, config.hyper, learner_seq,
                           max(config.train_steps, 1))
    table = getattr(learner, "mean_actions", None)
    metrics = MetricsLog(config.learner, seed, converged_periods=config.converged_periods)
    mse_acc, ent_acc, loss_acc = [], [], []
    track = "density" in _density_heads(learner)

    for step in range(config.total_steps):
        training = step < config.train_steps
        if not training and learner.training:
            learner.end_period()
            learner.training = False
        agents = env.decision_agents()
        zones, counts = env.local_counts(agents)
        explore_step = min(step, config.train_steps)
        actions = learner.act(agents, zones, counts, explore_step)
        snapshot = env.state.idle_counts
        exps = env.step(dict(zip(agents.tolist(), actions.tolist())))
        if table is not None and len(agents):
            table.log(zones, actions)
        if table is not None and (step + 1) % config.hyper.mean_action_period == 0:
            table.roll()
        if exps:
            if not all(math.isfinite(e.r) for e in exps):
                raise TrainingError(f"non-finite reward at step {step} (seed {seed})")
            learner.record(exps)
            if track and step % config.density_every == 0:
                preds = learner.density_predictions(exps)
                total = snapshot.sum()
                if preds is not None and total > 0:
                    mse_acc.append(float(density_mse(preds, snapshot / total).mean()))
                    ent_acc.append(float(np.mean(-(preds * np.log(np.where(preds > 0, preds, 1.0))).sum(axis=-1))))
        if training:
            losses = learner.train(step)
            if losses and "density_loss" in losses and losses["density_loss"]:
                loss_acc.append(losses["density_loss"])

        if (step + 1) % config.eval_period == 0:
            revenues = env.reset_episode_revenue()
            metrics.revenues.append(revenues)
            metrics.welfare.append(social_welfare(revenues))
            window = metrics.welfare[-RUNNING_WINDOW:]
            metrics.running_avg.append(float(np.mean(window)))
            metrics.density_mse.append(_mean_or_nan(mse_acc))
            metrics.entropy_mean.append(_mean_or_nan(ent_acc))
            metrics.local_density_loss.append(_mean_or_nan(loss_acc))
            metrics.epsilon.append(learner.epsilon(explore_step) if learner.uses_epsilon else math.nan)
            metrics.phase.append("train" if training else "converged")
            mse_acc, ent_acc, loss_acc = [], [], []
            if training:
                learner.end_period()
    metrics.wall_clock = time.perf_counter() - start
    log.info("%s seed %d: %d periods, converged welfare %.4f, %.1fs", config.learner, seed,
             metrics.n_periods, metrics.converged_welfare() if metrics.n_periods else math.nan, metrics.wall_clock)
    return metrics


def _density_heads(learner) -> dict:
    for attr in ("net", "value"):
        net = getattr(learner, attr, None)
        if net is not None:
            return net.heads
    return {}


def _run_job(args):
    config, seed = args
    return run_single(config, seed)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[MetricsLog]:
    """One :class:`MetricsLog` per seed, in seed order."""
    config.validate()
    tasks = [(config, s) for s in config.seeds]
    if jobs <= 1 or len(tasks) == 1:
        return [_run_job(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, tasks))


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    x = float(x)
    return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else repr(x))


def run_filename(log: MetricsLog) -> str:
    return f"{log.learner}_seed{log.seed}.csv"


def write_run_csv(log: MetricsLog, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for i in range(log.n_periods):
            w.writerow([i, *(_fmt(v) for v in (log.welfare[i], log.running_avg[i], log.density_mse[i],
                                               log.entropy_mean[i], log.local_density_loss[i], log.epsilon[i])),
                        log.phase[i]])


def write_agents_csv(log: MetricsLog, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("agent", "mean_revenue"))
        for agent, value in enumerate(log.final_revenues()):
            w.writerow([agent, _fmt(value)])


SUMMARY_COLUMNS = ("scenario", "learner", "n_seeds", "welfare_mean", "welfare_std", "fairness_std_mean",
                   "density_mse_final_mean")


def summary_rows(logs: list[MetricsLog], scenario: str = "") -> list[list]:
    rows = []
    for kind in dict.fromkeys(l.learner for l in logs):
        group = [l for l in logs if l.learner == kind]
        welfare = np.array([l.converged_welfare() for l in group])
        spread = np.array([fairness_spread(l.converged_window()).std for l in group])
        mse = [l.density_mse[-1] for l in group if l.density_mse]
        rows.append([scenario, kind, len(group), _fmt(welfare.mean()), _fmt(welfare.std()), _fmt(spread.mean()),
                     _fmt(np.mean(mse) if mse else math.nan)])
    return rows


def write_summary(rows: list[list], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerows(rows)


def write_manifest(config_dict: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_results(logs: list[MetricsLog], output_dir, config: ExperimentConfig | None = None,
                  scenario: str = "") -> list[Path]:
    """Per-run CSVs, per-run agent revenues, a summary across seeds and a manifest."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for log_ in logs:
        run_path = out / run_filename(log_)
        write_run_csv(log_, run_path)
        agents_path = out / run_path.name.replace(".csv", "_agents.csv")
        write_agents_csv(log_, agents_path)
        written += [run_path, agents_path]
    summary = out / "summary.csv"
    write_summary(summary_rows(logs, scenario), summary)
    written.append(summary)
    if config is not None:
        manifest = out / "manifest.json"
        write_manifest(config.to_dict(), manifest)
        written.append(manifest)
    return written


def read_run_csv(path) -> dict[str, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    cols: dict[str, list] = {c: [] for c in RUN_COLUMNS}
    for row in rows:
        for c in RUN_COLUMNS:
            v = row[c]
            cols[c].append(v if c == "phase" else (int(v) if c == "period" else float(v)))
    return cols


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))
