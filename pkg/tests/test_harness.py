import math

import numpy as np
import pytest

from anonmatch.errors import ConfigError, UnknownLearnerError
from anonmatch.harness import (
    RUN_COLUMNS,
    ExperimentConfig,
    MetricsLog,
    density_mse,
    fairness_spread,
    read_run_csv,
    run_experiment,
    run_single,
    social_welfare,
    write_results,
)
from anonmatch.learners import HyperParams
from anonmatch.matchenv import EnvConfig

SMALL_HP = dict(hidden=[8], dropout=0.0, min_fill=50, batch_size=8, target_sync=50, train_every=2)


def small_config(learner="dedqn", **kw):
    base = dict(env=EnvConfig(grid_width=3, grid_height=2, num_agents=6), dar=0.5, learner=learner,
                hyper=HyperParams(**SMALL_HP), train_steps=600, eval_period=100, converged_periods=2, seeds=[0])
    base.update(kw)
    return ExperimentConfig(**base)


class TestMetrics:
    def test_social_welfare(self):
        assert social_welfare([2, 4]) == 3
        assert social_welfare([1.5] * 7) == 1.5
        rng = np.random.default_rng(0)
        r = rng.random(20)
        assert social_welfare(r) == pytest.approx(social_welfare(rng.permutation(r)))

    def test_fairness_examples(self):
        s = fairness_spread([1, 2, 3, 4])
        assert s.std == pytest.approx(1.1180, abs=1e-4) and s.median == 2.5
        assert (s.q1, s.q3) == (1.75, 3.25)
        same = fairness_spread([3.0] * 5)
        assert same.std == 0 and same.q1 == same.q3

    def test_fairness_scales(self):
        r = np.random.default_rng(1).random(10)
        assert fairness_spread(-3 * r).std == pytest.approx(3 * fairness_spread(r).std)

    def test_fairness_window_averages_periods(self):
        window = np.array([[1.0, 3.0], [3.0, 5.0]])
        assert np.allclose(fairness_spread(window).per_agent, [2.0, 4.0])

    def test_density_mse_examples(self):
        n = 10
        assert density_mse(np.full(n, 0.1), np.full(n, 0.1)) == 0
        onehot = np.eye(n)[3]
        assert density_mse(np.full(n, 1 / n), onehot) == pytest.approx(1 - 1 / n)
        assert density_mse(np.full(n, 1 / n), onehot) == pytest.approx((1 - 1 / n) ** 2 + (n - 1) / n**2)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            small_config(eval_period=0).validate()
        with pytest.raises(ConfigError):
            small_config(seeds=[]).validate()
        with pytest.raises(UnknownLearnerError):
            small_config(learner="sarsa").validate()

    def test_dar_sets_total_rate(self):
        assert small_config(dar=0.25).resolved_env().total_rate == 1.5


class TestRuns:
    def test_two_seeds_same_shapes(self):
        logs = run_experiment(small_config(seeds=[0, 1]))
        assert len(logs) == 2
        a, b = logs
        assert a.n_periods == b.n_periods == 8
        assert [len(r) for r in a.revenues] == [6] * 8
        assert a.phase.count("converged") == 2

    def test_zero_demand_zero_welfare(self):
        cfg = small_config(dar=None, env=EnvConfig(grid_width=3, grid_height=2, num_agents=6, total_rate=0.0))
        log = run_single(cfg, 0)
        assert log.welfare == [0.0] * log.n_periods

    @pytest.mark.parametrize("kind", ["tabq", "dqn", "a2c", "dedqn", "dea2c", "mmfq"])
    def test_every_learner_runs_and_metrics_sane(self, kind):
        log = run_single(small_config(kind), 3)
        assert log.n_periods == 8
        assert min(log.welfare) >= 0
        for i in range(log.n_periods):
            window = log.welfare[max(0, i - 99) : i + 1]
            assert min(window) - 1e-9 <= log.running_avg[i] <= max(window) + 1e-9
            assert log.running_avg[i] == pytest.approx(np.mean(window))
        if kind in ("dedqn", "dea2c"):
            assert all(math.isfinite(m) for m in log.density_mse)
        else:
            assert all(math.isnan(m) for m in log.density_mse)
        assert math.isnan(log.epsilon[0]) == (kind in ("a2c", "dea2c"))

    def test_epsilon_frozen_in_converged_phase(self):
        log = run_single(small_config("dqn"), 0)
        conv = [e for e, p in zip(log.epsilon, log.phase) if p == "converged"]
        assert conv == [pytest.approx(0.05)] * 2

    def test_rerun_bit_identical(self, tmp_path):
        cfg = small_config("dea2c")
        a, b = run_single(cfg, 5), run_single(cfg, 5)
        assert a.welfare == b.welfare and np.array_equal(np.array(a.revenues), np.array(b.revenues))
        write_results([a], tmp_path / "a", cfg)
        write_results([b], tmp_path / "b", cfg)
        for name in ("dea2c_seed5.csv", "dea2c_seed5_agents.csv", "summary.csv", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seeds_differ(self):
        cfg = small_config("dqn")
        assert run_single(cfg, 0).welfare != run_single(cfg, 1).welfare


class TestWriteResults:
    def _fake(self, seed, periods=3, agents=4):
        rng = np.random.default_rng(seed)
        log = MetricsLog("dedqn", seed, converged_periods=2)
        for i in range(periods):
            rev = rng.random(agents) * 10 / 3
            log.revenues.append(rev)
            log.welfare.append(float(rev.mean()))
            log.running_avg.append(float(np.mean(log.welfare)))
            log.density_mse.append(float(rng.random()) / 7)
            log.entropy_mean.append(math.log(agents) - float(rng.random()) / 3)
            log.local_density_loss.append(math.nan)
            log.epsilon.append(0.05)
            log.phase.append("train")
        return log

    def test_counts(self, tmp_path):
        logs = [self._fake(s) for s in range(5)]
        written = write_results(logs, tmp_path, small_config(seeds=list(range(5))))
        assert len(list(tmp_path.glob("dedqn_seed?.csv"))) == 5
        assert len([p for p in written if p.name.endswith("_agents.csv")]) == 5
        lines = (tmp_path / "summary.csv").read_text().splitlines()
        assert len(lines) == 2 and lines[1].startswith(",dedqn,5,")
        assert (tmp_path / "manifest.json").exists()

    def test_round_trip_12_digits(self, tmp_path):
        log = self._fake(7)
        write_results([log], tmp_path)
        cols = read_run_csv(tmp_path / "dedqn_seed7.csv")
        assert list(cols) == list(RUN_COLUMNS)
        for name in ("welfare", "running_avg", "density_mse", "entropy_mean", "epsilon"):
            for a, b in zip(cols[name], getattr(log, name)):
                assert float(f"{a:.12g}") == float(f"{b:.12g}")
        assert all(math.isnan(v) for v in cols["local_density_loss"])
        assert cols["period"] == [0, 1, 2]
