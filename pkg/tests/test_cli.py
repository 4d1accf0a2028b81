import json
import subprocess
import sys

import pytest

from anonmatch.cli import (
    EXIT_MISSING_FILE,
    EXIT_OK,
    EXIT_SCHEMA,
    EXIT_UNKNOWN_LEARNER,
    EXIT_USAGE,
    main,
)
from anonmatch.config import apply_overrides, canned_names, load_config, parse_seeds
from anonmatch.errors import ConfigError

TINY = {
    "name": "tiny",
    "learner": "dqn",
    "train_steps": 300,
    "eval_period": 100,
    "converged_periods": 1,
    "seeds": [0],
    "dar": 0.5,
    "env": {"grid_width": 3, "grid_height": 1, "num_agents": 4},
    "hyper": {"hidden": [8], "dropout": 0.0, "min_fill": 20, "batch_size": 8, "target_sync": 20},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


class TestConfigFiles:
    def test_canned_configs_load(self):
        names = canned_names()
        for expected in ("dar25", "dar40_dynamic", "dar50_nonuniform", "dar60", "dar75_nonuniform",
                         "realworld_like"):
            assert expected in names
        for name in names:
            cfg, _ = load_config(name)
            assert cfg.name == name

    def test_override_resolves_learner(self):
        cfg, _ = load_config("dar60", ["learner=dedqn"])
        assert cfg.learner == "dedqn"

    def test_nested_override_and_int_widening(self, tiny):
        cfg, raw = load_config(tiny, ["env.num_agents=10", "hyper.lr_q=1", "hyper.hidden=[4,4]"])
        assert cfg.env.num_agents == 10 and cfg.hyper.lr_q == 1.0 and isinstance(cfg.hyper.lr_q, float)
        assert cfg.hyper.hidden == [4, 4] and raw["env"]["grid_width"] == 3

    @pytest.mark.parametrize("override", ["dar=abc", "env.num_agents=2.5", "hyper.hidden=3", "seeds=[\"a\"]",
                                          "hyper.shared=1"])
    def test_type_errors(self, tiny, override):
        with pytest.raises(ConfigError) as err:
            load_config(tiny, [override])
        assert override.split("=")[0].split(".")[-1] in str(err.value)

    @pytest.mark.parametrize("override", ["bogus=1", "env.bogus=1", "hyper.gamma.x=1", "env=3", "noequals"])
    def test_unknown_keys(self, tiny, override):
        with pytest.raises(ConfigError):
            load_config(tiny, [override])

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"env": {"agents": 3}}))
        with pytest.raises(ConfigError, match="env.agents"):
            load_config(path)

    def test_overrides_do_not_mutate(self):
        data = {"env": {"ttl": 2}}
        apply_overrides(data, ["env.ttl=3"])
        assert data == {"env": {"ttl": 2}}

    def test_parse_seeds(self):
        assert parse_seeds("0,1,2") == [0, 1, 2]
        assert parse_seeds("3-5") == [3, 4, 5]
        assert parse_seeds("1,4-5") == [1, 4, 5]
        for bad in ("", "a", "1-b"):
            with pytest.raises(ConfigError):
                parse_seeds(bad)


class TestExitCodes:
    def test_no_args_usage(self, capsys):
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_console_script_no_args(self):
        proc = subprocess.run([sys.executable, "-m", "anonmatch.cli"], capture_output=True, text=True)
        assert proc.returncode != 0 and "usage" in proc.stderr

    def test_missing_file(self, capsys):
        assert main(["run", "--config", "/nonexistent/cfg.json"]) == EXIT_MISSING_FILE
        assert "not found" in capsys.readouterr().err

    def test_schema_violation(self, tiny, capsys):
        assert main(["run", "--config", str(tiny), "--set", "dar=abc"]) == EXIT_SCHEMA
        assert "dar" in capsys.readouterr().err

    def test_unknown_learner(self, tiny, capsys):
        assert main(["run", "--config", str(tiny), "--set", "learner=ppo"]) == EXIT_UNKNOWN_LEARNER
        assert "ppo" in capsys.readouterr().err

    def test_codes_distinct(self):
        codes = [EXIT_OK, EXIT_USAGE, EXIT_MISSING_FILE, EXIT_SCHEMA, EXIT_UNKNOWN_LEARNER]
        assert len(set(codes)) == len(codes)


class TestCommands:
    def test_run_and_manifest_replay(self, tiny, tmp_path):
        out = tmp_path / "first"
        assert main(["run", "--config", str(tiny), "--seeds", "0-1", "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seeds"] == [0, 1] and manifest["env"]["num_agents"] == 4
        again = tmp_path / "again"
        assert main(["run", "--config", str(out / "manifest.json"), "--out", str(again)]) == EXIT_OK
        for name in ("dqn_seed0.csv", "dqn_seed1.csv", "dqn_seed0_agents.csv", "summary.csv"):
            assert (out / name).read_bytes() == (again / name).read_bytes()

    def test_sweep_grid(self, tiny, tmp_path):
        other = tmp_path / "tiny_b.json"
        other.write_text(json.dumps({**TINY, "dar": 0.8, "name": "tiny_b"}))
        out = tmp_path / "sweep"
        code = main(["sweep", "--learners", "dqn,tabq", "--scenarios",
                     f"{tiny},{other}", "--seeds", "0-2", "--out", str(out)])
        assert code == EXIT_OK
        runs = [p for p in out.rglob("*_seed?.csv")]
        assert len(runs) == 12
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(summary) == 1 + 4

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--trials", "5"]) == EXIT_OK
        assert "overall" in capsys.readouterr().out

    def test_oracle_vi(self, capsys):
        assert main(["oracle", "--which", "vi,assignment"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "value iteration" in out and "assignment" in out

    def test_oracle_unknown(self):
        assert main(["oracle", "--which", "nope"]) == EXIT_SCHEMA
