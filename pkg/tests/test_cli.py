import json
import subprocess
import sys

import numpy as np
import pytest

from econograph.cli import DEFAULTS, main, resolve_config
from econograph.errors import ValidationError
from econograph.io import read_key_values, read_scores

FAST = """
[synth]
n = 100
p = 5
[debias]
chains = 2
iters = 300
thin = 2
method = dyadic
freeze = eta_tri
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(FAST)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


class TestResolveConfig:
    def test_defaults(self):
        cfg = resolve_config(env={})
        assert cfg["synth"] == DEFAULTS["synth"]
        assert cfg["run"]["seed_source"] == "config"

    def test_seed_precedence(self, config):
        assert resolve_config(config, env={"ECONOGRAPH_SEED": "7"})["run"]["seed"] == "7"
        cfg = resolve_config(config, seed=3, env={"ECONOGRAPH_SEED": "7"})
        assert cfg["run"]["seed"] == "3" and cfg["run"]["seed_source"] == "flag"

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "bad.ini"
        p.write_text("[fit]\nlearning_rate = 1\n")
        with pytest.raises(ValidationError):
            resolve_config(p, env={})

    def test_bad_seed(self):
        with pytest.raises(ValidationError):
            resolve_config(env={"ECONOGRAPH_SEED": "abc"})


class TestPipeline:
    def test_outputs(self, config, tmp_path):
        out = tmp_path / "run"
        assert _run("pipeline", "--config", config, "--out", out, "--seed", 1) == 0
        for name in ("scores.csv", "formation_posterior.csv", "eval_report.csv", "fit_params.txt",
                     "ground_truth.csv", "manifest.json", "graph/attributes.csv"):
            assert (out / name).exists(), name
        z_star, z_robust = read_scores(out / "scores.csv")
        assert z_star.shape == (100,) and np.all(np.isfinite(z_robust))
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["deterministic"] is True
        assert manifest["config"]["debias"]["iters"] == "300"
        assert "wall_time_s" in manifest and "format_versions" in manifest
        methods = [ln.split(",")[0] for ln in (out / "eval_report.csv").read_text().splitlines()[1:]]
        assert methods == ["model", "model_robust", "baseline_logistic", "baseline_lnp"]

    def test_byte_identical_reruns(self, config, tmp_path):
        for tag in ("a", "b"):
            assert _run("pipeline", "--config", config, "--out", tmp_path / tag, "--seed", 5) == 0
        a = (tmp_path / "a" / "scores.csv").read_bytes()
        b = (tmp_path / "b" / "scores.csv").read_bytes()
        assert a == b

    def test_environment_seed(self, config, tmp_path, monkeypatch):
        monkeypatch.setenv("ECONOGRAPH_SEED", "11")
        assert _run("synth", "--config", config, "--out", tmp_path / "s") == 0
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["seed"] == 11 and manifest["seed_source"] == "environment"

    def test_stagewise_matches_pipeline(self, config, tmp_path):
        assert _run("pipeline", "--config", config, "--out", tmp_path / "p", "--seed", 2) == 0
        assert _run("synth", "--config", config, "--out", tmp_path / "s", "--seed", 2) == 0
        assert _run("fit", "--config", config, "--out", tmp_path / "f", "--seed", 2,
                    "--input", tmp_path / "s" / "graph") == 0
        assert _run("eval", "--config", config, "--out", tmp_path / "e", "--seed", 2,
                    "--input", tmp_path / "s" / "graph", "--truth", tmp_path / "s" / "ground_truth.csv",
                    "--scores", tmp_path / "f" / "scores.csv") == 0
        zp, _ = read_scores(tmp_path / "p" / "scores.csv")
        zf, _ = read_scores(tmp_path / "f" / "scores.csv")
        np.testing.assert_array_equal(zp, zf)

    def test_debias_command(self, config, tmp_path):
        assert _run("synth", "--config", config, "--out", tmp_path / "s", "--seed", 4) == 0
        assert _run("fit", "--config", config, "--out", tmp_path / "f", "--seed", 4,
                    "--input", tmp_path / "s" / "graph") == 0
        assert _run("debias", "--config", config, "--out", tmp_path / "d", "--seed", 4,
                    "--input", tmp_path / "s" / "graph", "--fit", tmp_path / "f") == 0
        rows = (tmp_path / "d" / "formation_posterior.csv").read_text().splitlines()
        assert rows[0] == "parameter,mean,sd,rhat"
        assert (tmp_path / "d" / "refit_params.txt").exists()


class TestFixLambda2:
    def test_paired_fit(self, tmp_path):
        base = tmp_path / "base.ini"
        base.write_text("[synth]\nn = 300\np = 5\nlambda1 = 0.1\nlambda2 = 0.2\n")
        fixed = tmp_path / "fixed.ini"
        fixed.write_text("[synth]\nn = 300\np = 5\nlambda1 = 0.1\nlambda2 = 0.2\n[fit]\nfix_lambda2 = true\n")
        assert _run("synth", "--config", base, "--out", tmp_path / "s", "--seed", 8) == 0
        graph = tmp_path / "s" / "graph"
        assert _run("fit", "--config", base, "--out", tmp_path / "full", "--input", graph) == 0
        assert _run("fit", "--config", fixed, "--out", tmp_path / "basic", "--input", graph) == 0
        full = read_key_values(tmp_path / "full" / "fit_params.txt")
        basic = read_key_values(tmp_path / "basic" / "fit_params.txt")
        assert float(basic["lambda2"]) == 0.0
        assert float(full["lambda2"]) != 0.0
        zf, _ = read_scores(tmp_path / "full" / "scores.csv")
        zb, _ = read_scores(tmp_path / "basic" / "scores.csv")
        assert np.max(np.abs(zf - zb)) > 1e-3


class TestExitCodes:
    def test_validation(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[synth]\nn = many\n")
        assert _run("synth", "--config", bad, "--out", tmp_path / "o") == 1
        assert "ValidationError" in capsys.readouterr().err
        err = json.loads((tmp_path / "o" / "error.json").read_text())
        assert err["exit_code"] == 1 and err["invariant"] == "config value"

    def test_missing_required_flag(self, tmp_path):
        assert _run("fit", "--out", tmp_path / "o") == 1

    def test_numerical(self, tmp_path):
        bad = tmp_path / "unstable.ini"
        bad.write_text("[synth]\nn = 50\np = 3\nlambda1 = 5\n")
        assert _run("synth", "--config", bad, "--out", tmp_path / "o") == 2
        assert json.loads((tmp_path / "o" / "error.json").read_text())["error"] == "StabilityViolation"

    def test_io_missing_input(self, tmp_path):
        assert _run("fit", "--input", tmp_path / "nowhere", "--out", tmp_path / "o") == 3

    def test_io_nonempty_output(self, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / "keep.txt").write_text("x")
        assert _run("synth", "--out", out) == 3
        assert (out / "keep.txt").read_text() == "x"

    def test_io_missing_config(self, tmp_path):
        assert _run("synth", "--config", tmp_path / "none.ini", "--out", tmp_path / "o") == 3


class TestEntryPoint:
    def test_module_invocation(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "econograph.cli", "synth", "--out", str(tmp_path / "s"),
                               "--seed", "1"], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip() == str(tmp_path / "s")
