import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mars.cli import main
from mars.config import ConfigError, RunConfig, load_config
from mars.evaluate import calibration_error, rmse
from mars.fsvgd import PredictiveMixture
from mars.scorenet import ScoreNetwork

TINY = """
seeds = [3]

[env]
num_tasks = 4
points_per_task = 8
num_test_tasks = 1
test_points = 10

[scorenet]
embed_dim = 8
num_heads = 2
key_size = 4
ffn_hidden = 8
train_iters = 3

[inference]
steps = 5
num_particles = 3

[baselines]
hidden = [8, 8]

[bench]
num_samples = 10
num_eval = 5
train_iters = 3
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _assert_identical_runs(a: Path, b: Path):
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys()
    for name in fa:
        assert fa[name] == fb[name], name


def _no_temp_files(root: Path):
    assert not [p for p in root.rglob("*.tmp")]


class TestConfig:
    def test_defaults(self):
        cfg = load_config(None)
        assert cfg == RunConfig()
        assert cfg.seeds == (0, 1, 2, 3, 4)

    def test_overrides(self, cfg_path):
        cfg = load_config(cfg_path)
        assert cfg.env.num_tasks == 4 and cfg.scorenet.train_iters == 3
        assert cfg.baselines.hidden == (8, 8)
        assert cfg.interpolator.kind == "gp"

    @pytest.mark.parametrize("text, match", [
        ("[env]\nbogus = 1\n", "unknown key"),
        ("[env]\nkind = 'mnist'\n", "env.kind"),
        ("[scorenet]\nembed_dim = 10\nnum_heads = 3\n", "divisible"),
        ("seeds = []\n", "seeds"),
        ("stuff = 1\n", "top-level"),
        ("[env\n", "tiny.toml"),
    ])
    def test_invalid(self, tmp_path, text, match):
        p = tmp_path / "tiny.toml"
        p.write_text(text)
        with pytest.raises(ConfigError, match=match):
            load_config(p)

    def test_missing_csv_path_is_named(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[env]\nkind = 'csv'\ntrain_paths = ['nope.csv']\n")
        with pytest.raises(ConfigError, match="nope.csv"):
            load_config(p)


class TestCommands:
    def test_gen_env_and_determinism(self, cfg_path, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-env", "--config", str(cfg_path), "--out", str(tmp_path / d)]) == 0
        _assert_identical_runs(tmp_path / "a", tmp_path / "b")
        files = _files(tmp_path / "a")
        assert "train/task_003.csv" in files and "test/task_000_test.csv" in files
        rows = list(csv.reader(files["train/task_000.csv"].decode().splitlines()))
        assert rows[0] == ["x", "y"] and len(rows) == 9

    def test_train_infer_eval_pipeline(self, cfg_path, tmp_path):
        out = tmp_path / "model"
        assert main(["train-score", "--config", str(cfg_path), "--out", str(out)]) == 0
        net = ScoreNetwork.loads((out / "score_net.json").read_text())
        assert net.dumps(json.loads((out / "score_net.json").read_text())["metadata"]) + "\n" == \
            (out / "score_net.json").read_text()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3 and "score_net.json" in manifest["artifacts"]
        assert manifest["config"]["scorenet"]["train_iters"] == 3
        _no_temp_files(out)

        env = tmp_path / "env"
        assert main(["gen-env", "--config", str(cfg_path), "--out", str(env)]) == 0
        ctx = env / "test/task_000_context.csv"
        tst = env / "test/task_000_test.csv"
        pred = tmp_path / "pred"
        args = ["infer", "--config", str(cfg_path), "--model", str(out / "score_net.json"),
                "--task", str(ctx), "--query", str(tst)]
        assert main(args + ["--out", str(pred)]) == 0
        assert main(args + ["--out", str(tmp_path / "pred2")]) == 0
        _assert_identical_runs(pred, tmp_path / "pred2")
        files = _files(pred)
        assert "ensemble/particle_002.json" in files and "ensemble/ensemble.json" in files
        header = files["predictions.csv"].decode().splitlines()[0]
        assert header == "x,mean,particle_0,particle_1,particle_2"

        ev = tmp_path / "eval"
        assert main(["eval", "--config", str(cfg_path), "--predictions", str(pred / "predictions.csv"),
                     "--targets", str(tst), "--out", str(ev)]) == 0
        report = json.loads((ev / "metrics.json").read_text())
        # in-process oracle on the same files
        data = np.loadtxt(pred / "predictions.csv", delimiter=",", skiprows=1)
        y = np.loadtxt(tst, delimiter=",", skiprows=1)[:, 1]
        sigma = json.loads((pred / "predictions.json").read_text())["likelihood_std"]
        assert report["rmse"] == rmse(data[:, 1], y)
        assert report["calibration_error"] == calibration_error(PredictiveMixture(data[:, 2:].T, sigma).cdf(y))

    def test_infer_with_zero_steps(self, cfg_path, tmp_path):
        assert main(["train-score", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 0
        assert main(["gen-env", "--config", str(cfg_path), "--out", str(tmp_path / "e")]) == 0
        cfg0 = tmp_path / "zero.toml"
        cfg0.write_text(TINY.replace("steps = 5", "steps = 0"))
        assert main(["infer", "--config", str(cfg0), "--model", str(tmp_path / "m/score_net.json"),
                     "--task", str(tmp_path / "e/test/task_000_context.csv"), "--out", str(tmp_path / "p")]) == 0

    def test_eval_perfect_predictions(self, cfg_path, tmp_path):
        (tmp_path / "p.csv").write_text("x,mean,particle_0\n0.0,1.0,1.0\n1.0,2.0,2.0\n")
        (tmp_path / "t.csv").write_text("x,y\n0.0,1.0\n1.0,2.0\n")
        assert main(["eval", "--config", str(cfg_path), "--predictions", str(tmp_path / "p.csv"),
                     "--targets", str(tmp_path / "t.csv"), "--out", str(tmp_path / "ev")]) == 0
        assert json.loads((tmp_path / "ev/metrics.json").read_text())["rmse"] == 0.0

    def test_eval_row_mismatch(self, cfg_path, tmp_path):
        (tmp_path / "p.csv").write_text("x,mean,particle_0\n0.0,1.0,1.0\n")
        (tmp_path / "t.csv").write_text("x,y\n0.0,1.0\n1.0,2.0\n")
        assert main(["eval", "--config", str(cfg_path), "--predictions", str(tmp_path / "p.csv"),
                     "--targets", str(tmp_path / "t.csv"), "--out", str(tmp_path / "ev")]) == 2
        assert not (tmp_path / "ev/manifest.json").exists()

    def test_ablate_no_spectral_and_gp_mean(self, cfg_path, tmp_path):
        out = tmp_path / "abl"
        assert main(["ablate", "--config", str(cfg_path), "--variant", "no-spectral", "--out", str(out)]) == 0
        doc = json.loads((out / "score_net_no-spectral_seed3.json").read_text())
        assert all("u" not in layer for layer in doc["layers"])
        assert json.loads((out / "manifest.json").read_text())["variant"] == "no-spectral"
        rows = (out / "metrics.csv").read_text().splitlines()
        assert [r.split(",")[1] for r in rows[1:]] == ["mars", "no-spectral"]

        out2 = tmp_path / "abl2"
        assert main(["ablate", "--config", str(cfg_path), "--variant", "gp-mean", "--out", str(out2)]) == 0
        assert json.loads((out2 / "manifest.json").read_text())["variant"] == "gp-mean"

    def test_ablate_ssge_deterministic(self, cfg_path, tmp_path):
        for d in ("a", "b"):
            assert main(["ablate", "--config", str(cfg_path), "--variant", "ssge", "--out", str(tmp_path / d)]) == 0
        _assert_identical_runs(tmp_path / "a", tmp_path / "b")

    def test_bench_score_table(self, cfg_path, tmp_path):
        assert main(["bench-score", "--config", str(cfg_path), "--setup", "gp2d", "--out", str(tmp_path / "b")]) == 0
        rows = list(csv.DictReader((tmp_path / "b/bench.csv").read_text().splitlines()))
        assert {r["estimator"] for r in rows} == {"mars", "ssge"}
        assert set(rows[0]) == {"setup", "seed", "estimator", "rmse", "cosine"}

    def test_compare(self, cfg_path, tmp_path):
        assert main(["compare", "--config", str(cfg_path), "--methods", "gp,vanilla", "--out", str(tmp_path / "c")]) == 0
        summary = json.loads((tmp_path / "c/manifest.json").read_text())["metrics"]
        assert set(summary) == {"gp", "vanilla"}


class TestErrors:
    def test_unknown_variant(self, cfg_path, tmp_path):
        assert main(["ablate", "--config", str(cfg_path), "--variant", "nope", "--out", str(tmp_path)]) == 2

    def test_unknown_setup(self, cfg_path, tmp_path):
        assert main(["bench-score", "--config", str(cfg_path), "--setup", "gp9d", "--out", str(tmp_path)]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["gen-env", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path)]) == 2

    def test_missing_csv_named(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text("[env]\nkind = 'csv'\ntrain_paths = ['missing_task.csv']\n")
        assert main(["train-score", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        assert "missing_task.csv" in capsys.readouterr().err

    def test_bad_usage(self, tmp_path):
        assert main(["train-score"]) == 2
        assert main(["frobnicate"]) == 2

    def test_dimension_mismatch(self, cfg_path, tmp_path):
        assert main(["train-score", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 0
        (tmp_path / "t.csv").write_text("x,x2,y\n0,1,2\n1,2,3\n")
        cfg2 = tmp_path / "two.toml"
        cfg2.write_text(TINY.replace("test_points = 10", "test_points = 10\ninput_cols = ['x', 'x2']"))
        assert main(["infer", "--config", str(cfg2), "--model", str(tmp_path / "m/score_net.json"),
                     "--task", str(tmp_path / "t.csv"), "--out", str(tmp_path / "p")]) == 2

    def test_missing_model(self, cfg_path, tmp_path):
        (tmp_path / "t.csv").write_text("x,y\n0,1\n")
        assert main(["infer", "--config", str(cfg_path), "--model", str(tmp_path / "none.json"),
                     "--task", str(tmp_path / "t.csv"), "--out", str(tmp_path / "p")]) == 2

    def test_timings_reported_on_stderr(self, cfg_path, tmp_path, capsys):
        assert main(["gen-env", "--config", str(cfg_path), "--out", str(tmp_path / "e")]) == 0
        assert "timings" in capsys.readouterr().err
        assert "timings" not in json.loads((tmp_path / "e/manifest.json").read_text())

    def test_numeric_failure_exit_code(self, cfg_path, tmp_path, monkeypatch):
        import mars.cli as cli

        def boom(*a, **k):
            raise ArithmeticError("diverged")

        monkeypatch.setattr(cli, "build_problem", boom)
        assert main(["train-score", "--config", str(cfg_path), "--out", str(tmp_path / "m")]) == 3
