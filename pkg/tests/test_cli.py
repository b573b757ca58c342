import subprocess
import sys

import pytest

from mtdskit.artifact import load_artifact
from mtdskit.cli import main
from mtdskit.data import load_forecast_csv, load_posteriors_csv, load_sequences_csv, load_truth_csv

SMALL = [
    "model.kind=pd", "model.n_y=1", "synth.N=4", "synth.T=40", "synth.k=1",
    "train.k=1", "train.n_iters=30", "train.batch_size=4", "train.log_every=10",
    "adais.M=200", "adais.M_ess=50", "adais.N_adais=3", "adais.J=1", "adais.thin=10",
    "forecast.samples=50", "eval.anchors=20", "eval.horizons=10", "eval.forecast_samples=50",
]


def run(cmd, out, *extra, config=None):
    argv = [cmd, "--out", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    for s in SMALL + list(extra):
        argv += ["--set", s]
    return main(argv)


def pipeline(root):
    """synth, train, filter, forecast and eval into ``root``; returns the file paths."""
    data = root / "data.csv"
    model = root / "model.mtds"
    assert run("synth", root) == 0
    assert run("train", root, f"data.path={data}") == 0
    paths = [f"data.path={data}", f"artifact.path={model}", "filter.seq_id=s1"]
    assert run("filter", root, *paths) == 0
    assert run("forecast", root, *paths, "forecast.anchor=20", "forecast.horizon=5") == 0
    assert run("eval", root, *paths) == 0
    return ["data.csv", "truth.csv", "train_log.csv", "model.mtds", "posteriors.csv", "forecast.csv", "report.csv"]


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    return pipeline(a), a, b, pipeline(b)


class TestPipeline:
    def test_outputs_and_schemas(self, pipeline_dirs):
        files, a, _, _ = pipeline_dirs
        for f in files:
            assert (a / f).exists(), f
        ds = load_sequences_csv(a / "data.csv")
        assert len(ds) == 4 and ds[0].T == 40
        ids, Z, Theta = load_truth_csv(a / "truth.csv")
        assert ids == list(ds.seq_ids) and Z.shape == (4, 1)
        art = load_artifact(a / "model.mtds")
        assert art.gen.k == 1 and set(art.posteriors) == set(ds.seq_ids)
        post = load_posteriors_csv(a / "posteriors.csv")
        assert [t for t, _ in post] == [0, 10, 20, 30, 40]
        rows = load_forecast_csv(a / "forecast.csv")
        assert [(r[0], r[1], r[2]) for r in rows] == [("s1", t, 0) for t in range(20, 25)]
        assert all(r[4] <= r[3] <= r[5] for r in rows)
        report = (a / "report.csv").read_text().splitlines()
        assert report[0] == "fold,seq_id,anchor,horizon,channel,rmse"
        assert len(report) == 1 + 4 * 2

    def test_byte_identical_reruns(self, pipeline_dirs):
        files, a, b, _ = pipeline_dirs
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_log_has_no_wallclock(self, pipeline_dirs):
        _, a, _, _ = pipeline_dirs
        lines = (a / "train_log.csv").read_text().splitlines()
        assert lines[0].startswith("iter,") and all(line.endswith(",0") for line in lines[1:])


class TestChecks:
    def test_kalman_check(self, tmp_path, capsys):
        assert run("kalman-check", tmp_path, "kalman.n_models=3", "kalman.T=200") == 0
        assert "max per-step" in capsys.readouterr().out
        assert len((tmp_path / "kalman_check.csv").read_text().splitlines()) == 4

    def test_kalman_check_failure_exit_2(self, tmp_path, capsys):
        assert run("kalman-check", tmp_path, "kalman.n_models=2", "kalman.T=200", "kalman.threshold=1e-300") == 2
        assert "numerical failure" in capsys.readouterr().err

    def test_grad_check(self, tmp_path, capsys):
        assert run("grad-check", tmp_path, "grad.instances=2", "grad.T=10", "grad.models=lds,pd") == 0
        out = capsys.readouterr().out
        assert "lds: max relative error" in out and "pd: max relative error" in out

    def test_determinism_of_checks(self, tmp_path):
        for sub in ("x", "y"):
            assert run("kalman-check", tmp_path / sub, "kalman.n_models=2", "kalman.T=150") == 0
            assert run("grad-check", tmp_path / sub, "grad.instances=1", "grad.T=8") == 0
        for f in ("kalman_check.csv", "grad_check.csv"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


class TestLoo:
    def test_loo_deterministic(self, tmp_path):
        assert run("synth", tmp_path, "synth.N=3", "synth.T=30") == 0
        extra = [f"data.path={tmp_path / 'data.csv'}", "eval.methods=pooled,pooled_alpha", "eval.anchors=10", "eval.horizons=5"]
        for sub in ("x", "y"):
            assert run("loo", tmp_path / sub, *extra) == 0
        for m in ("pooled", "pooled_alpha"):
            a = (tmp_path / "x" / f"report_{m}.csv").read_bytes()
            assert a == (tmp_path / "y" / f"report_{m}.csv").read_bytes()
            assert len(a.decode().splitlines()) == 1 + 3 * 2


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_help_is_success(self, capsys):
        assert main(["--help"]) == 0

    def test_unknown_key(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--set", "synth.NN=3"]) == 1
        assert "synth.NN" in capsys.readouterr().err

    def test_bad_config_line(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("seed = 1\nseed 2\n")
        assert main(["synth", "--out", str(tmp_path), "--config", str(cfg)]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_missing_required_key(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path)]) == 1
        assert "data.path" in capsys.readouterr().err

    def test_missing_data_file(self, tmp_path, capsys):
        assert main(["train", "--out", str(tmp_path), "--set", f"data.path={tmp_path / 'none.csv'}"]) == 1

    def test_malformed_data(self, tmp_path, capsys):
        (tmp_path / "d.csv").write_text("seq_id,t,u0,y0\na,0,1,2\na,0,1,2\n")
        assert main(["train", "--out", str(tmp_path), "--set", f"data.path={tmp_path / 'd.csv'}"]) == 1
        assert "line 3" in capsys.readouterr().err

    def test_pd_needs_one_input(self, tmp_path, capsys):
        (tmp_path / "d.csv").write_text("seq_id,t,u0,u1,y0\na,0,1,2,3\n")
        args = ["train", "--out", str(tmp_path), "--set", f"data.path={tmp_path / 'd.csv'}", "--set", "model.kind=pd"]
        assert main(args) == 1

    def test_unknown_seq_id(self, pipeline_dirs, tmp_path, capsys):
        _, a, _, _ = pipeline_dirs
        paths = [f"data.path={a / 'data.csv'}", f"artifact.path={a / 'model.mtds'}", "filter.seq_id=zzz"]
        assert run("filter", tmp_path, *paths) == 1
        assert "zzz" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "mtdskit.cli", "kalman-check", "--out", str(tmp_path), "--set", "kalman.n_models=1"],
        capture_output=True, text=True,
    )
    assert res.returncode == 0 and (tmp_path / "kalman_check.csv").exists()
