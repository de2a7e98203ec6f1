import hashlib
import json
import shutil
import subprocess

import numpy as np
import pytest

from mlayer import cli
from mlayer.layer import Dims, MLayerParams, load_model, save_model, to_json
from mlayer.tasks import dataset_from_csv

from test_tasks import fake_mnist


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture(scope="module")
def spiral_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("spiral")
    model = root / "spiral.json"
    code = cli.main(["train", "--preset", "spiral-wide", "--out", str(model), "--quiet"])
    assert code == 0
    return model


class TestGen:
    def test_spirals(self, workdir, capsys):
        code, out, _ = run(["gen", "spirals", "--out", "s.csv", "--seed", "3"], capsys)
        assert code == 0
        lines = (workdir / "s.csv").read_text().splitlines()
        assert len(lines) == 2001 and lines[0] == "x0,x1,label"
        manifest = json.loads((workdir / "s.manifest.json").read_text())
        assert manifest["command"] == "gen" and manifest["seed"] == 3

    def test_same_seed_same_hash(self, workdir, capsys):
        for name in ("a.csv", "b.csv"):
            assert run(["gen", "det3", "--n", "500", "--seed", "7", "--out", name], capsys)[0] == 0
        ha = hashlib.sha256((workdir / "a.csv").read_bytes()).hexdigest()
        hb = hashlib.sha256((workdir / "b.csv").read_bytes()).hexdigest()
        assert ha == hb

    def test_det5_rows(self, workdir, capsys):
        assert run(["gen", "det5", "--n", "4096", "--out", "d5.csv"], capsys)[0] == 0
        ds = dataset_from_csv(workdir / "d5.csv")
        assert len(ds) == 4096 and ds.n_features == 25

    def test_periodic_writes_both_splits(self, workdir, capsys):
        assert run(["gen", "periodic:1", "--spacing", "0.01", "--out", "p.csv"], capsys)[0] == 0
        assert len(dataset_from_csv(workdir / "p.csv")) == 201
        assert len(dataset_from_csv(workdir / "p-test.csv")) == 401

    def test_unknown_task(self, workdir, capsys):
        code, _, err = run(["gen", "mandelbrot", "--out", "x.csv"], capsys)
        assert code == 2 and "mandelbrot" in err


class TestConfig:
    def test_invalid_matrix_size(self, workdir, capsys):
        code, _, err = run(["train", "--preset", "det3", "--n", "0", "--out", "m.json"], capsys)
        assert code == 2 and "'n'" in err

    def test_config_file_inherits_preset(self, workdir):
        (workdir / "c.cfg").write_text("# small run\npreset = det3\nn = 6\nlearning_rate = 2e-3\n")
        cfg = cli.resolve_config(config_file="c.cfg")
        assert cfg["n"] == 6 and cfg["d"] == 9 and cfg["learning_rate"] == 2e-3
        assert cfg["max_epochs"] == 256

    def test_config_file_bad_value(self, workdir, capsys):
        (workdir / "c.cfg").write_text("preset = det3\nbatch_size = many\n")
        code, _, err = run(["train", "--config", "c.cfg", "--out", "m.json"], capsys)
        assert code == 2 and "batch_size" in err

    def test_unknown_key(self, workdir, capsys):
        (workdir / "c.cfg").write_text("preset = det3\ndropout = 0.5\n")
        code, _, err = run(["train", "--config", "c.cfg", "--out", "m.json"], capsys)
        assert code == 2 and "dropout" in err

    def test_unknown_preset(self, workdir, capsys):
        assert run(["train", "--preset", "imagenet", "--out", "m.json"], capsys)[0] == 2

    def test_presets_valid(self):
        for name in cli.PRESETS:
            cli.train_config(cli.resolve_config(name))


class TestTrain:
    def test_small_determinant_run(self, workdir, capsys):
        code, out, _ = run(["train", "--preset", "det3", "--train-size", "512", "--epochs", "2",
                            "--n", "4", "--out", "m.json", "--seed", "1"], capsys)
        assert code == 0
        assert "parameters: 267" in out
        for name in ("m.json", "m.metrics.csv", "m.manifest.json"):
            assert (workdir / name).exists()
        assert len((workdir / "m.metrics.csv").read_text().splitlines()) == 3
        manifest = json.loads((workdir / "m.manifest.json").read_text())
        assert manifest["config"]["n"] == 4 and manifest["seed"] == 1

    def test_manifest_hash_is_git_blob(self, workdir, capsys):
        assert run(["compile", "x0*x1", "--out", "c.json"], capsys)[0] == 0
        manifest = json.loads((workdir / "c.manifest.json").read_text())
        data = (workdir / "c.json").read_bytes()
        want = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        assert manifest["outputs"]["c.json"] == want
        if shutil.which("git"):
            got = subprocess.run(["git", "hash-object", "c.json"], capture_output=True, text=True,
                                 cwd=workdir).stdout.strip()
            assert got == want

    def test_mnist_preset_parameter_count(self, workdir, capsys, monkeypatch):
        data = workdir / "data"
        data.mkdir()
        fake_mnist(data, n_train=20, n_test=10)
        monkeypatch.setenv("MLAYER_DATA_DIR", str(data))
        code, out, _ = run(["train", "--preset", "mnist", "--epochs", "1", "--out", "mn.json",
                            "--quiet"], capsys)
        assert code == 0
        assert "parameters: 68885" in out

    def test_missing_dataset(self, workdir, capsys, monkeypatch):
        monkeypatch.setenv("MLAYER_DATA_DIR", str(workdir / "nowhere"))
        code, _, err = run(["train", "--preset", "mnist", "--out", "mn.json"], capsys)
        assert code == 3 and "data error" in err

    def test_divergence_exit_code(self, workdir, capsys):
        (workdir / "c.cfg").write_text("preset = det3\nlearning_rate = 1e6\noptimizer = sgd\n"
                                       "train_size = 256\nmax_epochs = 5\ninit_sigma = 1\n")
        code, _, err = run(["train", "--config", "c.cfg", "--out", "m.json", "--quiet"], capsys)
        assert code == 4 and "epoch" in err

    def test_periodic_curve_samples(self, workdir, capsys):
        code, _, _ = run(["train", "--preset", "periodic", "--epochs", "1", "--spacing", "0.05",
                          "--out", "p.json", "--quiet"], capsys)
        assert code == 0
        lines = (workdir / "p.curve.csv").read_text().splitlines()
        assert lines[0] == "x,target,prediction" and len(lines) == 1 + 41 + 81


class TestEval:
    def test_spiral_training_accuracy(self, spiral_run, workdir, capsys):
        code, out, _ = run(["eval", spiral_run, "spirals", "--out", "e.csv"], capsys)
        assert code == 0
        assert "accuracy: 1.000000" in out
        conf = (workdir / "e.eval.confusion.csv").read_text().splitlines()
        assert conf == ["true,pred0,pred1", "0,1000,0", "1,0,1000"]

    def test_boundary_grid(self, spiral_run):
        lines = spiral_run.with_suffix(".boundary.csv").read_text().splitlines()
        assert lines[0] == "x,y,p1" and len(lines) == 1 + 400 * 400

    def test_zero_predictor_on_determinants(self, workdir, capsys):
        save_model("zero.json", MLayerParams.zeros(Dims(9, 1, 1, 1)))
        code, out, _ = run(["eval", "zero.json", "det3"], capsys)
        assert code == 0
        mse = float(out.split("mse:")[1])
        assert mse == pytest.approx(2 / 9, abs=0.01)

    def test_untrained_mnist_at_chance(self, workdir, capsys, monkeypatch):
        from mlayer.layer import init_standard
        data = workdir / "data"
        data.mkdir()
        fake_mnist(data, n_train=10, n_test=2000)
        monkeypatch.setenv("MLAYER_DATA_DIR", str(data))
        save_model("u.json", init_standard(Dims(784, 35, 30, 10), 0))
        code, out, _ = run(["eval", "u.json", "mnist"], capsys)
        assert code == 0
        assert abs(float(out.split("accuracy:")[1]) - 0.1) <= 0.05

    def test_dimension_mismatch(self, workdir, capsys):
        save_model("z.json", MLayerParams.zeros(Dims(4, 1, 1, 1)))
        code, _, err = run(["eval", "z.json", "det3"], capsys)
        assert code == 2 and "p=4" in err

    def test_missing_model(self, workdir, capsys):
        assert run(["eval", "absent.json", "det3"], capsys)[0] == 3

    def test_corrupt_model(self, workdir, capsys):
        (workdir / "bad.json").write_text('{"version": 1, "dims": ')
        assert run(["eval", "bad.json", "det3"], capsys)[0] == 3


class TestCertify:
    def test_certify_with_audit(self, spiral_run, workdir, capsys):
        code, out, _ = run(["certify", spiral_run, "spirals", "--out", "c.csv", "--limit", "150",
                            "--audit", "--audit-examples", "100"], capsys)
        assert code == 0
        assert "audit: 0 violations over 100 examples" in out
        rows = (workdir / "c.csv").read_text().splitlines()
        assert rows[0] == "example_id,margin,delta_in,s_norm,m_norm,radius"
        assert len(rows) == 151
        hist = (workdir / "c.hist.csv").read_text().splitlines()
        assert hist[0] == "lower,upper,count"
        assert sum(int(r.split(",")[2]) for r in hist[1:]) == 150

    def test_misclassified_excluded(self, workdir, capsys):
        from mlayer.layer import init_standard
        params = init_standard(Dims(2, 3, 2, 2), 0)
        save_model("r.json", params)
        assert run(["certify", "r.json", "spirals", "--out", "c.csv"], capsys)[0] == 0
        from mlayer.tasks import gen_spirals
        from mlayer.layer import forward
        ds = gen_spirals(seed=0)
        correct = set(np.nonzero(forward(params, ds.inputs).argmax(1) == ds.targets)[0].tolist())
        ids = {int(r.split(",")[0]) for r in (workdir / "c.csv").read_text().splitlines()[1:]}
        assert ids == correct

    def test_regression_model_rejected(self, workdir, capsys):
        save_model("z.json", MLayerParams.zeros(Dims(9, 1, 1, 1)))
        code, _, err = run(["certify", "z.json", "det3", "--out", "c.csv"], capsys)
        assert code == 2 and "classification" in err


class TestCompile:
    def test_feature_cross(self, workdir, capsys):
        code, out, _ = run(["compile", "x0*x1 + x1*x2^2", "--out", "c.json"], capsys)
        assert code == 0 and "matrix size: 7" in out
        params, extra = load_model("c.json")
        assert extra["term_cells"] == [[0, 0, 2], [3, 3, 6]]

    def test_det3_builtin(self, workdir, capsys):
        code, out, _ = run(["compile", "det3", "--out", "d.json"], capsys)
        assert code == 0 and "matrix size: 8" in out
        params, _ = load_model("d.json")
        from mlayer.layer import forward
        A = np.array([[2.0, 0, 1], [1, 3, 0], [0, 1, 4]])
        assert forward(params, A.ravel())[0] == pytest.approx(np.linalg.det(A))

    def test_constant_rejected(self, workdir, capsys):
        code, _, err = run(["compile", "4", "--out", "k.json"], capsys)
        assert code == 2 and "degree" in err

    def test_parse_error_pointer(self, workdir, capsys):
        code, _, err = run(["compile", "x0 + * x1", "--out", "k.json"], capsys)
        assert code == 2
        lines = err.splitlines()
        assert lines[1] == "x0 + * x1" and lines[2] == "     ^"

    def test_model_file_round_trip(self, workdir, capsys):
        run(["compile", "3.5*x0^2*x1 - x2 + 4", "--out", "c.json"], capsys)
        text = (workdir / "c.json").read_text()
        params, extra = load_model("c.json")
        assert to_json(params, extra) == text


def test_usage_error_exit_code(capsys):
    assert cli.main(["frobnicate"]) == 2
