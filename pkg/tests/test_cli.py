import csv
import subprocess
import sys

import numpy as np
import pytest

from gazenet.analysis import read_records_csv, write_records_csv
from gazenet.cli import main
from gazenet.geometry import mask_centroid
from gazenet.synth import read_pgm

from records import make_records


def rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(out), "--persons", "3", "--per-person", "6", "--seed", "1"]) == 0
    return out


def test_gen_data(data_dir, tmp_path):
    index = rows(data_dir / "index.csv")
    assert index[0] == ["filename", "person_id", "gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw"]
    assert len(index) == 19
    again = tmp_path / "again"
    assert main(["gen-data", "--out", str(again), "--persons", "3", "--per-person", "6", "--seed", "1"]) == 0
    for p in data_dir.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes()


def test_gen_data_custom_size(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--persons", "2", "--per-person", "1", "--seed", "0",
                 "--width", "150", "--height", "90"]) == 0
    assert read_pgm(tmp_path / "p0_0.pgm").shape == (90, 150)
    assert main(["gen-data", "--out", str(tmp_path), "--persons", "2", "--per-person", "1", "--seed", "0",
                 "--width", "100", "--height", "90"]) == 1


def test_render_gazemaps(tmp_path):
    assert main(["render-gazemaps", "--pitch-deg", "0", "--yaw-deg", "0", "--out", str(tmp_path)]) == 0
    iris = read_pgm(tmp_path / "gazemap_iris.pgm")
    ball = read_pgm(tmp_path / "gazemap_eyeball.pgm")
    assert iris.shape == (45, 75) and set(np.unique(iris)) == {0, 255}
    u, v = mask_centroid(iris > 0)
    assert abs(u - 37.5) <= 0.5 and abs(v - 22.5) <= 0.5
    assert ball.sum() > iris.sum()
    first = (tmp_path / "gazemap_iris.pgm").read_bytes()
    assert main(["render-gazemaps", "--pitch-deg", "0", "--yaw-deg", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "gazemap_iris.pgm").read_bytes() == first


def test_render_gazemaps_yaw_moves_iris(tmp_path):
    assert main(["render-gazemaps", "--pitch-deg", "0", "--yaw-deg", "30", "--out", str(tmp_path)]) == 0
    u, _ = mask_centroid(read_pgm(tmp_path / "gazemap_iris.pgm") > 0)
    assert u < 30


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    argv = ["train", "--data", str(data_dir), "--preset", "desk", "--seed", "4", "--steps", "3",
            "--holdout-person", "2"]
    assert main(argv + ["--out", str(out / "a")]) == 0
    assert main(argv + ["--out", str(out / "b")]) == 0
    assert main(argv + ["--out", str(out / "c"), "--no-gazemap-loss"]) == 0
    return out


def test_train_outputs(trained):
    losses = rows(trained / "a" / "losses.csv")
    assert losses[0] == ["step", "lr", "gaze", "gazemap", "l2", "total"]
    assert [r[0] for r in losses[1:]] == ["1", "2", "3"]
    assert all(float(r[3]) > 0 for r in losses[1:])
    assert (trained / "a" / "weights.gzwt").read_bytes() == (trained / "b" / "weights.gzwt").read_bytes()
    records = read_records_csv(trained / "a" / "eval.csv")
    assert len(records) == 6 and {r.person_id for r in records} == {2}


def test_train_without_gazemap_loss(trained):
    losses = rows(trained / "c" / "losses.csv")
    assert all(float(r[3]) == 0.0 for r in losses[1:])


def test_eval_reproducible(trained, data_dir, tmp_path):
    w = str(trained / "a" / "weights.gzwt")
    for name in ("x", "y"):
        assert main(["eval", "--data", str(data_dir), "--weights", w, "--preset", "desk",
                     "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "x" / "eval.csv").read_bytes() == (tmp_path / "y" / "eval.csv").read_bytes()
    header = rows(tmp_path / "x" / "eval.csv")[0]
    assert header == ["sample_id", "person_id", "gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw",
                      "pred_pitch", "pred_yaw", "error_deg", "contrast", "sharpness"]
    assert main(["analyze", "--eval", str(tmp_path / "x" / "eval.csv"), "--out", str(tmp_path / "an"),
                 "--window", "5", "--stride", "2"]) == 0
    assert len(list((tmp_path / "an").glob("robustness_*.csv"))) == 6


def test_eval_wrong_preset_fails(trained, data_dir, tmp_path):
    w = str(trained / "a" / "weights.gzwt")
    assert main(["eval", "--data", str(data_dir), "--weights", w, "--preset", "paper",
                 "--out", str(tmp_path)]) == 1


def test_cross_validate(data_dir, tmp_path):
    assert main(["cross-validate", "--data", str(data_dir), "--scheme", "kfold:3", "--preset", "desk",
                 "--seed", "0", "--steps", "1", "--folds", "0,2", "--out", str(tmp_path)]) == 0
    summary = rows(tmp_path / "summary.csv")
    assert summary[0] == ["fold", "held_out", "mean_error_deg", "std_error_deg", "samples"]
    assert [r[:2] for r in summary[1:3]] == [["0", "0"], ["2", "2"]]
    assert summary[3][0] == "mean"
    assert float(summary[3][2]) == pytest.approx((float(summary[1][2]) + float(summary[2][2])) / 2)
    for i in (0, 2):
        assert (tmp_path / f"fold_{i}" / "weights.gzwt").is_file()
        assert len(read_records_csv(tmp_path / f"fold_{i}" / "eval.csv")) == 6
    assert not (tmp_path / "fold_1").exists()


def test_cross_validate_bad_inputs(data_dir, tmp_path):
    base = ["cross-validate", "--data", str(data_dir), "--preset", "desk", "--seed", "0", "--out", str(tmp_path)]
    assert main(base + ["--scheme", "kfold:9"]) == 1
    assert main(base + ["--scheme", "holdout"]) == 2
    assert main(base + ["--scheme", "lopo", "--folds", "7"]) == 2


def test_analyze(tmp_path):
    write_records_csv(tmp_path / "eval.csv", make_records(1500))
    assert main(["analyze", "--eval", str(tmp_path / "eval.csv"), "--out", str(tmp_path / "o")]) == 0
    names = sorted(p.name for p in (tmp_path / "o").iterdir())
    assert names == sorted(f"robustness_{f}.csv" for f in
                           ("gaze_pitch", "gaze_yaw", "head_pitch", "head_yaw", "rms_contrast", "sharpness"))
    assert len(rows(tmp_path / "o" / "robustness_sharpness.csv")) == 1 + (1500 - 200) // 20 + 1


def test_params(capsys):
    assert main(["params", "--preset", "paper"]) == 0
    first = capsys.readouterr().out
    assert main(["params", "--preset", "paper"]) == 0
    assert capsys.readouterr().out == first
    total = int([ln for ln in first.splitlines() if ln.startswith("total")][0].split()[-1])
    assert 400_000 <= total <= 1_000_000
    assert "densenet channel trace" in first


def test_usage_errors(capsys, tmp_path):
    assert main(["fly"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["params", "--preset", "paper", "--bogus"]) == 2
    assert main(["params", "--preset", "giant"]) == 2
    assert main([]) == 2


def test_runtime_errors(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--preset", "desk", "--seed", "0",
                 "--out", str(tmp_path / "o")]) == 1
    assert "does not exist" in capsys.readouterr().err
    (tmp_path / "bad.csv").write_text("x\n")
    assert main(["analyze", "--eval", str(tmp_path / "bad.csv"), "--out", str(tmp_path / "o")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gazenet", "params", "--preset", "desk"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "total" in res.stdout
