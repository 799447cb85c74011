import csv
import shutil
import struct
import subprocess
import sys

import numpy as np
import pytest

from cskn import training as tr
from cskn.cli import main
from cskn.features import DenseSpec, InitSchedule, NetworkArchitecture, Variant
from cskn.modelio import load_model, save_model


def write_idx(path, images, labels):
    n, h, w = images.shape
    (path.parent / (path.name + "-images")).write_bytes(
        struct.pack(">IIII", 0x803, n, h, w) + images.astype(np.uint8).tobytes())
    (path.parent / (path.name + "-labels")).write_bytes(
        struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes())
    return str(path.parent / (path.name + "-images")), str(path.parent / (path.name + "-labels"))


def toy_images(n, seed):
    """10 classes on 6x6 images: class c lights up a 2x2 block at one of ten positions."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 10
    pos = [(r, c) for r in (0, 2, 4) for c in (0, 2, 4)] + [(1, 1)]
    X = rng.integers(0, 40, (n, 6, 6))
    for i, c in enumerate(y):
        r, s = pos[c]
        X[i, r:r + 2, s:s + 2] = 255
    return X, y


@pytest.fixture
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("CSKN_OUTPUT_ROOT", str(tmp_path / "out"))
    tri, trl = write_idx(tmp_path / "train", *toy_images(200, 0))
    tei, tel = write_idx(tmp_path / "test", *toy_images(100, 1))
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""
data_format = idx
train_path = {tri}
train_labels_path = {trl}
test_path = {tei}
test_labels_path = {tel}
input_shape = 6,6,1
layers = conv:4:2x2,conv:4:3x3
sigmas = 1.0,0.5
epochs = 3
learning_rate = 0.5
adam_learning_rate = 0.01
lambda1 = 1e-4
lambda2 = 1e-6
output_dir = toy
""")
    return tmp_path, str(cfg), (tei, tel)


def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_train_artifacts(env, capsys):
    tmp, cfg, _ = env
    assert main(["train", "--config", cfg]) == 0
    out = tmp / "out" / "toy"
    rows = read_csv(out / "metrics.csv")
    assert list(rows[0]) == ["repeat", "epoch", "train_loss", "test_accuracy", "nuclear_norm_W",
                             "frobenius_features", "rademacher_bound", "train_accuracy"]
    assert len(rows) == 3
    assert float(rows[-1]["test_accuracy"]) > 0.5
    assert (out / "model_r0.cskn").is_file()
    assert "lambda1 = 0.0001" in (out / "config.resolved").read_text()
    assert "accuracy" in capsys.readouterr().out


def test_train_is_deterministic(env):
    tmp, cfg, _ = env
    main(["train", "--config", cfg])
    first = (tmp / "out" / "toy" / "metrics.csv").read_bytes()
    shutil.rmtree(tmp / "out")
    main(["train", "--config", cfg])
    assert (tmp / "out" / "toy" / "metrics.csv").read_bytes() == first


def test_resolved_snapshot_reproduces(env):
    tmp, cfg, _ = env
    main(["train", "--config", cfg, "--set", "epochs=2"])
    out = tmp / "out" / "toy"
    first = (out / "metrics.csv").read_bytes()
    snap = tmp / "snap.cfg"
    shutil.copy(out / "config.resolved", snap)
    shutil.rmtree(tmp / "out")
    assert main(["train", "--config", str(snap)]) == 0
    assert (out / "metrics.csv").read_bytes() == first


def test_repeats_and_summary(env):
    tmp, cfg, _ = env
    assert main(["train", "--config", cfg, "--repeats", "2", "--set", "epochs=1"]) == 0
    out = tmp / "out" / "toy"
    rows = read_csv(out / "metrics.csv")
    assert [r["repeat"] for r in rows] == ["0", "1"]
    summary = read_csv(out / "summary.csv")
    assert [r["repeat"] for r in summary] == ["0", "1", "mean", "std"]
    acc = [float(r["accuracy"]) for r in summary[:2]]
    assert float(summary[2]["accuracy"]) == pytest.approx(np.mean(acc))
    assert (out / "model_r1.cskn").is_file()


def test_parallel_matches_sequential(env):
    tmp, cfg, _ = env
    main(["train", "--config", cfg, "--repeats", "2", "--set", "epochs=1"])
    seq = (tmp / "out" / "toy" / "metrics.csv").read_bytes()
    shutil.rmtree(tmp / "out")
    assert main(["train", "--config", cfg, "--repeats", "2", "--parallel", "--set", "epochs=1"]) == 0
    assert (tmp / "out" / "toy" / "metrics.csv").read_bytes() == seq


def test_missing_dataset_path(env, capsys):
    _, cfg, _ = env
    assert main(["train", "--config", cfg, "--set", "train_path=/no/such/file"]) == 2
    assert "/no/such/file" in capsys.readouterr().err


@pytest.mark.parametrize("args", [
    ["train", "--set", "bogus=1"],
    ["train", "--config", "/no/config.cfg"],
    ["frobnicate"],
    ["diagnose", "nothing"],
])
def test_usage_errors(args):
    assert main(args) == 2


def test_divergence_exit_code(env, capsys):
    _, cfg, _ = env
    assert main(["train", "--config", cfg, "--set", "learning_rate=1e12", "--set", "lambda1=0"]) == 1
    assert "runtime failure" in capsys.readouterr().err


def test_eval_deterministic_and_csv(env, capsys):
    tmp, cfg, (tei, tel) = env
    main(["train", "--config", cfg])
    model = str(tmp / "out" / "toy" / "model_r0.cskn")
    out_csv = str(tmp / "eval.csv")
    capsys.readouterr()
    assert main(["eval", model, tei, "--labels", tel, "--out", out_csv]) == 0
    a = capsys.readouterr().out
    assert main(["eval", model, tei, "--labels", tel, "--out", out_csv]) == 0
    assert capsys.readouterr().out == a
    rows = read_csv(out_csv)
    assert len(rows) == 2 and rows[0]["accuracy"] == rows[1]["accuracy"]
    # eval replays the training run's final test accuracy
    final = read_csv(tmp / "out" / "toy" / "metrics.csv")[-1]
    assert float(rows[0]["accuracy"]) == pytest.approx(100 * float(final["test_accuracy"]))


def libsvm_file(path, n, classes, d=6, seed=0):
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        x = rng.normal(size=d)
        lines.append(f"{i % classes} " + " ".join(f"{j + 1}:{v!r}" for j, v in enumerate(x.tolist())))
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_eval_class_count_mismatch(tmp_path, capsys):
    arch = NetworkArchitecture((6,), (DenseSpec(5),), Variant.DSKN, 10)
    model = tmp_path / "m.cskn"
    save_model(model, tr.ModelState.fresh(arch, InitSchedule((1.0,), 0)), {"data_format": "libsvm"})
    data = libsvm_file(tmp_path / "seven.libsvm", 70, 7)
    assert main(["eval", str(model), data]) == 2
    assert "7 classes" in capsys.readouterr().err


def test_eval_fresh_model_is_chance(tmp_path, capsys):
    arch = NetworkArchitecture((6,), (DenseSpec(5),), Variant.DSKN, 10)
    data = libsvm_file(tmp_path / "ten.libsvm", 1000, 10)
    accs = []
    for seed in range(5):
        state = tr.ModelState.fresh(arch, InitSchedule((1.0,), seed))
        state.W = np.random.default_rng(seed).normal(0, 1e-3, state.W.shape)
        model = tmp_path / f"m{seed}.cskn"
        save_model(model, state, {"data_format": "libsvm"})
        assert main(["eval", str(model), data]) == 0
        accs.append(float(capsys.readouterr().out.split()[1]))
    # binomial 3-sigma band at n = 1000 is about +-2.8 points
    assert abs(np.mean(accs) - 10.0) <= 3.0


def test_eval_rejects_bad_model(tmp_path):
    bad = tmp_path / "bad.cskn"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    data = libsvm_file(tmp_path / "d.libsvm", 10, 2)
    assert main(["eval", str(bad), data]) == 2


def test_diagnose_decay(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("CSKN_OUTPUT_ROOT", str(tmp_path))
    assert main(["diagnose", "decay", "--set", "schedule=thresholds", "--set", "decay_depth=5",
                 "--set", "output_dir=d"]) == 0
    rows = read_csv(tmp_path / "d" / "decay.csv")
    cf = [float(r["closed_form"]) for r in rows]
    assert len(cf) == 6 and all(b < a for a, b in zip(cf, cf[1:]))
    assert sum(int(r["violations"]) for r in rows) == 0
    assert "violations: 0" in capsys.readouterr().out


def test_diagnose_hoeffding(tmp_path, monkeypatch):
    monkeypatch.setenv("CSKN_OUTPUT_ROOT", str(tmp_path))
    assert main(["diagnose", "hoeffding", "--set", "output_dir=h"]) == 0
    rows = read_csv(tmp_path / "h" / "hoeffding.csv")
    assert len(rows) == 2000
    assert np.mean([int(r["exceeds"]) for r in rows]) <= 0.0646201915172134565


def test_diagnose_bounds(env):
    tmp, cfg, _ = env
    assert main(["diagnose", "bounds", "--config", cfg, "--set", "lipschitz=2"]) == 0
    rows = read_csv(tmp / "out" / "toy" / "bounds.csv")
    assert len(rows) == 3
    r = rows[-1]
    assert float(r["excess_risk_term"]) == pytest.approx(8 * 2 ** 0.5 * float(r["rademacher_bound"]))


def test_gradcheck_default_and_corrupt(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("PASS")
    assert main(["gradcheck", "--corrupt"]) == 1
    assert "FAIL" in capsys.readouterr().out


@pytest.mark.parametrize("variant", ["CNN_RELU", "CRFF", "CDSK"])
def test_gradcheck_variants(variant):
    assert main(["gradcheck", "--set", f"variant={variant}"]) == 0


def test_gradcheck_dense_variant():
    assert main(["gradcheck", "--set", "variant=DSKN", "--set", "input_shape=5",
                 "--set", "layers=dense:4,dense:3"]) == 0


def test_gradcheck_rejects_large_model(capsys):
    assert main(["gradcheck", "--set", "input_shape=28,28,1", "--set", "layers=conv:32:2x2,conv:32:3x3"]) == 2
    assert "parameters" in capsys.readouterr().err


def test_cv_single_cell_deterministic(env, capsys):
    tmp, cfg, _ = env
    args = ["cv", "--config", cfg, "--set", "lambda1_grid=0.001", "--set", "lambda2_grid=1e-5",
            "--set", "epochs=1", "--set", "cv_folds=3"]
    assert main(args) == 0
    assert "best lambda1=0.001 lambda2=1e-05" in capsys.readouterr().out
    first = (tmp / "out" / "toy" / "cv.csv").read_bytes()
    rows = read_csv(tmp / "out" / "toy" / "cv.csv")
    assert [r["fold"] for r in rows] == ["0", "1", "2"]
    assert main(args) == 0
    assert (tmp / "out" / "toy" / "cv.csv").read_bytes() == first


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "cskn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "diagnose", "gradcheck", "cv"):
        assert cmd in out.stdout
