import re
import subprocess
import sys

import numpy as np
import pytest

from glefld import ops
from glefld.cli import main
from glefld.data import PRESENT_SLOTS, SLOTS, load_annotations
from glefld.rasters import read_pgm, read_ppm
from glefld.train import load_checkpoint

ERROR_LINE = re.compile(r"^error: [a-z]+: \S.*$")

TRAIN_FLAGS = ["--input-size", "32", "--width", "1/16", "--k", "1", "--batch-size", "4", "--seed", "3"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--n", "12", "--size", "32", "--seed", "5", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--steps", "6", "--checkpoint-every", "3",
                 *TRAIN_FLAGS]) == 0
    return out


def test_gen_data_contract_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out, _ = run(["gen-data", "--n", "64", "--size", "64", "--seed", "7", "--out", str(a)], capsys)
    assert code == 0 and "64" in out
    assert len(list((a / "images").glob("*.ppm"))) == 64
    assert len(load_annotations(a / "annotations.txt")) == 64
    assert main(["gen-data", "--n", "64", "--size", "64", "--seed", "7", "--out", str(b)]) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_gen_data_too_small(tmp_path, capsys):
    code, _, err = run(["gen-data", "--n", "2", "--size", "16", "--out", str(tmp_path)], capsys)
    assert code != 0
    assert "image_size too small" in err and ERROR_LINE.match(err.strip())


def test_gen_data_unwritable_path(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(["gen-data", "--n", "2", "--size", "32", "--out", str(blocker / "sub")], capsys)
    assert code == 1 and err.startswith("error: io:") and len(err.strip().splitlines()) == 1


def test_usage_error_is_single_line(capsys):
    code, _, err = run(["train", "--k", "two"], capsys)
    assert code == 2 and ERROR_LINE.match(err.strip()) and err.startswith("error: usage:")


def test_train_outputs(trained):
    assert (trained / "final.ckpt").exists()
    assert (trained / "resolved.cfg").exists()
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["step_000003.ckpt", "step_000006.ckpt"]
    rows = (trained / "loss.log").read_text().splitlines()
    assert [int(r.split()[0]) for r in rows] == [1, 2, 3, 4, 5, 6]
    assert all(float(r.split()[1]) >= 0 for r in rows)
    resolved = (trained / "resolved.cfg").read_text()
    assert "width = 0.0625" in resolved and "k = 1" in resolved and "sigma = \n" in resolved


def test_config_file_with_flag_override(tmp_path, dataset):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[network]\ninput_size = 32\nwidth = 1/16\nk = 3\n\n[optimizer]\nbatch_size = 4\n"
                   "learning_rate = 0.002\n\n[run]\nsteps = 1\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(out), "--k", "1"]) == 0
    meta = load_checkpoint(out / "final.ckpt").meta
    assert meta["network"]["k"] == 1 and meta["optimizer"]["learning_rate"] == 0.002


def test_bad_config_key(tmp_path, dataset, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("[network]\ndepth = 3\n")
    code, _, err = run(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path)], capsys)
    assert code == 1 and err.startswith("error: config:") and "depth" in err


def test_train_k_difference_is_one_module(tmp_path, dataset):
    tables = {}
    for k in (2, 3):
        out = tmp_path / f"k{k}"
        flags = [f if f != "1" or i != TRAIN_FLAGS.index("--k") + 1 else str(k) for i, f in enumerate(TRAIN_FLAGS)]
        assert main(["train", "--data", str(dataset), "--out", str(out), "--steps", "1", *flags]) == 0
        tables[k] = set(load_checkpoint(out / "final.ckpt").network_tensors())
    assert tables[2] < tables[3]
    assert {n.split(".")[2] for n in tables[3] - tables[2]} == {"2"}
    assert all(n.startswith("gle.modules.2.") for n in tables[3] - tables[2])


def test_train_is_deterministic(tmp_path, dataset, trained):
    out = tmp_path / "again"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--steps", "6", "--checkpoint-every", "3",
                 *TRAIN_FLAGS]) == 0
    a, b = tree_bytes(out), tree_bytes(trained)
    strip = lambda raw: [ln for ln in raw.decode().splitlines() if not ln.startswith("out = ")]
    assert strip(a.pop("resolved.cfg")) == strip(b.pop("resolved.cfg"))
    assert a == b


def test_resume_continues_loss_log_bitwise(tmp_path, dataset, trained):
    out = tmp_path / "part"
    base = ["train", "--data", str(dataset), "--out", str(out), "--checkpoint-every", "3", *TRAIN_FLAGS]
    assert main(base + ["--steps", "3"]) == 0
    assert main(base + ["--steps", "6", "--resume", str(out / "checkpoints" / "step_000003.ckpt")]) == 0
    assert (out / "loss.log").read_bytes() == (trained / "loss.log").read_bytes()
    assert (out / "final.ckpt").read_bytes() == (trained / "final.ckpt").read_bytes()


def test_non_finite_loss_aborts_with_last_good_checkpoint(tmp_path, dataset, capsys):
    out = tmp_path / "nan"
    code, _, err = run(["train", "--data", str(dataset), "--out", str(out), "--steps", "3", "--lr", "1e300",
                        "--optimizer", "sgd_momentum", *TRAIN_FLAGS], capsys)
    assert code == 1 and err.startswith("error: training: step ")
    ckpt = load_checkpoint(out / "last_good.ckpt")
    assert all(np.isfinite(v).all() for v in ckpt.tensors.values())


def test_eval_report(trained, dataset, capsys, tmp_path):
    code, out, _ = run(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset),
                        "--out", str(tmp_path)], capsys)
    assert code == 0
    header = out.splitlines()[0]
    assert [h.strip() for h in header.split("|")][1:] == list(SLOTS) + ["Avg."]
    record = (tmp_path / "eval_report.txt").read_text()
    assert "metric = per-axis" in record and "config_hash = " in record


def test_eval_category_filter_renders_missing_columns(trained, dataset, capsys, tmp_path):
    code, out, _ = run(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset),
                        "--category", "lower", "--out", str(tmp_path)], capsys)
    assert code == 0
    cells = [c.strip() for c in out.splitlines()[2].split("|")]
    assert cells[1:5] == ["-"] * 4 and cells[5] != "-"


def test_eval_literal_switch(trained, dataset, capsys, tmp_path):
    run(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset), "--out", str(tmp_path)],
        capsys)
    plain = dict(line.split(" = ") for line in (tmp_path / "eval_report.txt").read_text().splitlines())
    run(["eval", "--checkpoint", str(trained / "final.ckpt"), "--data", str(dataset), "--out", str(tmp_path),
         "--literal-area"], capsys)
    literal = dict(line.split(" = ") for line in (tmp_path / "eval_report.txt").read_text().splitlines())
    assert literal["metric"] == "literal-area"
    # square 32 px inputs: literal = pixel distance / 1024, per-axis = pixel distance / 32
    assert float(literal["Avg."]) == pytest.approx(float(plain["Avg."]) / 32, rel=1e-12)


def test_predict_outputs(trained, dataset, tmp_path, capsys):
    out = tmp_path / "pred"
    code, _, _ = run(["predict", "--checkpoint", str(trained / "final.ckpt"), "--out", str(out), "--dump-heatmaps",
                      str(dataset / "images" / "img_00000.ppm")], capsys)
    assert code == 0
    assert len(list(out.glob("*.coords.txt"))) == 1 and len(list(out.glob("*.overlay.ppm"))) == 1
    maps = sorted(out.glob("*.pgm"))
    assert len(maps) == 8 and read_pgm(maps[0]).shape == (32, 32)


def test_predict_marks_exactly_the_category_slots(trained, dataset, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(trained / "final.ckpt"), "--out", str(out),
                 "--data", str(dataset)]) == 0
    for ann in load_annotations(dataset / "annotations.txt"):
        rows = (out / f"{ann.image_id}.coords.txt").read_text().splitlines()[1:]
        marked = {i for i, r in enumerate(rows) if r.split()[3] == "1"}
        assert marked == PRESENT_SLOTS[ann.category]
        overlay = read_ppm(out / f"{ann.image_id}.overlay.ppm")
        original = read_ppm(dataset / "images" / f"{ann.image_id}.ppm")
        changed = np.any(overlay != original, axis=-1)
        assert changed.any()


def test_gradcheck_echoes_thresholds(capsys):
    code, out, _ = run(["gradcheck", "--eps", "1e-5", "--tol", "1e-4", "--case", "relu", "--case", "conv2d"],
                       capsys)
    assert code == 0
    assert "eps = 1e-05" in out and "tol = 0.0001" in out
    assert re.search(r"^conv2d\s+\S+ ok$", out, re.M)


def test_gradcheck_detects_injected_sign_error(monkeypatch, capsys):
    original = ops._relu_backward
    monkeypatch.setattr(ops, "_relu_backward", lambda *a, **k: tuple(-g for g in original(*a, **k)))
    code, out, err = run(["gradcheck", "--case", "relu"], capsys)
    assert code == 1 and "FAIL" in out and err.startswith("error: gradcheck:")


def test_threads_env_validation(monkeypatch, capsys):
    monkeypatch.setenv("GLE_THREADS", "zero")
    code, _, err = run(["gradcheck", "--case", "relu"], capsys)
    assert code == 1 and err.startswith("error: config: GLE_THREADS")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "glefld", "gen-data", "--n", "1", "--size", "8",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1
    assert ERROR_LINE.match(proc.stderr.strip())
