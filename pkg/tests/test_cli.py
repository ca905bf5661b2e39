import csv
import json

import pytest

from wisernet.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, RUN_MANIFEST, main


def run(*argv):
    return main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


TINY = ["--n", 6, "--n-val", 3, "--n-test", 3, "--n-target", 3, "--size", 32]
QUICK = ["--epochs", 1, "--patience", 1, "--input-size", 32, "--batch-size", 4]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("generate", "--out", out, "--targets", "shift_mild,shift_color", *TINY, "--seed", 2) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--out", out, "--data", data, *QUICK, "--epochs", 2, "--patience", 2) == EXIT_OK
    return out


def test_generate_layout_and_determinism(data, tmp_path):
    for name in ("source", "shift_mild", "shift_color"):
        assert (data / name / "manifest.txt").is_file()
    assert len(list((data / "source" / "images").glob("train_*.png"))) == 6
    assert len(list((data / "shift_mild" / "masks").glob("*.png"))) == 3
    assert run("generate", "--out", tmp_path, "--targets", "shift_mild,shift_color", *TINY, "--seed", 2) == EXIT_OK
    assert (tmp_path / "dataset_hashes.txt").read_text() == (data / "dataset_hashes.txt").read_text()
    manifest = json.loads((data / RUN_MANIFEST).read_text())
    assert manifest["command"] == "generate" and manifest["status"] == "ok" and manifest["exit_code"] == 0


def test_train_outputs(trained):
    for name in ("config.txt", "model.ckpt", "history.csv", "timings.csv", RUN_MANIFEST):
        assert (trained / name).is_file(), name
    assert len(read_rows(trained / "history.csv")) >= 1
    manifest = json.loads((trained / RUN_MANIFEST).read_text())
    assert manifest["config"]["epochs"] == 2 and manifest["source_revision"].startswith("wisernet ")


def test_eval_outputs(data, trained, tmp_path):
    code = run("eval", "--out", tmp_path, "--checkpoint", trained / "model.ckpt",
               "--domains", data / "source", data / "shift_mild", "--split", "test", "--overlays")
    assert code == EXIT_OK
    assert len(read_rows(tmp_path / "metrics_source.csv")) == 3
    summary = read_rows(tmp_path / "summary.csv")
    assert [r["domain"] for r in summary] == ["source", "shift_mild"]
    assert len(list((tmp_path / "overlays" / "source").glob("*.png"))) == 3


def test_distances_with_baseline(data, trained, tmp_path):
    base = tmp_path / "base"
    assert run("train", "--out", base, "--data", data, *QUICK, "--wiser", "off", "--ds", "off") == EXIT_OK
    out = tmp_path / "dist"
    code = run("distances", "--out", out, "--checkpoint", trained / "model.ckpt", "--baseline", base / "model.ckpt",
               "--source", data / "source", "--split", "test", "--target", data / "shift_mild", data / "shift_color")
    assert code == EXIT_OK
    rows = read_rows(out / "distances.csv")
    assert list(rows[0]) == ["pair", "space", "mmd", "jsd", "frechet"]
    assert len(rows) == 6
    assert len(read_rows(out / "distances_compare.csv")) == 3 * 3


def test_ablate_is_byte_deterministic(data, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"a{k}"
        assert run("ablate", "--out", out, "--data", data, "--seeds", 1, *QUICK, "--no-checkpoints") == EXIT_OK
        outs.append(out)
    for name in ("ablation.csv", "ablation_per_seed.csv", "distances.csv", "distances_compare.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    rows = read_rows(outs[0] / "ablation.csv")
    assert len(rows) == 3 * 3  # configs x (source + 2 targets)


def test_replay_reproduces_a_run(data, trained, tmp_path):
    assert run("train", "--replay", trained / RUN_MANIFEST, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_exit_codes(data, tmp_path, capsys):
    assert run("train", "--data", data) == EXIT_USAGE
    assert run("train", "--out", tmp_path / "x", "--data", data, "--epochs", 2) == EXIT_USAGE  # patience 5 > 2
    assert run("generate", "--out", tmp_path / "g", "--source", "nosuch") == EXIT_USAGE
    assert run("train", "--out", tmp_path / "y", "--data", tmp_path / "missing", *QUICK) == EXIT_IO
    assert run("eval", "--out", tmp_path / "z", "--checkpoint", tmp_path / "none.ckpt", "--domains", data) == EXIT_IO
    assert run("bogus") == EXIT_USAGE
    failed = json.loads((tmp_path / "y" / RUN_MANIFEST).read_text())
    assert failed["status"] != "ok" and failed["exit_code"] == EXIT_IO
    assert "missing required flags --out" in capsys.readouterr().err


def test_verify_quick_writes_csv(tmp_path):
    assert run("verify", "--quick", "--out", tmp_path) == EXIT_OK
    rows = read_rows(tmp_path / "verify.csv")
    assert rows and all(r["status"] == "PASS" for r in rows)
