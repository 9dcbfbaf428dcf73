"""End-to-end smoke tests for the command line interface."""

import json

import pytest

from dentdet.cli import (
    EXIT_INVALID,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_USAGE,
    main,
)

SMALL_CFG = (
    "model:\n  grid: 8\n  pool: 2\n  hidden: 16\n  time_dim: 8\n"
    "train:\n  iterations: 3\n  batch_size: 2\n  n_proposals: 8\n"
    "data:\n  count: 2\n"
)


@pytest.fixture()
def cfg_path(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(SMALL_CFG)
    return str(path)


@pytest.fixture()
def dataset(tmp_path, cfg_path):
    data = tmp_path / "data"
    code = main(["--config", cfg_path, "datagen", "--out", str(data),
                 "--seed", "5"])
    assert code == EXIT_OK
    return data


def test_datagen_writes_levels(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert "annotations_quadrant.json" in names
    assert "annotations_quadrant_enumeration.json" in names
    assert "annotations_quadrant_enumeration_diagnosis.json" in names
    assert "images" in names


def test_validate_ok_and_level_mismatch(dataset, cfg_path, capsys):
    ann = str(dataset / "annotations_quadrant.json")
    assert main(["--config", cfg_path, "validate",
                 "--annotations", ann, "--level", "a"]) == EXIT_OK
    assert "ok:" in capsys.readouterr().out
    # Quadrant-only records lack enumeration labels required at level b.
    assert main(["--config", cfg_path, "validate",
                 "--annotations", ann, "--level", "b"]) == EXIT_INVALID


def test_validate_missing_file(cfg_path):
    assert main(["--config", cfg_path, "validate",
                 "--annotations", "/nonexistent.json",
                 "--level", "a"]) == EXIT_MISSING


def test_unknown_level_is_usage_error(dataset, cfg_path):
    assert main(["--config", cfg_path, "validate",
                 "--annotations", str(dataset / "annotations_quadrant.json"),
                 "--level", "z"]) == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense:\n  x: 1\n")
    assert main(["--config", str(bad), "datagen",
                 "--out", str(tmp_path / "d")]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "absent.yaml"), "datagen",
                 "--out", str(tmp_path / "d")]) == EXIT_MISSING


def test_train_then_infer_and_eval(dataset, cfg_path, tmp_path, capsys):
    run = tmp_path / "run_a"
    assert main(["--config", cfg_path, "train", "--data", str(dataset),
                 "--level", "a", "--out", str(run)]) == EXIT_OK
    ckpt = run / "final.bin"
    assert ckpt.exists()

    image = next((dataset / "images").glob("q_*.pgm"))
    out_json = tmp_path / "dets.json"
    assert main(["--config", cfg_path, "infer", "--checkpoint", str(ckpt),
                 "--level", "a", "--images", str(image),
                 "--out", str(out_json)]) == EXIT_OK
    doc = json.loads(out_json.read_text())
    assert doc["images"][0]["id"] == image.stem
    assert len(doc["images"][0]["detections"]) >= 1
    for d in doc["images"][0]["detections"]:
        assert len(d["box_cxcywh"]) == 4
        assert len(d["probs_quadrant"]) == 4

    capsys.readouterr()
    assert main(["--config", cfg_path, "eval", "--data", str(dataset),
                 "--level", "a", "--checkpoint", str(ckpt)]) == EXIT_OK
    assert "AP50" in capsys.readouterr().out


def test_train_missing_checkpoint(dataset, cfg_path, tmp_path):
    assert main(["--config", cfg_path, "train", "--data", str(dataset),
                 "--level", "a", "--out", str(tmp_path / "x"),
                 "--init", "/nope.bin"]) == EXIT_MISSING


def test_eval_oracle_is_perfect(dataset, cfg_path, tmp_path, capsys):
    out = tmp_path / "report.txt"
    assert main(["--config", cfg_path, "eval", "--data", str(dataset),
                 "--level", "c", "--oracle", "--out", str(out)]) == EXIT_OK
    text = out.read_text()
    assert "AP50" in text
    kv = out.with_suffix(".kv").read_text().splitlines()
    vals = dict(line.split("=") for line in kv)
    # Area buckets with no ground truth report a -1 sentinel; skip those.
    scored = {k: v for k, v in vals.items() if not v.startswith("-")}
    assert scored
    assert all(v == "100.000" for v in scored.values())


def test_render_writes_overlays(dataset, cfg_path, tmp_path):
    out = tmp_path / "vis"
    assert main(["--config", cfg_path, "render", "--data", str(dataset),
                 "--level", "c", "--out", str(out)]) == EXIT_OK
    ppms = list(out.glob("*.ppm"))
    assert len(ppms) == 2
    assert ppms[0].read_bytes().startswith(b"P6")


def test_split_manifests(dataset, cfg_path, tmp_path):
    out = tmp_path / "splits"
    assert main(["--config", cfg_path, "split",
                 "--annotations",
                 str(dataset / "annotations_quadrant_enumeration_diagnosis.json"),
                 "--level", "c", "--out", str(out),
                 "--train-frac", "0.5", "--val-frac", "0.5",
                 "--test-frac", "0.0", "--seed", "0"]) == EXIT_OK
    train = (out / "train.txt").read_text().split()
    val = (out / "val.txt").read_text().split()
    assert len(train) + len(val) == 2
    assert (out / "test.txt").read_text() == ""


def test_pipeline_full_arm(dataset, cfg_path, tmp_path, capsys):
    out = tmp_path / "pipe"
    assert main(["--config", cfg_path, "pipeline", "--data", str(dataset),
                 "--out", str(out), "--arm", "full"]) == EXIT_OK
    assert "arm: full" in capsys.readouterr().out
    assert (out / "report.txt").exists()
    assert (out / "stage_0_quadrant" / "final.bin").exists()
    assert (out / "stage_2_quadrant_enumeration_diagnosis" / "final.bin").exists()
