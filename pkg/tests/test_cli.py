from __future__ import annotations

import csv
import io as stdio
import json

import numpy as np
import pytest

from vpd.pipeline import io
from vpd.pipeline.cli import main

TINY_NET = ["--base-channels", "4", "--groups", "2", "--time-dim", "8", "--T", "100", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["--data-root", str(root), "synth", "--name", "tiny", "--train", "2", "--eval", "2",
                 "--height", "16", "--width", "16", "--planes", "8", "--occlusion-blocks", "2",
                 "--occlusion-size", "5"]) == 0
    run = root / "run"
    assert main(["--data-root", str(root), "train", "--dataset", "tiny", "--steps", "2", "--out", str(run)]
                + TINY_NET) == 0
    return root, run


def test_synth_writes_manifest(workspace):
    root, _ = workspace
    m = io.read_manifest(root / "tiny")
    assert [e["split"] for e in m["samples"]] == ["train", "train", "eval", "eval"]
    assert m["config"]["height"] == 16


def test_train_writes_checkpoint_and_curve(workspace):
    _, run = workspace
    assert (run / "model.ckpt").exists()
    rows = list(csv.reader((run / "losses.csv").open()))
    assert rows[0] == ["step", "loss"] and len(rows) == 3


def test_sample_writes_volumes(workspace, tmp_path):
    root, run = workspace
    out = tmp_path / "sample"
    assert main(["--data-root", str(root), "sample", "--checkpoint", str(run / "model.ckpt"),
                 "--steps", "2", "--out", str(out)]) == 0
    prob = io.read_volume(out / "probability.vol")
    assert prob.shape == (1, 8, 16, 16)
    np.testing.assert_allclose(prob.sum(axis=1), 1.0, atol=1e-5)
    assert io.read_volume(out / "depth.vol").shape == (1, 1, 16, 16)


def test_eval_is_reproducible(workspace, tmp_path, capsys):
    root, run = workspace
    args = ["--data-root", str(root), "eval", "--checkpoint", str(run / "model.ckpt"), "--steps", "1",
            "--seed", "3"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    capsys.readouterr()
    a = json.loads((tmp_path / "a" / "report_steps=1.json").read_text())
    b = json.loads((tmp_path / "b" / "report_steps=1.json").read_text())
    a.pop("seconds"), b.pop("seconds")
    assert a == b


def test_config_file_and_flag_override(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"steps": 1, "base_channels": 4, "groups": 2, "time_dim": 8, "T": 100,
                               "dataset": "tiny", "seed": 7}))
    out = tmp_path / "run"
    assert main(["--data-root", str(root), "train", "--config", str(cfg), "--seed", "8", "--out", str(out)]) == 0
    _, saved = io.load_checkpoint(out / "model.ckpt")
    assert saved["run"]["seed"] == 8 and saved["run"]["steps"] == 1


def test_ablate_writes_tables(workspace, tmp_path, capsys):
    root, _ = workspace
    out = tmp_path / "abl"
    assert main(["--data-root", str(root), "ablate", "--dataset", "tiny", "--steps", "1", "--out", str(out)]
                + TINY_NET) == 0
    assert len((out / "ladder.csv").read_text().splitlines()) == 5
    assert "+CVP+CACC+OF" in capsys.readouterr().out


def test_schedule_dump(capsys):
    assert main(["schedule-dump", "--T", "3", "--beta-start", "0.1", "--beta-end", "0.3"]) == 0
    rows = list(csv.reader(stdio.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["t", "alpha", "alpha_bar"] and len(rows) == 4
    assert float(rows[3][2]) == pytest.approx(0.9 * 0.8 * 0.7)


def test_plot_emits_curve(workspace, capsys):
    _, run = workspace
    assert main(["plot", str(run), "--what", "losses"]) == 0
    assert capsys.readouterr().out.startswith("step,loss")


def test_data_root_env(monkeypatch, workspace, tmp_path):
    root, run = workspace
    monkeypatch.setenv(io.DATA_ROOT_ENV, str(root))
    assert main(["sample", "--checkpoint", str(run / "model.ckpt"), "--dataset", "tiny", "--steps", "1",
                 "--out", str(tmp_path / "s")]) == 0


def test_bad_boolean_flag_exits():
    with pytest.raises(SystemExit):
        main(["train", "--use-cacc", "maybe"])
