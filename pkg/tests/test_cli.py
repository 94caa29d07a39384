import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from stconsist import stct
from stconsist.cli import load_config, main, scatter_svg, worker_count
from stconsist.errors import ChecksumError, ConfigError
from stconsist.optim import AdamState
from stconsist.persist import Checkpoint, load_checkpoint, load_dataset, save_checkpoint
from stconsist.segmenter import Architecture, init_params

TINY = {
    "scene": {"num_scenes": 3, "frames_per_scene": 4, "image_size": [16, 16], "focal": 12.0},
    "train": {"phase1_steps": 4, "phase2_steps": 4, "labeled_per_step": 1, "pairs_per_step": 1,
              "widths": [4], "kernels": [3], "log_every": 2},
    "fractions": [0.2, 1.0],
    "seeds": [0, 1],
    "ablation_fraction": 0.2,
}


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.txt"}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--out", str(d / "data"), "--seed", "0"]) == 0
    return d, cfg


def test_gen_data_layout(workdir):
    d, _ = workdir
    manifest = json.loads((d / "data" / "manifest.json").read_text())
    assert len(manifest["sequences"]) == 3
    for s in manifest["sequences"]:
        for kind in ("rgb", "depth", "seg"):
            assert len(list((d / "data" / s["name"]).glob(f"{kind}_*.stct"))) == 4


def test_gen_data_reproducible(workdir, tmp_path):
    d, cfg = workdir
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again"), "--seed", "0"]) == 0
    assert _files(d / "data") == _files(tmp_path / "again")


def test_dataset_round_trip(workdir):
    d, _ = workdir
    seqs, cfg, seed = load_dataset(d / "data")
    assert seed == 0 and cfg.num_scenes == 3
    from stconsist.scenegen import generate_dataset
    fresh = generate_dataset(cfg, 0)
    for a, b in zip(seqs, fresh):
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.rgb, fb.rgb)
            np.testing.assert_array_equal(fa.seg, fb.seg)
            assert fa.pose.allclose(fb.pose, 0.0)


def test_invalid_config_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scene": {"num_classes": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen-data", "--set", "train.variant=bogus", "--out", str(tmp_path / "x")]) == 2


def test_train_baseline_only(workdir, tmp_path):
    d, cfg = workdir
    out = tmp_path / "run"
    assert main(["train", "--data", str(d / "data"), "--config", str(cfg), "--out", str(out),
                 "--baseline-only"]) == 0
    assert (out / "phase1" / "checkpoint.json").exists()
    assert not (out / "consist").exists()
    assert set(json.loads((out / "report.json").read_text())["reports"]) == {"phase1"}


def test_resume_matches_uninterrupted(workdir, tmp_path):
    d, cfg = workdir
    full, part = tmp_path / "full", tmp_path / "part"
    base = ["--data", str(d / "data"), "--config", str(cfg)]
    assert main(["train", *base, "--out", str(full)]) == 0
    assert main(["train", *base, "--out", str(part), "--baseline-only"]) == 0
    assert main(["train", *base, "--out", str(part), "--resume"]) == 0
    assert _files(full / "consist") == _files(part / "consist")
    assert (full / "report.json").read_bytes() == (part / "report.json").read_bytes()


def test_resume_hash_mismatch_refused(workdir, tmp_path):
    d, cfg = workdir
    out = tmp_path / "r"
    base = ["--data", str(d / "data"), "--config", str(cfg), "--out", str(out)]
    assert main(["train", *base, "--baseline-only"]) == 0
    assert main(["train", *base, "--resume", "--set", "train.lr=0.01"]) == 2


def test_eval_twice_identical(workdir, tmp_path, capsys):
    d, cfg = workdir
    out = tmp_path / "run"
    main(["train", "--data", str(d / "data"), "--config", str(cfg), "--out", str(out),
          "--baseline-only"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "phase1"), "--data", str(d / "data"),
                 "--out", str(tmp_path / "e1")]) == 0
    text = capsys.readouterr().out
    assert "[train]" in text and "[eval]" in text
    main(["eval", "--checkpoint", str(out / "phase1"), "--data", str(d / "data"),
          "--out", str(tmp_path / "e2")])
    assert (tmp_path / "e1" / "report.json").read_bytes() == (tmp_path / "e2" / "report.json").read_bytes()


def test_eval_malformed_checkpoint(workdir, tmp_path):
    d, cfg = workdir
    out = tmp_path / "run"
    main(["train", "--data", str(d / "data"), "--config", str(cfg), "--out", str(out),
          "--baseline-only"])
    p = out / "phase1" / "param_000.stct"
    blob = bytearray(p.read_bytes())
    blob[-1] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_checkpoint(out / "phase1")
    assert main(["eval", "--checkpoint", str(out / "phase1"), "--data", str(d / "data")]) == 4


def test_missing_dataset_exit_4(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4


def test_sweep_and_ablate(workdir, tmp_path):
    d, cfg = workdir
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    for out in (out1, out2):
        assert main(["sweep", "--data", str(d / "data"), "--config", str(cfg), "--out", str(out),
                     "--plot"]) == 0
        assert main(["ablate", "--data", str(d / "data"), "--config", str(cfg), "--out", str(out)]) == 0
    assert _files(out1) == _files(out2)
    with (out1 / "table1.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert {"fraction", "seed", "baseline_miou", "consist_miou"} <= set(rows[0])
    assert len(rows) == 2 * 2 + 2
    assert sum(r["seed"] == "mean" for r in rows) == 2
    with (out1 / "table2.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 7
    svg = (out1 / "fig2.svg").read_text()
    assert svg.startswith("<svg") and "<circle" in svg
    assert main(["report", "--run", str(out1)]) == 0


def test_scatter_svg_handles_empty():
    assert scatter_svg([], "t", "x", "y").startswith("<svg")


def test_overrides():
    cfg = load_config(None, ["train.lam=0.5", "fractions=[0.1]", "train.variant=label"])
    assert cfg.train_config().lam == 0.5 and cfg.train_config().variant == "label"
    assert cfg.fractions == (0.1,)
    with pytest.raises(ConfigError):
        load_config(None, ["nonsense"])


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("STCONSIST_THREADS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("STCONSIST_THREADS")
    assert worker_count(3) == 3


def test_checkpoint_round_trip_bytes(tmp_path):
    p = init_params(Architecture(widths=(4, 4), kernels=(3, 3)), 0)
    ck = Checkpoint(p, AdamState.zeros_like(p.flat()), 3, 4, "abc", {"phase1_total": [1.0, 0.5]})
    save_checkpoint(ck, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_stct_file_round_trip(tmp_path):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    stct.save(tmp_path / "x.stct", a)
    b = stct.load(tmp_path / "x.stct")
    stct.save(tmp_path / "y.stct", b)
    assert (tmp_path / "x.stct").read_bytes() == (tmp_path / "y.stct").read_bytes()


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "stconsist.cli", "--help"], capture_output=True,
                       text=True, env={**os.environ})
    assert r.returncode == 0
    for cmd in ("gen-data", "train", "eval", "sweep", "ablate", "report"):
        assert cmd in r.stdout
