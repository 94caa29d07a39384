"""Checkpoints and dataset directories on disk.

A checkpoint directory holds ``checkpoint.json`` (architecture, counters,
config hash, loss history, per-file sha256) plus one STCT file per parameter
and optimizer-moment tensor.  A dataset directory holds ``manifest.json``
plus ``<sequence>/rgb_####.stct``, ``depth_####.stct`` and ``seg_####.stct``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stct
from .errors import ChecksumError
from .geometry import Intrinsics, Se3Motion
from .optim import AdamState
from .scenegen import Box, Frame, Scene, SceneConfig, Sequence
from .segmenter import Architecture, SegmenterParams

CHECKPOINT_FORMAT = 1


@dataclass
class Checkpoint:
    params: SegmenterParams
    adam: AdamState
    phase1_steps: int = 0
    phase2_steps: int = 0
    config_hash: str = ""
    history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def arch(self) -> Architecture:
        return self.params.arch


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, arr in enumerate(ckpt.params.flat()):
        files[f"param_{i:03d}.stct"] = stct.dumps(arr)
    for i, arr in enumerate(ckpt.adam.m):
        files[f"adam_m_{i:03d}.stct"] = stct.dumps(arr)
    for i, arr in enumerate(ckpt.adam.v):
        files[f"adam_v_{i:03d}.stct"] = stct.dumps(arr)
    for name, blob in files.items():
        (path / name).write_bytes(blob)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "architecture": ckpt.arch.to_dict(),
        "adam_step": ckpt.adam.step,
        "phase1_steps": ckpt.phase1_steps,
        "phase2_steps": ckpt.phase2_steps,
        "config_hash": ckpt.config_hash,
        "history": ckpt.history,
        "files": {name: _sha(blob) for name, blob in sorted(files.items())},
    }
    (path / "checkpoint.json").write_text(dump_json(meta))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads((path / "checkpoint.json").read_text())
    except (OSError, ValueError) as exc:
        raise ChecksumError(f"unreadable checkpoint metadata in {path}: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    for name, digest in meta["files"].items():
        try:
            blob = (path / name).read_bytes()
        except OSError as exc:
            raise ChecksumError(f"missing checkpoint file {name}") from exc
        if _sha(blob) != digest:
            raise ChecksumError(f"checksum mismatch for {name}")
        arrays[name] = stct.loads(blob)
    arch = Architecture.from_dict(meta["architecture"])

    def group(prefix):
        return [arrays[k] for k in sorted(arrays) if k.startswith(prefix)]

    params = SegmenterParams.from_flat(arch, group("param_"))
    params.check()
    adam = AdamState(group("adam_m_"), group("adam_v_"), int(meta["adam_step"]))
    return Checkpoint(params, adam, int(meta["phase1_steps"]), int(meta["phase2_steps"]),
                      meta["config_hash"], {k: list(v) for k, v in meta["history"].items()})


# --------------------------------------------------------------------------
# datasets


def _pose_dict(m: Se3Motion) -> dict:
    return {"rotation": m.rotation.tolist(), "translation": m.translation.tolist()}


def save_dataset(sequences: list[Sequence], cfg: SceneConfig, seed: int, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    seq_meta = []
    for seq in sequences:
        sdir = path / seq.name
        sdir.mkdir(exist_ok=True)
        for f in seq.frames:
            stct.save(sdir / f"rgb_{f.index:04d}.stct", f.rgb)
            stct.save(sdir / f"depth_{f.index:04d}.stct", f.depth)
            stct.save(sdir / f"seg_{f.index:04d}.stct", f.seg.astype(np.float32))
        seq_meta.append({
            "name": seq.name,
            "seed": seq.seed,
            "scene": seq.scene.to_dict(),
            "intrinsics": seq.frames[0].intrinsics.to_dict(),
            "poses": [_pose_dict(f.pose) for f in seq.frames],
        })
    manifest = {
        "format": 1,
        "seed": seed,
        "config": cfg.to_dict(),
        "num_classes": cfg.num_classes,
        "palette": sequences[0].scene.palette.tolist() if sequences else [],
        "sequences": seq_meta,
    }
    (path / "manifest.json").write_text(dump_json(manifest))


def _scene_from_dict(d: dict) -> Scene:
    boxes = [Box(np.array(b["lo"]), np.array(b["hi"]), int(b["cls"]), np.array(b["color"]))
             for b in d["boxes"]]
    return Scene(np.array(d["room_lo"]), np.array(d["room_hi"]), boxes, np.array(d["palette"]),
                 np.array(d["light"]), int(d["texture_seed"]), np.array(d["free_lo"]),
                 np.array(d["free_hi"]))


def load_dataset(path: str | Path) -> tuple[list[Sequence], SceneConfig, int]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    cfg = SceneConfig.from_dict(manifest["config"])
    sequences = []
    for sm in manifest["sequences"]:
        k = Intrinsics(**sm["intrinsics"])
        sdir = path / sm["name"]
        frames = []
        for i, pd in enumerate(sm["poses"]):
            frames.append(Frame(
                stct.load(sdir / f"rgb_{i:04d}.stct"),
                stct.load(sdir / f"depth_{i:04d}.stct"),
                stct.load(sdir / f"seg_{i:04d}.stct").astype(np.int64),
                Se3Motion(np.array(pd["rotation"]), np.array(pd["translation"])),
                k, i))
        sequences.append(Sequence(frames, _scene_from_dict(sm["scene"]), int(sm["seed"]), sm["name"]))
    return sequences, cfg, int(manifest["seed"])
