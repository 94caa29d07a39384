"""Command-line front end: ``stconsist <command> ...``.

Every command reads one JSON experiment document (``--config``); ``--set
section.key=value`` overrides single keys.  Exit codes: 0 success, 2 config
error, 3 numeric failure, 4 IO failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, TrainConfig
from .errors import ChecksumError, ConfigError, NumericError
from .harness import (Dataset, ablate_losses, frequency_analysis, make_report, split_labels,
                      sweep_supervision, train_baseline, train_with_consistency, run_hash)
from .persist import dump_json, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .scenegen import class_census, generate_dataset
from .stct import StctFormatError

log = logging.getLogger("stconsist")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# --------------------------------------------------------------------------
# config plumbing


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def load_config(path: str | None, overrides: list[str] | None = None) -> ExperimentConfig:
    doc: dict = {}
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return ExperimentConfig.from_dict(doc)


def worker_count(requested: int | None) -> int:
    n = requested or 1
    cap = os.environ.get("STCONSIST_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"STCONSIST_THREADS must be an integer, got {cap!r}") from exc
    return max(1, n)


def _load_data(path: str) -> Dataset:
    seqs, cfg, seed = load_dataset(path)
    return Dataset(seqs, cfg, seed)


# --------------------------------------------------------------------------
# output helpers


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    path.write_text(buf.getvalue())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return v


def scatter_svg(points: list[tuple[float, float, str]], title: str, xlabel: str, ylabel: str,
                logx: bool = True) -> str:
    """Tiny self-contained SVG scatter plot."""
    w, h, m = 480, 360, 56
    pts = [(x, y, lab) for x, y, lab in points if x is not None and y is not None
           and np.isfinite(x) and np.isfinite(y) and (x > 0 or not logx)]
    tx = (lambda x: np.log10(x)) if logx else (lambda x: x)
    if pts:
        xs = [tx(p[0]) for p in pts]
        ys = [p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(min(ys), 0.0), max(max(ys), 0.0)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return m + (tx(x) - x0) / (x1 - x0) * (w - 2 * m)

    def sy(y):
        return h - m - (y - y0) / (y1 - y0) * (h - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">',
           f'<rect width="{w}" height="{h}" fill="white"/>',
           f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
           f'<text x="{w / 2}" y="{h - 14}" text-anchor="middle">{xlabel}</text>',
           f'<text x="16" y="{h / 2}" text-anchor="middle" '
           f'transform="rotate(-90 16 {h / 2})">{ylabel}</text>']
    zero = h - m - (0 - y0) / (y1 - y0) * (h - 2 * m)
    out.append(f'<line x1="{m}" y1="{zero:.1f}" x2="{w - m}" y2="{zero:.1f}" stroke="#bbb" '
               'stroke-dasharray="4 3"/>')
    for v, lab in ((y0, f"{y0:.2f}"), (y1, f"{y1:.2f}")):
        out.append(f'<text x="{m - 4}" y="{h - m - (v - y0) / (y1 - y0) * (h - 2 * m) + 4:.1f}" '
                   f'text-anchor="end">{lab}</text>')
    for v in (x0, x1):
        label = f"{10 ** v:.3g}" if logx else f"{v:.3g}"
        out.append(f'<text x="{m + (v - x0) / (x1 - x0) * (w - 2 * m):.1f}" y="{h - m + 16}" '
                   f'text-anchor="middle">{label}</text>')
    for x, y, lab in pts:
        out.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="#3366aa" '
                   f'fill-opacity="0.7"><title>{lab}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _fig2(rows: list[dict], out: Path, plot: bool) -> None:
    write_csv(out / "fig2.csv", rows, ["seed", "class", "frequency", "iou_base", "iou_consist",
                                       "rel_improvement", "spearman"])
    if plot:
        pts = [(r["frequency"], r["rel_improvement"], f"seed {r['seed']} class {r['class']}")
               for r in rows]
        (out / "fig2.svg").write_text(scatter_svg(
            pts, "Relative IOU change vs class frequency", "class frequency in labeled frames (log)",
            "relative IOU change"))


def frequency_rows(cells: dict, fraction: float, seeds) -> tuple[list[dict], list[float]]:
    rows, rhos = [], []
    for s in seeds:
        c = cells[(fraction, s)]
        per_class, rho = frequency_analysis(c.baseline, c.consist)
        rhos.append(rho)
        rows += [{"seed": s, **r, "spearman": rho} for r in per_class]
    return rows, rhos


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    scene = cfg.scene_config()
    seed = cfg.dataset_seed if args.seed is None else args.seed
    seqs = generate_dataset(scene, seed)
    save_dataset(seqs, scene, seed, args.out)
    census = class_census(seqs, scene.num_classes)
    print(f"wrote {len(seqs)} sequences x {scene.frames_per_scene} frames to {args.out}")
    for c, f in enumerate(census):
        print(f"  class {c}: {100 * f:6.2f}%")
    return EXIT_OK


def _train_cfg(cfg: ExperimentConfig, seed: int | None) -> TrainConfig:
    tc = cfg.train_config()
    return tc if seed is None else tc.with_(seed=seed)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    data = _load_data(args.data)
    tc = _train_cfg(cfg, args.seed)
    fraction = cfg.fractions[0] if args.fraction is None else args.fraction
    split = split_labels(data.train.n, fraction, tc.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p1_dir = out / "phase1"
    t0 = time.perf_counter()
    if args.resume:
        phase1 = load_checkpoint(p1_dir)
        expected = run_hash(data, split, tc)
        if phase1.config_hash != expected:
            raise ConfigError(f"refusing to resume: checkpoint config hash {phase1.config_hash} "
                              f"!= current {expected}")
    else:
        phase1 = train_baseline(data, split, tc)
        save_checkpoint(phase1, p1_dir)
    t1 = time.perf_counter()
    reports = {"phase1": make_report(phase1, data, split, tc, "phase1", t1 - t0).to_dict()}
    ckpt = phase1
    if not args.baseline_only:
        ckpt = train_with_consistency(data, split, phase1, tc)
        save_checkpoint(ckpt, out / "consist")
        reports["consistency"] = make_report(ckpt, data, split, tc, "consistency",
                                             time.perf_counter() - t1).to_dict()
    (out / "report.json").write_text(dump_json({"config": cfg.to_dict(), "fraction": fraction,
                                                "seed": tc.seed, "reports": reports}))
    curves = ckpt.history
    n = max(len(v) for v in curves.values())
    names = sorted(curves)
    write_csv(out / "losses.csv",
              [{"index": i, **{k: (curves[k][i] if i < len(curves[k]) else None) for k in names}}
               for i in range(n)], ["index"] + names)
    for name, rep in reports.items():
        print(f"{name}: MIOU {rep['miou']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    from .harness import evaluate
    splits = ("train", "eval") if args.split == "both" else (args.split,)
    result = {}
    for name in splits:
        fs = data.train if name == "train" else data.eval
        iou, m = evaluate(ckpt.params, fs.rgb, fs.seg, data.num_classes)
        result[name] = {"miou": m, "per_class_iou": [None if np.isnan(x) else x for x in iou]}
        print(f"[{name}] MIOU {m:.4f}  per-class " +
              " ".join("-" if np.isnan(x) else f"{x:.3f}" for x in iou))
    out = Path(args.out) if args.out else Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_json({"checkpoint": str(args.checkpoint),
                                                "config_hash": ckpt.config_hash,
                                                "metrics": result}))
    return EXIT_OK


def run_sweep(data: Dataset, cfg: ExperimentConfig, out: Path, workers: int = 1,
              plot: bool = False, cache: dict | None = None) -> dict:
    tc = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    rows, cells = sweep_supervision(data, list(cfg.fractions), tc, cfg.seeds, workers, cache)
    wall = time.perf_counter() - t0
    write_csv(out / "table1.csv", rows, ["fraction", "seed", "phase1_miou", "baseline_miou",
                                        "consist_miou", "label_efficiency"])
    low = min(cfg.fractions)
    f_rows, rhos = frequency_rows(cells, low, cfg.seeds)
    _fig2(f_rows, out, plot)
    report = {"config": cfg.to_dict(), "table1": rows,
              "cells": {f"{f}/{s}": {"phase1": c.phase1.to_dict(), "baseline": c.baseline.to_dict(),
                                     "consistency": c.consist.to_dict()}
                        for (f, s), c in sorted(cells.items())},
              "fig2_spearman": dict(zip([str(s) for s in cfg.seeds], rhos))}
    (out / "report.json").write_text(dump_json(report))
    # timings vary run to run, so they stay out of the byte-stable outputs
    (out / "timing.txt").write_text(f"sweep wall clock: {wall:.1f} s\n")
    return {"rows": rows, "cells": cells, "wall": wall}


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    data = _load_data(args.data)
    res = run_sweep(data, cfg, Path(args.out), worker_count(args.workers), args.plot)
    for r in res["rows"]:
        if r["seed"] == "mean":
            print(f"fraction {r['fraction']:<6} baseline {r['baseline_miou']:.4f} "
                  f"consistency {r['consist_miou']:.4f}")
    return EXIT_OK


def run_ablation(data: Dataset, cfg: ExperimentConfig, out: Path, cache: dict | None = None,
                 phase1: dict | None = None) -> list[dict]:
    tc = cfg.train_config()
    out.mkdir(parents=True, exist_ok=True)
    per_seed = {}
    for s in cfg.seeds:
        stc = tc.with_(seed=s)
        split = split_labels(data.train.n, cfg.ablation_fraction, s)
        p1 = (phase1 or {}).get(s)
        rows, _ = ablate_losses(data, split, stc, p1, cache)
        per_seed[s] = rows
    names = [r["row"] for r in per_seed[cfg.seeds[0]]]
    table = []
    for i, name in enumerate(names):
        vals = [per_seed[s][i]["miou"] for s in cfg.seeds]
        row = {"row": name, "variant": per_seed[cfg.seeds[0]][i]["variant"],
               "miou_mean": float(np.mean(vals))}
        row.update({f"miou_seed{s}": v for s, v in zip(cfg.seeds, vals)})
        table.append(row)
    cols = ["row", "variant", "miou_mean"] + [f"miou_seed{s}" for s in cfg.seeds]
    write_csv(out / "table2.csv", table, cols)
    (out / "ablation.json").write_text(dump_json({"config": cfg.to_dict(), "table2": table}))
    return table


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    data = _load_data(args.data)
    for r in run_ablation(data, cfg, Path(args.out)):
        print(f"{r['row']:<12} MIOU {r['miou_mean']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    found = False
    for name in ("table1.csv", "table2.csv"):
        p = run / name
        if p.exists():
            found = True
            print(f"== {name}")
            print(p.read_text(), end="")
    fig = run / "fig2.csv"
    if fig.exists():
        found = True
        with fig.open() as fh:
            rows = list(csv.DictReader(fh))
        rhos = {}
        for r in rows:
            rhos[r["seed"]] = r["spearman"]
        print("== fig2 Spearman rho per seed: " + ", ".join(f"{k}: {v}" for k, v in rhos.items()))
        if args.plot:
            pts = [(float(r["frequency"]), float(r["rel_improvement"]) if r["rel_improvement"] else None,
                    f"seed {r['seed']} class {r['class']}") for r in rows]
            (run / "fig2.svg").write_text(scatter_svg(
                pts, "Relative IOU change vs class frequency",
                "class frequency in labeled frames (log)", "relative IOU change"))
    if not found:
        raise FileNotFoundError(f"no tables found in {run}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stconsist", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="experiment JSON document")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. train.lam=0.5")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    common(p, data=False)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="phase 1, then phase 2 with the consistency term")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline-only", action="store_true")
    p.add_argument("--resume", action="store_true", help="reuse <out>/phase1")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="MIOU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "eval", "both"), default="both")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="supervision-fraction sweep (table1.csv, fig2.csv)")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="loss ablation (table2.csv)")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="print tables of a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ChecksumError, StctFormatError) as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
