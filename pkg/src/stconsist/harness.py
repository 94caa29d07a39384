"""Experimental protocol: label splits, two-phase training, MIOU, sweeps.

Training is single-threaded and fully determined by (dataset seed, split
seed, train seed).  Minibatch streams for labeled frames and unlabeled pairs
use independent generators, so switching the consistency term off leaves the
labeled stream untouched.
"""

from __future__ import annotations

import logging
import time
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import losses
from .config import TrainConfig, config_hash
from .errors import ContractError, NumericError
from .geometry import FORWARD_SPLAT, perturb, relative_motion, warp_logits, warp_operator
from .optim import AdamState, adam_step
from .persist import Checkpoint
from .scenegen import SceneConfig, Sequence
from .segmenter import SegmenterParams, init_params, predict, segmenter_forward
from .tensor import Tensor, add, backward, scale, take, tensor

log = logging.getLogger(__name__)

REL_EPS = 1e-3
EVAL_CHUNK = 16


# --------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Frames flattened into arrays, with scene-level train/eval partition."""

    sequences: list[Sequence]
    scene_cfg: SceneConfig
    seed: int = 0
    eval_scene_fraction: float = 0.2

    def __post_init__(self):
        if not self.sequences:
            raise ContractError("empty dataset")
        n = len(self.sequences)
        n_eval = max(1, int(np.floor(self.eval_scene_fraction * n + 0.5))) if n > 1 else 0
        self.train_seqs = list(range(n - n_eval))
        self.eval_seqs = list(range(n - n_eval, n))
        self.num_classes = self.scene_cfg.num_classes
        self.train = _FrameSet([self.sequences[i] for i in self.train_seqs])
        self.eval = _FrameSet([self.sequences[i] for i in self.eval_seqs])


class _FrameSet:
    def __init__(self, seqs: list[Sequence]):
        frames = [f for s in seqs for f in s.frames]
        self.frames = frames
        self.n = len(frames)
        if not frames:
            self.rgb = np.zeros((0, 1, 1, 3), np.float32)
            self.seg = np.zeros((0, 1, 1), np.int64)
            self.pairs = []
            return
        self.rgb = np.stack([f.rgb for f in frames]).astype(np.float32)
        self.seg = np.stack([f.seg for f in frames]).astype(np.int64)
        self.depth = np.stack([f.depth for f in frames]).astype(np.float64)
        self.poses = [f.pose for f in frames]
        self.intrinsics = frames[0].intrinsics
        self.pairs: list[tuple[int, int]] = []
        start = 0
        for s in seqs:
            self.pairs += [(start + t, start + t + 1) for t in range(len(s.frames) - 1)]
            start += len(s.frames)


@dataclass(frozen=True)
class LabelSplit:
    labeled: np.ndarray
    fraction: float
    seed: int

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.labeled)


def split_labels(n_frames: int, fraction: float, seed: int) -> LabelSplit:
    """Uniformly choose round(fraction * n) frames (at least one) to keep labels."""
    if n_frames <= 0:
        raise ContractError("empty dataset")
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    count = max(1, min(n_frames, int(np.floor(fraction * n_frames + 0.5))))
    rng = np.random.default_rng([seed, 7919])
    chosen = rng.choice(n_frames, size=count, replace=False)
    flags = np.zeros(n_frames, dtype=bool)
    flags[chosen] = True
    return LabelSplit(flags, fraction, seed)


# --------------------------------------------------------------------------
# metrics


def confusion_matrix(preds, gts, c: int) -> np.ndarray:
    cm = np.zeros((c, c), dtype=np.int64)
    for p, g in zip(preds, gts):
        p = np.asarray(p).ravel()
        g = np.asarray(g).ravel()
        if p.shape != g.shape:
            raise ContractError(f"prediction/ground-truth shape mismatch {p.shape} vs {g.shape}")
        if p.size and (p.max() >= c or g.max() >= c or p.min() < 0 or g.min() < 0):
            raise ContractError(f"class id outside [0, {c})")
        cm += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


def miou(preds, gts, c: int) -> tuple[np.ndarray, float]:
    """Per-class IOU (nan where a class is absent from both) and their mean."""
    cm = confusion_matrix(preds, gts, c)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    iou = np.full(c, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    if not present.any():
        return iou, float("nan")
    # counts are integers, so the mean is taken exactly and rounded once
    exact = sum(Fraction(int(cm[k, k]), int(union[k])) for k in np.flatnonzero(present))
    return iou, float(exact / int(present.sum()))


def evaluate(params: SegmenterParams, rgb: np.ndarray, seg: np.ndarray, c: int):
    preds = []
    for i in range(0, len(rgb), EVAL_CHUNK):
        preds.append(predict(segmenter_forward(rgb[i:i + EVAL_CHUNK], params)))
    preds = np.concatenate(preds) if preds else np.zeros((0,) + seg.shape[1:], np.int64)
    return miou(preds, seg, c)


def class_frequency(seg: np.ndarray, c: int) -> np.ndarray:
    counts = np.bincount(np.asarray(seg).ravel(), minlength=c)[:c].astype(np.float64)
    return counts / counts.sum()


# --------------------------------------------------------------------------
# training


def _pair_geometry(fs: _FrameSet, pair_id: int, cfg: TrainConfig):
    """Warp operators for both directions of one adjacent-frame pair."""
    a, b = fs.pairs[pair_id]
    k = fs.intrinsics
    m_ab = relative_motion(fs.poses[a], fs.poses[b])
    m_ba = relative_motion(fs.poses[b], fs.poses[a])
    noisy = cfg.sigma_rot > 0 or cfg.sigma_trans > 0 or cfg.sigma_depth > 0
    ops = []
    # forward_splat consumes source depth and source->target motion;
    # inverse_sample consumes target depth and target->source motion
    for direction, (src, dst, m_fwd, m_inv) in enumerate(((a, b, m_ab, m_ba), (b, a, m_ba, m_ab))):
        if cfg.warp_mode == FORWARD_SPLAT:
            depth, motion = fs.depth[src], m_fwd
        else:
            depth, motion = fs.depth[dst], m_inv
        if noisy:
            motion, depth = perturb(motion, depth, cfg.sigma_rot, cfg.sigma_trans, cfg.sigma_depth,
                                    seed=[cfg.noise_seed, pair_id, direction])
        ops.append(warp_operator(depth, motion, k, cfg.warp_mode))
    return ops


def consistency_term(warped: Tensor, predicted: Tensor, image: np.ndarray, valid: np.ndarray,
                     cfg: TrainConfig) -> Tensor:
    """Loss of one direction of one pair under the configured variant."""
    v = cfg.variant
    if v in ("uniform", "label", "pixel"):
        w = losses.variant_weights(v, predicted, image, valid, cfg.edge_threshold)
        return losses.consistency_l1(warped, predicted, w, valid)
    parts = []
    if v in ("combined", "combined+ce"):
        parts.append(losses.combined_consistency(warped, predicted, image, valid, cfg.mix_dict(),
                                                 cfg.edge_threshold))
    if v in ("ce", "combined+ce"):
        pseudo = losses.argmax_channels(predicted.data)
        parts.append(losses.pseudo_label_ce(warped, pseudo, valid))
    out = parts[0]
    for p in parts[1:]:
        out = add(out, p)
    return out


def pair_consistency(logits_a: Tensor, logits_b: Tensor, rgb_a, rgb_b, ops, cfg: TrainConfig) -> Tensor:
    """Average of the forward (a->b) and backward (b->a) constraints."""
    op_ab, op_ba = ops
    warped_b, valid_b = warp_logits(logits_a, operator=op_ab)
    warped_a, valid_a = warp_logits(logits_b, operator=op_ba)
    fwd = consistency_term(warped_b, logits_b, rgb_b, valid_b, cfg)
    bwd = consistency_term(warped_a, logits_a, rgb_a, valid_a, cfg)
    return scale(add(fwd, bwd), 0.5)


def _check_finite(value: float, phase: str, step: int, history: list[float]) -> None:
    if not np.isfinite(value):
        tail = ", ".join(f"{x:.4g}" for x in history[-5:])
        raise NumericError(f"non-finite loss in {phase} at step {step}; recent losses: [{tail}]")


def _run_phase(params: SegmenterParams, adam: AdamState, data: Dataset, split: LabelSplit,
               cfg: TrainConfig, steps: int, phase: str, lam: float):
    fs = data.train
    labeled = split.indices
    rng_lab = np.random.default_rng([cfg.seed, 1 if phase == "phase1" else 2])
    rng_pair = np.random.default_rng([cfg.seed, 3])
    use_pairs = phase == "phase2" and lam > 0 and cfg.pairs_per_step > 0 and fs.pairs
    flat = params.flat()
    hist_total, hist_sup, hist_cons = [], [], []
    acc = np.zeros(3)
    acc_n = 0
    for step in range(steps):
        lab = rng_lab.choice(labeled, size=cfg.labeled_per_step, replace=len(labeled) < cfg.labeled_per_step)
        lab = np.sort(lab)
        imgs = [fs.rgb[lab]]
        pair_ids = []
        if use_pairs:
            pair_ids = rng_pair.choice(len(fs.pairs), size=cfg.pairs_per_step,
                                       replace=len(fs.pairs) < cfg.pairs_per_step)
            flat_idx = [i for p in pair_ids for i in fs.pairs[p]]
            imgs.append(fs.rgb[flat_idx])
        leaves = [tensor(a, requires_grad=True) for a in flat]
        pairs_of = [(leaves[i], leaves[i + 1]) for i in range(0, len(leaves), 2)]
        logits = segmenter_forward(np.concatenate(imgs), pairs_of)
        n_lab = len(lab)
        sup = losses.supervised_ce(take(logits, slice(0, n_lab)), fs.seg[lab])
        loss = sup
        cons_val = 0.0
        if use_pairs:
            terms = None
            for j, p in enumerate(pair_ids):
                a, b = fs.pairs[p]
                la = take(logits, n_lab + 2 * j)
                lb = take(logits, n_lab + 2 * j + 1)
                t = pair_consistency(la, lb, fs.rgb[a], fs.rgb[b], _pair_geometry(fs, int(p), cfg), cfg)
                terms = t if terms is None else add(terms, t)
            cons = scale(terms, 1.0 / len(pair_ids))
            cons_val = cons.item()
            loss = add(sup, scale(cons, lam))
        value = loss.item()
        _check_finite(value, phase, step, hist_total)
        grads = backward(loss)
        flat, adam = adam_step(flat, [grads[leaf] for leaf in leaves], adam, cfg.lr, cfg.beta1,
                               cfg.beta2, cfg.eps)
        acc += (value, sup.item(), cons_val)
        acc_n += 1
        if acc_n == cfg.log_every or step == steps - 1:
            hist_total.append(float(acc[0] / acc_n))
            hist_sup.append(float(acc[1] / acc_n))
            hist_cons.append(float(acc[2] / acc_n))
            log.debug("%s step %d: loss %.4f sup %.4f cons %.4f", phase, step + 1,
                      hist_total[-1], hist_sup[-1], hist_cons[-1])
            acc[:] = 0
            acc_n = 0
    history = {f"{phase}_total": hist_total, f"{phase}_supervised": hist_sup}
    if phase == "phase2":
        history[f"{phase}_consistency"] = hist_cons
    return SegmenterParams.from_flat(params.arch, flat), adam, history


def run_hash(data: Dataset, split: LabelSplit, cfg: TrainConfig) -> str:
    return config_hash(data.scene_cfg.to_dict(), {"dataset_seed": data.seed,
                                                  "fraction": split.fraction,
                                                  "split_seed": split.seed},
                       cfg.to_dict())


def train_baseline(data: Dataset, split: LabelSplit, cfg: TrainConfig) -> Checkpoint:
    """Supervised training on the labeled frames only."""
    params = init_params(cfg.architecture(data.num_classes), cfg.seed)
    adam = AdamState.zeros_like(params.flat())
    params, adam, hist = _run_phase(params, adam, data, split, cfg, cfg.phase1_steps, "phase1", 0.0)
    return Checkpoint(params, adam, cfg.phase1_steps, 0, run_hash(data, split, cfg), hist)


def train_with_consistency(data: Dataset, split: LabelSplit, baseline: Checkpoint,
                           cfg: TrainConfig) -> Checkpoint:
    """Continue from ``baseline`` with the consistency term switched on.

    Depth and motion enter only through constant warp matrices, so they get
    no gradient.
    """
    params, adam, hist = _run_phase(baseline.params, baseline.adam, data, split, cfg,
                                    cfg.phase2_steps, "phase2", cfg.lam)
    history = dict(baseline.history)
    history.update(hist)
    return Checkpoint(params, adam, baseline.phase1_steps, cfg.phase2_steps,
                      run_hash(data, split, cfg), history)


# --------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    per_class_iou: list
    miou: float
    class_frequency: list
    loss_curves: dict
    config: dict
    wall_clock: float = 0.0
    label: str = ""

    def to_dict(self) -> dict:
        """JSON form; wall clock is left out so reruns are byte-identical."""
        return {"label": self.label, "miou": self.miou,
                "per_class_iou": [None if np.isnan(x) else x for x in self.per_class_iou],
                "class_frequency": self.class_frequency, "loss_curves": self.loss_curves,
                "config": self.config}


def make_report(ckpt: Checkpoint, data: Dataset, split: LabelSplit, cfg: TrainConfig,
                label: str, wall: float = 0.0, on: str = "eval") -> RunReport:
    fs = data.eval if on == "eval" else data.train
    iou, m = evaluate(ckpt.params, fs.rgb, fs.seg, data.num_classes)
    freq = class_frequency(data.train.seg[split.indices], data.num_classes)
    return RunReport(iou.tolist(), m, freq.tolist(), ckpt.history,
                     {"train": cfg.to_dict(), "fraction": split.fraction, "split_seed": split.seed,
                      "dataset_seed": data.seed, "evaluated_on": on}, wall, label)


@dataclass
class Cell:
    """Results of one (fraction, seed) configuration."""

    fraction: float
    seed: int
    phase1: RunReport
    baseline: RunReport
    consist: RunReport
    checkpoints: dict = field(default_factory=dict)


def run_cell(data: Dataset, fraction: float, seed: int, cfg: TrainConfig,
             phase1: Checkpoint | None = None) -> Cell:
    """Phase 1, then a supervised-only control and the consistency run from it."""
    cfg = cfg.with_(seed=seed)
    split = split_labels(data.train.n, fraction, seed)
    t0 = time.perf_counter()
    if phase1 is None:
        phase1 = train_baseline(data, split, cfg)
    t1 = time.perf_counter()
    control = train_with_consistency(data, split, phase1, cfg.with_(lam=0.0))
    t2 = time.perf_counter()
    consist = train_with_consistency(data, split, phase1, cfg)
    t3 = time.perf_counter()
    return Cell(fraction, seed,
                make_report(phase1, data, split, cfg, "phase1", t1 - t0),
                make_report(control, data, split, cfg.with_(lam=0.0), "baseline", t2 - t1),
                make_report(consist, data, split, cfg, "consistency", t3 - t2),
                {"phase1": phase1, "baseline": control, "consist": consist})


def label_efficiency(fractions, base, cons) -> list:
    """For each fraction f: largest g/f such that consistency at f >= baseline at g."""
    out = []
    for f, c in zip(fractions, cons):
        best = None
        for g, b in zip(fractions, base):
            if c >= b and (best is None or g > best):
                best = g
        out.append(None if best is None else best / f)
    return out


def sweep_supervision(data: Dataset, fractions, cfg: TrainConfig, seeds=(0,), workers: int = 1,
                      cache: dict | None = None):
    """Table-1 analog: rows per (fraction, seed) plus per-fraction means."""
    keys = [(f, s) for f in fractions for s in seeds]
    cells = _run_cells(data, keys, cfg, workers, cache)
    rows = []
    for f in fractions:
        for s in seeds:
            c = cells[(f, s)]
            rows.append({"fraction": f, "seed": s, "phase1_miou": c.phase1.miou,
                         "baseline_miou": c.baseline.miou, "consist_miou": c.consist.miou})
    means = []
    for f in fractions:
        sub = [r for r in rows if r["fraction"] == f]
        means.append({"fraction": f, "seed": "mean",
                      **{k: float(np.mean([r[k] for r in sub]))
                         for k in ("phase1_miou", "baseline_miou", "consist_miou")}})
    eff = label_efficiency(fractions, [m["baseline_miou"] for m in means],
                           [m["consist_miou"] for m in means])
    for m, e in zip(means, eff):
        m["label_efficiency"] = e
    return rows + means, cells


def _cell_worker(args):
    data, f, s, cfg = args
    return run_cell(data, f, s, cfg)


def _run_cells(data, keys, cfg, workers, cache):
    cache = {} if cache is None else cache
    todo = [k for k in keys if (k, cfg) not in cache]
    if workers > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for k, cell in zip(todo, ex.map(_cell_worker, [(data, f, s, cfg) for f, s in todo])):
                cache[(k, cfg)] = cell
    else:
        for k in todo:
            cache[(k, cfg)] = run_cell(data, k[0], k[1], cfg)
    return {k: cache[(k, cfg)] for k in keys}


ABLATION_ROWS = (
    ("baseline", None),
    ("uniform", "uniform"),
    ("label_prior", "label"),
    ("pixel_prior", "pixel"),
    ("combined", "combined"),
    ("ce", "ce"),
    ("combined+ce", "combined+ce"),
)


def ablate_losses(data: Dataset, split: LabelSplit, cfg: TrainConfig,
                  phase1: Checkpoint | None = None, cache: dict | None = None):
    """Table-2 analog: seven rows continued from one shared phase-1 checkpoint."""
    if phase1 is None:
        phase1 = train_baseline(data, split, cfg)
    cache = {} if cache is None else cache
    rows, reports = [], {}
    for name, variant in ABLATION_ROWS:
        row_cfg = cfg.with_(lam=0.0) if variant is None else cfg.with_(variant=variant)
        key = ("ablate", split.fraction, split.seed, row_cfg)
        if key not in cache:
            t0 = time.perf_counter()
            ck = train_with_consistency(data, split, phase1, row_cfg)
            cache[key] = make_report(ck, data, split, row_cfg, name, time.perf_counter() - t0)
        rep = cache[key]
        reports[name] = rep
        rows.append({"row": name, "variant": variant or "none", "miou": rep.miou})
    return rows, reports


def frequency_analysis(report_base: RunReport, report_consist: RunReport, frequency=None):
    """Per-class (frequency, relative IOU change) and their Spearman correlation."""
    freq = np.asarray(report_base.class_frequency if frequency is None else frequency, dtype=float)
    base = np.asarray(report_base.per_class_iou, dtype=float)
    cons = np.asarray(report_consist.per_class_iou, dtype=float)
    rel = (cons - base) / np.maximum(base, REL_EPS)
    rows = [{"class": c, "frequency": float(freq[c]),
             "iou_base": None if np.isnan(base[c]) else float(base[c]),
             "iou_consist": None if np.isnan(cons[c]) else float(cons[c]),
             "rel_improvement": None if np.isnan(rel[c]) else float(rel[c])}
            for c in range(len(freq))]
    ok = ~np.isnan(rel)
    rho = float("nan")
    if ok.sum() >= 3 and np.ptp(freq[ok]) > 0 and np.ptp(rel[ok]) > 0:
        rho = float(spearmanr(freq[ok], rel[ok]).statistic)
    return rows, rho
