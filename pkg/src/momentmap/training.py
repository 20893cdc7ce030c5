"""Supervision, loss, optimiser and the training loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig
from .lattice import CandidateSet, ClipGrid, LatticeError, ScaleLayout, TimeInterval, iou_matrix
from .model import Batch, MomentLocalizer, make_batch
from .numerics import ParamSet, Tensor, add, clip, log, mask, mul, sub, tsum

log_ = logging.getLogger(__name__)

P_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# labels


def scaled_iou_label(o):
    """0 at or below IoU 0.5, else 2*IoU - 1. Works on scalars and arrays."""
    arr = np.asarray(o, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1) or np.any(np.isnan(arr)):
        raise ValueError(f"IoU outside [0, 1]: {o}")
    y = np.where(arr <= 0.5, 0.0, 2.0 * arr - 1.0)
    return float(y) if y.ndim == 0 else y


@dataclass
class LabelMap:
    iou: list[np.ndarray]
    label: list[np.ndarray]


def _check_target(grid: ClipGrid, target: TimeInterval):
    if target.end_s <= 0 or target.start_s >= grid.num_clips * grid.clip_seconds:
        raise LatticeError(f"target [{target.start_s}, {target.end_s}) lies outside the window")


def build_labels(candidates: CandidateSet, grid: ClipGrid, target: TimeInterval) -> LabelMap:
    """IoU and scaled label for every candidate, aligned with ``candidates.scales``."""
    _check_target(grid, target)
    ious, labels = [], []
    for coords in candidates.scales:
        a, b = coords[:, 0], coords[:, 1]
        if np.any(a + b >= grid.num_clips):
            raise LatticeError("candidate outside the validity triangle")
        o = iou_matrix(a * grid.clip_seconds, (a + b + 1) * grid.clip_seconds, [target.start_s], [target.end_s])[:, 0]
        ious.append(o)
        labels.append(scaled_iou_label(np.clip(o, 0.0, 1.0)))
    return LabelMap(ious, labels)


def build_label_maps(layouts: Sequence[ScaleLayout], masks: Sequence[np.ndarray], grid: ClipGrid,
                     target: TimeInterval) -> LabelMap:
    """Label maps on the dense-at-scale layout; masked cells get 0."""
    _check_target(grid, target)
    ious, labels = [], []
    for lay, m in zip(layouts, masks):
        a = lay.starts
        b = lay.dur_idx
        o = iou_matrix((a * grid.clip_seconds).ravel(), ((a + b + 1) * grid.clip_seconds).ravel(),
                       [target.start_s], [target.end_s])[:, 0].reshape(a.shape)
        o = np.where(m, np.clip(o, 0.0, 1.0), 0.0)
        ious.append(o)
        labels.append(np.where(m, scaled_iou_label(o), 0.0))
    return LabelMap(ious, labels)


# ---------------------------------------------------------------------------
# loss


def bce_loss(scores: Sequence[Tensor], labels: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> Tensor:
    """Mean binary cross entropy over valid cells of all scales."""
    if not (len(scores) == len(labels) == len(masks)):
        raise ValueError("bce_loss: scores, labels and masks must align")
    total = None
    count = 0
    for p, y, m in zip(scores, labels, masks):
        if p.shape != np.shape(y) or p.shape != np.shape(m):
            raise ValueError(f"bce_loss: shape mismatch {p.shape} vs {np.shape(y)} vs {np.shape(m)}")
        m = np.asarray(m, dtype=bool)
        y = np.asarray(y, dtype=p.dtype)
        pc = clip(p, P_CLAMP, 1 - P_CLAMP)
        # masked cells hold p = 0; clamping keeps log finite and the mask removes them
        ll = add(mul(log(pc), y), mul(log(sub(1.0, pc)), 1.0 - y))
        term = tsum(mask(ll, m))
        total = term if total is None else add(total, term)
        count += int(m.sum())
    if count == 0:
        raise ValueError("bce_loss: no valid candidates")
    return mul(total, -1.0 / count)


# ---------------------------------------------------------------------------
# windows


@dataclass
class TrainWindow:
    start: int
    N: int
    n_valid: int  # real clips inside the window; the rest is zero padding

    @property
    def padded(self) -> int:
        return self.N - self.n_valid


def sample_window(total_clips: int, N: int, rng: np.random.Generator) -> TrainWindow:
    if total_clips < 1:
        raise ValueError("sample_window: video has no clips")
    hi = max(0, total_clips - N)
    start = int(rng.integers(0, hi + 1))
    return TrainWindow(start, N, min(N, total_clips - start))


def window_target(target: TimeInterval, window: TrainWindow, clip_seconds: float) -> TimeInterval | None:
    """Target in window-relative seconds, clipped to the window's real clips.

    Returns None when the clipped target keeps IoU < 0.5 with the original
    (the draw is skipped for that sample).
    """
    w0 = window.start * clip_seconds
    w1 = (window.start + window.n_valid) * clip_seconds
    s, e = max(target.start_s, w0), min(target.end_s, w1)
    if e <= s:
        return None
    if (e - s) / (target.end_s - target.start_s) < 0.5:
        return None
    return TimeInterval(s - w0, e - w0)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, state: OptimState, grads: dict[str, np.ndarray] | None = None) -> OptimState:
    """One Adam update with bias correction, no weight decay. Gradients default to ``.grad``."""
    grads = grads if grads is not None else params.grads()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Sample:
    """One query over one video's clip features."""

    video_id: str
    clips: np.ndarray  # [T, d_raw]
    tokens: list[int]
    target: TimeInterval
    clip_seconds: float = 1.0


def make_train_batch(model: MomentLocalizer, samples: Sequence[Sample], rng: np.random.Generator):
    N = model.config.N
    clip_list, tok_list, n_valid, targets, secs = [], [], [], [], []
    for s in samples:
        win = sample_window(len(s.clips), N, rng)
        rel = window_target(s.target, win, s.clip_seconds)
        if rel is None:
            continue
        clip_list.append(s.clips[win.start:win.start + win.n_valid])
        tok_list.append(s.tokens)
        n_valid.append(win.n_valid)
        targets.append(rel)
        secs.append(s.clip_seconds)
    if not clip_list:
        return None
    batch = make_batch(clip_list, tok_list, N=N, n_valid=n_valid)
    return batch, targets, secs


def batch_loss(model: MomentLocalizer, batch: Batch, targets, secs, train: bool = True) -> Tensor:
    scores, masks, layouts = model.forward(batch, train=train)
    N = batch.clips.shape[1]
    per_scale = [[] for _ in layouts]
    for i, (t, sec) in enumerate(zip(targets, secs)):
        lm = build_label_maps(layouts, [m[i] for m in masks], ClipGrid(N, sec), t)
        for k, y in enumerate(lm.label):
            per_scale[k].append(y)
    labels = [np.stack(ys) for ys in per_scale]
    return bce_loss(scores, labels, masks)


@dataclass
class TrainResult:
    model: MomentLocalizer
    history: list[dict]
    optim: OptimState


def train(
    samples: Sequence[Sample],
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    val: Sequence[Sample] | None = None,
    log_path=None,
    evaluate: Callable | None = None,
    model: MomentLocalizer | None = None,
    early_stop: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Shuffled mini-batch training for ``config.epochs`` epochs.

    ``evaluate(model, val)`` should return a dict of rank metrics; it defaults to
    Rank1 at IoU 0.5 and 0.7. One JSON object per epoch is appended to
    ``log_path`` when given.
    """
    if len(samples) == 0:
        raise TrainingError("empty training set")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    model = model if model is not None else MomentLocalizer(config)
    optim = OptimState(lr=config.lr)
    if evaluate is None and val:
        from .evaluation import evaluate_samples

        def evaluate(m, v):
            return evaluate_samples(m, v, ns=(1,), ms=(0.5, 0.7))

    history = []
    t0 = time.perf_counter()
    log_file = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(samples))
            losses, weights = [], []
            for lo in range(0, len(order), config.batch):
                chunk = [samples[i] for i in order[lo:lo + config.batch]]
                made = make_train_batch(model, chunk, rng)
                if made is None:
                    continue
                batch, targets, secs = made
                model.params.zero_grad()
                loss = batch_loss(model, batch, targets, secs, train=True)
                if not np.isfinite(loss.item()):
                    raise TrainingError(f"loss diverged at epoch {epoch}")
                loss.backward()
                adam_step(model.params, optim)
                losses.append(loss.item())
                weights.append(len(targets))
            row = {"epoch": epoch, "loss": float(np.average(losses, weights=weights)) if losses else float("nan")}
            if val:
                for k, v in evaluate(model, val).items():
                    row[k] = v
            row["wallclock_s"] = time.perf_counter() - t0
            history.append(row)
            log_.info("epoch %d loss %.4f", epoch, row["loss"])
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            if early_stop is not None and early_stop(row):
                break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model, history, optim)
