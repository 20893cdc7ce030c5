"""NMS, Rank n@m metrics and end-to-end localization."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .lattice import ClipGrid, TimeInterval, iou_matrix, temporal_iou
from .model import MomentLocalizer, make_batch, recover_scores
from .numerics import no_grad


@dataclass(frozen=True)
class ScoredMoment:
    interval: TimeInterval
    score: float
    scale: int = 0
    start_idx: int = 0
    dur_idx: int = 0


@dataclass(frozen=True)
class MetricSpec:
    n: tuple[int, ...] = (1, 5)
    m: tuple[float, ...] = (0.5, 0.7)

    def __post_init__(self):
        if any(v < 1 for v in self.n):
            raise ValueError("top-n values must be >= 1")
        if any(not 0 < v < 1 for v in self.m):
            raise ValueError("IoU thresholds must lie in (0, 1)")


def nms_order(moments: Sequence[ScoredMoment]) -> list[int]:
    # score desc, then earlier start, then shorter, then input order
    return sorted(
        range(len(moments)),
        key=lambda i: (-moments[i].score, moments[i].interval.start_s, moments[i].interval.length, i),
    )


def nms(moments: Sequence[ScoredMoment], threshold: float = 0.49) -> list[ScoredMoment]:
    """Greedy suppression: keep a moment iff its IoU with every kept one is <= threshold."""
    if not moments:
        return []
    for mo in moments:
        if not np.isfinite(mo.score):
            raise ValueError("nms: non-finite score")
    order = nms_order(moments)
    starts = np.array([moments[i].interval.start_s for i in order])
    ends = np.array([moments[i].interval.end_s for i in order])
    alive = np.ones(len(order), dtype=bool)
    kept = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(moments[order[pos]])
        rest = np.arange(pos + 1, len(order))
        rest = rest[alive[rest]]
        if len(rest):
            ov = iou_matrix(starts[rest], ends[rest], [starts[pos]], [ends[pos]])[:, 0]
            alive[rest[ov > threshold]] = False
    return kept


def rank_at(
    predictions: Sequence[Sequence[ScoredMoment | TimeInterval]],
    targets: Sequence[TimeInterval],
    spec: MetricSpec = MetricSpec(),
) -> dict[tuple[int, float], float]:
    """Percentage of queries with a top-n prediction whose IoU exceeds m."""
    if len(predictions) != len(targets):
        raise ValueError("rank_at: one prediction list per target is required")
    if not targets:
        raise ValueError("rank_at: no queries")
    max_n = max(spec.n)
    # best IoU within the top-n of each query, for every n
    best = np.zeros((len(targets), len(spec.n)))
    for q, (preds, tgt) in enumerate(zip(predictions, targets)):
        ious = [temporal_iou(p.interval if isinstance(p, ScoredMoment) else p, tgt) for p in list(preds)[:max_n]]
        for c, n in enumerate(spec.n):
            best[q, c] = max(ious[:n], default=-1.0)
    out = {}
    for c, n in enumerate(spec.n):
        for m in spec.m:
            out[(n, m)] = 100.0 * float(np.mean(best[:, c] > m))
    return out


def metric_key(n: int, m: float) -> str:
    return f"rank{n}@{m:g}"


def scored_moments(coords: np.ndarray, scores: np.ndarray, scales: np.ndarray, grid: ClipGrid) -> list[ScoredMoment]:
    tau = grid.clip_seconds
    return [
        ScoredMoment(TimeInterval(a * tau, (a + b + 1) * tau), float(s), int(k), int(a), int(b))
        for (a, b), s, k in zip(coords, scores, scales)
    ]


def predict(model: MomentLocalizer, clips: np.ndarray, tokens: Sequence[int], clip_seconds: float = 1.0,
            top_n: int | None = 5, use_nms: bool = True) -> list[ScoredMoment]:
    """Scores every candidate of one video for one query; NMS then top-n."""
    with no_grad():
        batch = make_batch([clips], [list(tokens)])
        scores, masks, layouts = model.forward(batch, train=False)
    coords, vals, src = recover_scores([s.data[0] for s in scores], [m[0] for m in masks], layouts)
    moments = scored_moments(coords, vals, src, ClipGrid(len(clips), clip_seconds))
    if use_nms:
        moments = nms(moments, model.config.nms_iou)
    else:
        moments = [moments[i] for i in nms_order(moments)]
    return moments if top_n is None else moments[:top_n]


def localize(clip_features: np.ndarray, query_tokens: Sequence[int], model: MomentLocalizer,
             clip_seconds: float = 1.0, top_n: int = 5) -> list[ScoredMoment]:
    if clip_features.ndim != 2 or clip_features.shape[1] != model.config.d_raw:
        raise ValueError(f"clip features of shape {clip_features.shape} do not match d_raw={model.config.d_raw}")
    return predict(model, clip_features, query_tokens, clip_seconds, top_n=top_n)


def evaluate_samples(model: MomentLocalizer, samples, ns=(1, 5), ms=(0.5, 0.7)) -> dict[str, float]:
    preds, targets = [], []
    for s in samples:
        preds.append(predict(model, s.clips, s.tokens, s.clip_seconds, top_n=max(ns)))
        targets.append(s.target)
    table = rank_at(preds, targets, MetricSpec(tuple(ns), tuple(ms)))
    return {metric_key(n, m): v for (n, m), v in table.items()}


def write_report(table: dict[tuple[int, float], float], out_dir, stem: str = "eval") -> tuple[Path, Path]:
    """CSV with columns n,m,percentage plus a JSON summary keyed rank{n}@{m}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "m", "percentage"])
        for (n, m), v in sorted(table.items()):
            w.writerow([n, f"{m:g}", f"{v:.2f}"])
    json_path.write_text(json.dumps({metric_key(n, m): v for (n, m), v in sorted(table.items())}, indent=2) + "\n")
    return csv_path, json_path
