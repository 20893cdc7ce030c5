"""Candidate moment lattices on a clip grid.

Coordinates are 0-based: a moment ``(a, b)`` starts at clip ``a`` and spans
``b + 1`` clips. It fits in a video of ``N`` clips iff ``a + b < N``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class ClipGrid:
    num_clips: int
    clip_seconds: float = 1.0
    frames_per_clip: int = 0  # metadata only

    def __post_init__(self):
        if self.num_clips < 1:
            raise LatticeError(f"num_clips must be >= 1, got {self.num_clips}")
        if not self.clip_seconds > 0:
            raise LatticeError(f"clip_seconds must be > 0, got {self.clip_seconds}")


class MomentCoord(NamedTuple):
    start_idx: int
    dur_idx: int

    def is_valid(self, num_clips: int) -> bool:
        return self.start_idx >= 0 and self.dur_idx >= 0 and self.start_idx + self.dur_idx < num_clips


@dataclass(frozen=True)
class TimeInterval:
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s):
            raise LatticeError(f"bad interval [{self.start_s}, {self.end_s})")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


class MapKind(str, enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    MULTI = "multi"


@dataclass(frozen=True)
class LatticeGeometry:
    kind: MapKind
    N: int
    A: int = 16
    K: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", MapKind(self.kind))
        if self.N < 1:
            raise LatticeError(f"N must be >= 1, got {self.N}")
        if self.A < 1 or self.K < 1:
            raise LatticeError(f"A and K must be >= 1, got A={self.A}, K={self.K}")


@dataclass
class CandidateSet:
    """Per-scale candidate coordinates; ``scales[k]`` is an int array of (a, b) rows."""

    scales: list[np.ndarray]
    deduplicated: bool = False

    def __len__(self) -> int:
        return sum(len(s) for s in self.scales)

    def per_scale_counts(self) -> list[int]:
        return [len(s) for s in self.scales]

    def coord_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for s in self.scales for a, b in s}

    def iter_coords(self) -> Iterable[tuple[int, MomentCoord]]:
        for k, s in enumerate(self.scales):
            for a, b in s:
                yield k, MomentCoord(int(a), int(b))

    def flat(self) -> np.ndarray:
        if not self.scales:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate(self.scales, axis=0)


# ---------------------------------------------------------------------------
# coordinates and IoU


def coord_to_interval(coord: MomentCoord | tuple[int, int], grid: ClipGrid) -> TimeInterval:
    a, b = coord
    if not MomentCoord(a, b).is_valid(grid.num_clips):
        raise LatticeError(f"coordinate (a={a}, b={b}) invalid for N={grid.num_clips}")
    return TimeInterval(a * grid.clip_seconds, (a + b + 1) * grid.clip_seconds)


def temporal_iou(x: TimeInterval, y: TimeInterval) -> float:
    inter = min(x.end_s, y.end_s) - max(x.start_s, y.start_s)
    if inter <= 0:
        return 0.0
    union = max(x.end_s, y.end_s) - min(x.start_s, y.start_s)
    return inter / union


def iou_matrix(starts: np.ndarray, ends: np.ndarray, t_starts: np.ndarray, t_ends: np.ndarray) -> np.ndarray:
    """Vectorised IoU between each candidate (rows) and each target (columns)."""
    s = np.asarray(starts, dtype=np.float64)[:, None]
    e = np.asarray(ends, dtype=np.float64)[:, None]
    ts = np.asarray(t_starts, dtype=np.float64)[None, :]
    te = np.asarray(t_ends, dtype=np.float64)[None, :]
    inter = np.clip(np.minimum(e, te) - np.maximum(s, ts), 0.0, None)
    union = np.maximum(e, te) - np.minimum(s, ts)
    return inter / union


# ---------------------------------------------------------------------------
# enumeration


def enumerate_dense(N: int) -> CandidateSet:
    if N < 1:
        raise LatticeError(f"N must be >= 1, got {N}")
    a, b = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    keep = (a + b) < N
    return CandidateSet([np.stack([a[keep], b[keep]], axis=1).astype(np.int64)], deduplicated=True)


def _scale_exponent(length: np.ndarray, A: int) -> np.ndarray:
    # k = ceil(log2(len / A) + 1), clamped to >= 1; integer form avoids log rounding:
    # smallest k >= 1 with len <= A * 2^(k-1)
    length = np.asarray(length, dtype=np.int64)
    k = np.ones_like(length)
    cap = np.full_like(length, A)
    while True:
        over = length > cap
        if not over.any():
            return k
        k = np.where(over, k + 1, k)
        cap = np.where(over, cap * 2, cap)


def sparse_predicate(start_clip: int, end_clip: int, A: int) -> bool:
    if A < 1:
        raise LatticeError(f"A must be >= 1, got {A}")
    if not 0 <= start_clip <= end_clip:
        raise LatticeError(f"need 0 <= start <= end, got ({start_clip}, {end_clip})")
    k = int(_scale_exponent(np.array(end_clip - start_clip + 1), A))
    s = 2 ** (k - 1)
    return start_clip % s == 0 and end_clip % s == 0


def sparse_mask(N: int, A: int, full: bool = False) -> np.ndarray:
    """Boolean [N, N] map over (start, duration index); triangle-masked unless ``full``."""
    a, b = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    s = 2 ** (_scale_exponent(b + 1, A) - 1)
    m = (a % s == 0) & ((a + b) % s == 0)
    if not full:
        m &= (a + b) < N
    return m


def enumerate_sparse_single(N: int, A: int) -> CandidateSet:
    if N < 1 or A < 1:
        raise LatticeError(f"need N >= 1 and A >= 1, got N={N}, A={A}")
    m = sparse_mask(N, A)
    a, b = np.nonzero(m)
    return CandidateSet([np.stack([a, b], axis=1).astype(np.int64)], deduplicated=True)


def multiscale_rows(N: int, k: int) -> int:
    return -(-N // 2**k)


def enumerate_multiscale(N: int, A: int, K: int) -> CandidateSet:
    if N < 1 or A < 1 or K < 1:
        raise LatticeError(f"need N, A, K >= 1, got N={N}, A={A}, K={K}")
    scales = []
    for k in range(K):
        step = 2**k
        i, j = np.meshgrid(np.arange(multiscale_rows(N, k)), np.arange(A), indexing="ij")
        a = i * step
        b = (j + 1) * step - 1
        keep = (a + b) < N
        scales.append(np.stack([a[keep], b[keep]], axis=1).astype(np.int64))
    return CandidateSet(scales, deduplicated=False)


def enumerate_candidates(geometry: LatticeGeometry) -> CandidateSet:
    if geometry.kind is MapKind.DENSE:
        return enumerate_dense(geometry.N)
    if geometry.kind is MapKind.SPARSE:
        return enumerate_sparse_single(geometry.N, geometry.A)
    return enumerate_multiscale(geometry.N, geometry.A, geometry.K)


def dedup(cands: CandidateSet) -> CandidateSet:
    flat = cands.flat()
    if len(flat) == 0:
        return CandidateSet([flat], deduplicated=True)
    return CandidateSet([np.unique(flat, axis=0)], deduplicated=True)


@dataclass(frozen=True)
class CandidateCount:
    full_grid: int
    valid: int


def multiscale_full_grid(N: int, A: int, K: int) -> int:
    return sum(A * multiscale_rows(N, k) for k in range(K))


def candidate_count(geometry: LatticeGeometry) -> CandidateCount:
    N, A, K = geometry.N, geometry.A, geometry.K
    if geometry.kind is MapKind.DENSE:
        n = N * (N + 1) // 2
        return CandidateCount(n, n)
    if geometry.kind is MapKind.SPARSE:
        return CandidateCount(int(sparse_mask(N, A, full=True).sum()), len(enumerate_sparse_single(N, A)))
    return CandidateCount(multiscale_full_grid(N, A, K), len(enumerate_multiscale(N, A, K)))


# ---------------------------------------------------------------------------
# dense-at-scale map layouts


@dataclass
class ScaleLayout:
    """Placement of one scale's candidates on a dense [rows, cols] map.

    Cell (i, j) holds the moment starting at clip ``i * stride`` spanning
    ``(j + 1) * stride`` clips.
    """

    scale: int
    stride: int
    rows: int
    cols: int
    mask: np.ndarray = field(repr=False)

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.rows)[:, None] * self.stride + np.zeros((1, self.cols), dtype=np.int64)

    @property
    def dur_idx(self) -> np.ndarray:
        return np.zeros((self.rows, 1), dtype=np.int64) + (np.arange(self.cols)[None, :] + 1) * self.stride - 1

    def coords(self) -> np.ndarray:
        i, j = np.nonzero(self.mask)
        return np.stack([i * self.stride, (j + 1) * self.stride - 1], axis=1).astype(np.int64)


def scale_layouts(geometry: LatticeGeometry) -> list[ScaleLayout]:
    N = geometry.N
    if geometry.kind is MapKind.DENSE:
        a, b = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
        return [ScaleLayout(0, 1, N, N, (a + b) < N)]
    if geometry.kind is MapKind.SPARSE:
        return [ScaleLayout(0, 1, N, N, sparse_mask(N, geometry.A))]
    out = []
    for k in range(geometry.K):
        step = 2**k
        rows = multiscale_rows(N, k)
        i, j = np.meshgrid(np.arange(rows), np.arange(geometry.A), indexing="ij")
        out.append(ScaleLayout(k, step, rows, geometry.A, (i * step + (j + 1) * step - 1) < N))
    return out


def layout_candidates(layouts: Sequence[ScaleLayout]) -> CandidateSet:
    return CandidateSet([lay.coords() for lay in layouts], deduplicated=len(layouts) == 1)


# ---------------------------------------------------------------------------
# coverage analysis


def best_iou(geometry: LatticeGeometry, grid: ClipGrid, targets: Sequence[TimeInterval]) -> np.ndarray:
    """Highest IoU any candidate of ``geometry`` reaches against each target."""
    if grid.num_clips != geometry.N:
        raise LatticeError(f"grid has {grid.num_clips} clips but geometry N={geometry.N}")
    flat = dedup(enumerate_candidates(geometry)).flat()
    starts = flat[:, 0] * grid.clip_seconds
    ends = (flat[:, 0] + flat[:, 1] + 1) * grid.clip_seconds
    ts = np.array([t.start_s for t in targets])
    te = np.array([t.end_s for t in targets])
    best = np.zeros(len(targets))
    for lo in range(0, len(targets), 256):
        best[lo:lo + 256] = iou_matrix(starts, ends, ts[lo:lo + 256], te[lo:lo + 256]).max(axis=0)
    return best


def coverage_upper_bound(
    geometry: LatticeGeometry,
    grid: ClipGrid,
    targets: Sequence[TimeInterval],
    thresholds: Sequence[float] = (0.1, 0.3, 0.5, 0.7),
) -> dict[float, float]:
    """Percentage of targets an ideal scorer would hit at each IoU threshold.

    Rank1 and Rank5 bounds coincide: an oracle ranks the best candidate first.
    """
    if len(targets) == 0:
        raise LatticeError("coverage_upper_bound needs at least one target")
    for m in thresholds:
        if not 0 < m < 1:
            raise LatticeError(f"threshold {m} outside (0, 1)")
    best = best_iou(geometry, grid, targets)
    return {float(m): 100.0 * float(np.mean(best > m)) for m in thresholds}


def loglog_slope(ns: Sequence[float], values: Sequence[float]) -> float:
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def closed_form_multiscale(N: int, A: int, K: int) -> float:
    return (2 - 2.0 ** (1 - K)) * A * N
