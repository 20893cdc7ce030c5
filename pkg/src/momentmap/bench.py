"""Scaling benchmark: candidate counts, multiply-accumulates, wall-clock and
working set of the context network for dense versus multi-scale maps."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .config import ModelConfig
from .lattice import LatticeGeometry, MapKind, ScaleLayout, candidate_count, scale_layouts
from .model import init_params, tan_forward
from .numerics import Tensor, mask, no_grad

CSV_HEADER = ("geometry", "N", "full_grid", "valid", "macs", "wall_ms_med", "workset_values")


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    geometries: tuple[str, ...] = ("dense", "multi")
    ns: tuple[int, ...] = (64, 128, 256, 512, 1024)
    repeats: int = 5
    A: int = 8
    K: int = 3
    kappa: int = 5
    L: int = 2
    channels: int = 32  # wide enough that per-layer overhead does not flatten the multi-scale curve at small N
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.repeats < 5:
            raise BenchError(f"need at least 5 repeats, got {self.repeats}")
        ns = sorted(set(self.ns))
        if len(ns) < 5:
            raise BenchError(f"need at least 5 distinct N values, got {len(ns)}")
        if ns[-1] < 8 * ns[0]:
            raise BenchError(f"N values must span at least 8x, got {ns[0]}..{ns[-1]}")
        for g in self.geometries:
            MapKind(g)


@dataclass
class BenchRow:
    geometry: str
    N: int
    full_grid: int
    valid: int
    macs: int
    wall_ms_med: float
    workset_values: int

    def cells(self) -> list[str]:
        return [self.geometry, str(self.N), str(self.full_grid), str(self.valid), str(self.macs),
                f"{self.wall_ms_med:.4f}", str(self.workset_values)]


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    ci_low: float
    ci_high: float
    points: int


@dataclass
class BenchReport:
    rows: list[BenchRow]
    config: BenchConfig
    fits: dict[tuple[str, str], SlopeFit] = field(default_factory=dict)

    def slope(self, geometry: str, quantity: str) -> SlopeFit:
        return self.fits[(geometry, quantity)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def slopes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["geometry", "quantity", "slope", "ci95_low", "ci95_high", "points"])
        for (g, q), f in sorted(self.fits.items()):
            w.writerow([g, q, f"{f.slope:.4f}", f"{f.ci_low:.4f}", f"{f.ci_high:.4f}", f.points])
        return buf.getvalue()


def fit_slope(ns: Sequence[float], values: Sequence[float]) -> SlopeFit:
    """Least-squares slope of log(value) on log(N) with a 95% t-interval."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    if len(x) < 3:
        raise BenchError("a slope with a confidence interval needs at least 3 points")
    fit = stats.linregress(x, y)
    half = stats.t.ppf(0.975, len(x) - 2) * fit.stderr
    return SlopeFit(float(fit.slope), float(fit.slope - half), float(fit.slope + half), len(x))


def tan_macs(layouts: Sequence[ScaleLayout], channels: int, kappa: int, L: int, head_layers: int = 1) -> int:
    """Forward multiply-accumulates of the gated layers and the head over the full grids."""
    total = 0
    for lay in layouts:
        cells = lay.rows * lay.cols
        total += L * cells * kappa * kappa * channels * 2 * channels
        for h in range(head_layers):
            total += cells * channels * (1 if h == head_layers - 1 else channels)
    return int(total)


def graph_values(outputs: Sequence[Tensor]) -> int:
    """Elements held by every distinct tensor reachable from ``outputs``."""
    seen: set[int] = set()
    stack = list(outputs)
    total = 0
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        total += t.data.size
        stack.extend(t._parents)
    return total


def _bench_config(cfg: BenchConfig, geometry: str, N: int) -> ModelConfig:
    return ModelConfig(
        map=geometry, N=N, A=cfg.A, K=cfg.K, kappa=cfg.kappa, L=cfg.L, d_f=cfg.channels,
        pool_or_conv="pool", dtype=cfg.dtype, seed=cfg.seed,
    )


def _fused_inputs(layouts, channels, rng, dtype):
    maps, masks = [], []
    for lay in layouts:
        x = rng.normal(size=(1, lay.rows, lay.cols, channels)).astype(dtype)
        m = lay.mask[None]
        maps.append(mask(Tensor(x, requires_grad=True), m[..., None]))
        masks.append(m)
    return maps, masks


def bench_point(cfg: BenchConfig, geometry: str, N: int) -> BenchRow:
    mcfg = _bench_config(cfg, geometry, N)
    geom = LatticeGeometry(MapKind(geometry), N, cfg.A, cfg.K)
    counts = candidate_count(geom)
    layouts = scale_layouts(geom)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(mcfg, rng)
    fused, masks = _fused_inputs(layouts, cfg.channels, rng, np.dtype(cfg.dtype))
    # one graph-building pass counts the working set
    workset = graph_values(tan_forward(fused, masks, params, mcfg))
    times = []
    with no_grad():
        tan_forward(fused, masks, params, mcfg)  # warm-up
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            tan_forward(fused, masks, params, mcfg)
            times.append(time.perf_counter() - t0)
    return BenchRow(
        geometry, N, counts.full_grid, counts.valid,
        tan_macs(layouts, cfg.channels, cfg.kappa, cfg.L, mcfg.head_layers),
        1000.0 * float(np.median(times)), workset,
    )


def bench_scaling(cfg: BenchConfig = BenchConfig()) -> BenchReport:
    """Rows per (geometry, N) and log-log slopes of every cost column, on one thread."""
    cfg.validate()
    ns = sorted(set(cfg.ns))
    rows = []
    with threadpool_limits(limits=1):
        for g in cfg.geometries:
            for n in ns:
                rows.append(bench_point(cfg, g, n))
    report = BenchReport(rows, cfg)
    for g in cfg.geometries:
        sub = [r for r in rows if r.geometry == g]
        xs = [r.N for r in sub]
        for q in ("full_grid", "valid", "macs", "wall_ms_med", "workset_values"):
            report.fits[(g, q)] = fit_slope(xs, [getattr(r, q) for r in sub])
    return report
