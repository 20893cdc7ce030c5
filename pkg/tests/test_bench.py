import numpy as np
import pytest

from momentmap.bench import (
    CSV_HEADER,
    BenchConfig,
    BenchError,
    bench_point,
    bench_scaling,
    fit_slope,
    graph_values,
    tan_macs,
)
from momentmap.lattice import LatticeGeometry, MapKind, scale_layouts
from momentmap.numerics import Tensor, add, mul

SMALL = BenchConfig(ns=(8, 16, 24, 32, 64), A=4, K=2, kappa=3, L=1, channels=4)


def test_fit_slope_exact_power():
    ns = [8, 16, 32, 64, 128]
    f = fit_slope(ns, [3.0 * n**1.5 for n in ns])
    assert f.slope == pytest.approx(1.5, abs=1e-12)
    assert f.ci_low == pytest.approx(1.5, abs=1e-9) and f.ci_high == pytest.approx(1.5, abs=1e-9)
    assert f.points == 5


def test_fit_slope_interval_contains_truth():
    rng = np.random.default_rng(0)
    ns = np.array([64, 128, 256, 512, 1024])
    vals = ns**2.0 * np.exp(rng.normal(0, 0.05, size=5))
    f = fit_slope(ns, vals)
    assert f.ci_low < 2.0 < f.ci_high


def test_fit_slope_needs_points():
    with pytest.raises(BenchError):
        fit_slope([1, 2], [1, 2])


def test_macs_dense_hand():
    lays = scale_layouts(LatticeGeometry(MapKind.DENSE, 4))
    # 16 cells, one layer of two 3x3 kernels over 2 channels, then a 2->1 head
    assert tan_macs(lays, channels=2, kappa=3, L=1) == 16 * 9 * 2 * 2 * 2 + 16 * 2


def test_graph_values_counts_shared_once():
    a = Tensor(np.ones(3), requires_grad=True)
    b = add(a, a)
    c = mul(b, b)
    assert graph_values([c]) == 9


@pytest.mark.parametrize("kw", [dict(repeats=4), dict(ns=(8, 16, 24, 32)), dict(ns=(10, 12, 14, 16, 18)),
                                dict(geometries=("hexagonal",))])
def test_config_validation(kw):
    with pytest.raises((BenchError, ValueError)):
        BenchConfig(**{**vars(SMALL), **kw}).validate()


def test_point_counts():
    row = bench_point(SMALL, "dense", 16)
    assert (row.full_grid, row.valid) == (136, 136)
    assert row.wall_ms_med > 0 and row.workset_values > 0
    assert row.macs == tan_macs(scale_layouts(LatticeGeometry(MapKind.DENSE, 16)), 4, 3, 1)


def test_scaling_report():
    rep = bench_scaling(SMALL)
    assert len(rep.rows) == 10
    assert rep.to_csv().splitlines()[0] == ",".join(CSV_HEADER)
    ns = np.array(SMALL.ns, dtype=float)
    assert rep.slope("dense", "full_grid").slope == pytest.approx(fit_slope(ns, ns * (ns + 1) / 2).slope, abs=1e-12)
    assert rep.slope("multi", "full_grid").slope == pytest.approx(1.0, abs=1e-9)
    assert rep.slope("dense", "macs").slope == pytest.approx(2.0, abs=1e-9)
    assert "wall_ms_med" in rep.slopes_csv()
