import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentmap.config import ModelConfig
from momentmap.lattice import LatticeGeometry, MapKind, enumerate_multiscale, scale_layouts
from momentmap.model import (
    ExtractorError,
    ModelError,
    MomentLocalizer,
    closed_form_dur_idx,
    conv_schedule,
    encode_clips,
    encode_query,
    extract_moments_conv,
    extract_moments_pool,
    fuse,
    init_params,
    layout_masks,
    make_batch,
    recover_scores,
    span_mean_weights,
    tan_forward,
    track_receptive_fields,
    zero_params,
)
from momentmap.numerics import Tensor, l2norm, linear

TINY = dict(H=4, N=16, K=2, A=4, kappa=3, L=2, d_v=6, d_f=5, d_s=7, d_raw=5, vocab=11, lstm_layers=2)


def tiny(**kw):
    return ModelConfig(**{**TINY, **kw})


def cell_coords(layouts, maps=None):
    out = set()
    for lay in layouts:
        for i, j in zip(*np.nonzero(lay.mask)):
            out.add((int(i * lay.stride), int((j + 1) * lay.stride - 1)))
    return out


class TestQuery:
    def test_zero_lstm(self):
        cfg = tiny()
        p = init_params(cfg)
        for name, t in p.items():
            if name.startswith("lstm"):
                t.data[...] = 0
        assert not encode_query([1, 2, 3], p, cfg).data.any()

    def test_repeated_token_fixture(self):
        cfg = tiny()
        p = init_params(cfg, np.random.default_rng(4))
        one = encode_query([5], p, cfg).data
        rep = encode_query([5, 5, 5], p, cfg).data
        # a recurrent state makes these differ; both are finite and deterministic
        assert np.all(np.isfinite(rep)) and np.array_equal(rep, encode_query([5, 5, 5], p, cfg).data)
        assert one.shape == rep.shape == (2 * cfg.H,)

    def test_order(self):
        cfg = tiny()
        p = init_params(cfg, np.random.default_rng(1))
        assert not np.allclose(encode_query([1, 2], p, cfg).data, encode_query([2, 1], p, cfg).data)

    def test_bad_tokens(self):
        cfg = tiny()
        p = init_params(cfg)
        with pytest.raises(ModelError):
            encode_query([], p, cfg)
        with pytest.raises(ModelError):
            encode_query([cfg.vocab], p, cfg)


class TestClips:
    def test_identity(self):
        cfg = tiny(d_raw=6)
        p = init_params(cfg)
        p["clip.w"].data[...] = np.eye(6)
        p["clip.b"].data[...] = 0
        x = np.random.default_rng(0).normal(size=(1, 4, 6))
        assert np.allclose(encode_clips(Tensor(x), p).data, x)

    def test_constant(self):
        cfg = tiny()
        p = init_params(cfg)
        p["clip.w"].data[...] = 0
        p["clip.b"].data[...] = np.arange(6.0)
        out = encode_clips(Tensor(np.ones((2, 3, 5))), p).data
        assert np.array_equal(out, np.broadcast_to(np.arange(6.0), (2, 3, 6)))

    def test_rowwise(self):
        cfg = tiny()
        p = init_params(cfg, np.random.default_rng(2))
        x = np.random.default_rng(3).normal(size=(1, 4, 5))
        out = encode_clips(Tensor(x), p).data[0]
        for r in range(4):
            assert np.allclose(out[r], linear(Tensor(x[0, r]), p["clip.w"], p["clip.b"]).data)

    def test_width_mismatch(self):
        with pytest.raises(ModelError):
            encode_clips(Tensor(np.zeros((1, 3, 4))), init_params(tiny()))


class TestPool:
    def test_constant(self):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 12, 4, 2))
        maps = extract_moments_pool(Tensor(np.full((1, 12, 2), 3.5)), lays)
        for lay, m in zip(lays, maps):
            assert np.all(m.data[0][lay.mask] == 3.5)

    def test_hand(self):
        lays = scale_layouts(LatticeGeometry(MapKind.DENSE, 3))
        m = extract_moments_pool(Tensor(np.array([[[1.0], [3.0], [2.0]]])), lays)[0].data[0, :, :, 0]
        assert m[0, 2] == 3.0
        assert list(m[:, 0]) == [1.0, 3.0, 2.0]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.sampled_from([2, 4, 8]), st.integers(1, 3), st.integers(0, 99))
    def test_span_max_oracle(self, N, A, K, seed):
        x = np.random.default_rng(seed).normal(size=(1, N, 2))
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, N, A, K))
        for lay, m in zip(lays, extract_moments_pool(Tensor(x), lays)):
            for i, j in zip(*np.nonzero(lay.mask)):
                a, b = i * lay.stride, (j + 1) * lay.stride - 1
                assert np.array_equal(m.data[0, i, j], x[0, a:a + b + 1].max(axis=0))


class TestConvSchedule:
    def test_layer_count(self):
        for A, K in [(8, 3), (16, 5), (4, 1)]:
            assert len(conv_schedule(A, K)) == (K + 1) * A // 2

    def test_kinds(self):
        sched = conv_schedule(8, 3)
        assert sched[0] == (1, 1)
        assert [j for j, ks in enumerate(sched) if ks == (3, 2)] == [8, 12]

    def test_odd_anchor(self):
        with pytest.raises(ExtractorError):
            conv_schedule(5, 2)

    @pytest.mark.parametrize("A", [4, 8, 16])
    def test_first_branch(self, A):
        cover = track_receptive_fields(8 * A, A, 3)
        for j in range(A):
            assert cover[j].duration - 1 == j == closed_form_dur_idx(j, A)

    @pytest.mark.parametrize("A", [4, 8, 16])
    def test_closed_form_until_second_downsample(self, A):
        cover = track_receptive_fields(8 * A, A, 3)
        for j in range(A, 3 * A // 2):
            assert cover[j].duration - 1 == closed_form_dur_idx(j, A)

    def test_durations_per_scale(self):
        durs = [c.duration for c in track_receptive_fields(64, 8, 3)]
        assert durs == [1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 20, 24, 28, 32]


GEOMS = [(16, 4, 2), (64, 8, 3), (40, 4, 3), (37, 6, 2), (128, 8, 4), (8, 8, 1)]


class TestConvExtractor:
    @pytest.mark.parametrize("N,A,K", GEOMS)
    def test_coordinates_match_pool_and_lattice(self, N, A, K):
        cfg = tiny(N=N, A=A, K=K)
        lays = scale_layouts(cfg.geometry(N))
        want = {tuple(map(int, c)) for c in enumerate_multiscale(N, A, K).flat()}
        assert cell_coords(lays) == want
        x = Tensor(np.random.default_rng(0).normal(size=(1, N, cfg.d_v)))
        p = init_params(cfg)
        conv_maps = extract_moments_conv(x, p, cfg, lays)
        pool_maps = extract_moments_pool(x, lays)
        for lay, c, q in zip(lays, conv_maps, pool_maps):
            assert c.shape == q.shape == (1, lay.rows, lay.cols, cfg.d_v)

    @pytest.mark.parametrize("N,A,K", GEOMS)
    def test_span_means(self, N, A, K):
        width = 3
        cfg = tiny(N=N, A=A, K=K, d_v=2 * width, batch_norm=False)
        p = init_params(cfg)
        span_mean_weights(cfg, p, width)
        x = np.random.default_rng(N).normal(size=(2, N, width))
        lays = scale_layouts(cfg.geometry(N))
        maps = extract_moments_conv(Tensor(np.concatenate([x, x], -1)), p, cfg, lays, activation=False)
        for lay, m in zip(lays, maps):
            for i, j in zip(*np.nonzero(lay.mask)):
                a, b = i * lay.stride, (j + 1) * lay.stride - 1
                assert np.abs(m.data[:, i, j, :width] - x[:, a:a + b + 1].mean(axis=1)).max() < 1e-6

    def test_span_mean_needs_linear_config(self):
        with pytest.raises(ExtractorError):
            span_mean_weights(tiny(d_v=6), init_params(tiny(d_v=6)), 3)

    def test_short_window(self):
        cfg = tiny(N=16, A=8, K=2)
        with pytest.raises(ExtractorError):
            extract_moments_conv(Tensor(np.zeros((1, 4, 6))), init_params(cfg), cfg, scale_layouts(cfg.geometry(4)))

    def test_uncovered_cell_is_an_error(self):
        # a geometry whose largest duration no layer of the schedule produces
        cfg = tiny(N=32, A=4, K=2)
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 32, 4, 3))
        with pytest.raises(ExtractorError):
            extract_moments_conv(Tensor(np.zeros((1, 32, 6))), init_params(cfg), cfg, lays)


class TestFuse:
    def test_identity_projection(self):
        cfg = tiny(d_v=5, d_f=5)
        p = init_params(cfg)
        p["fuse.ws"].data[...] = 0
        p["fuse.bs"].data[...] = 1.0
        p["fuse.wm"].data[...] = np.eye(5)
        p["fuse.bm"].data[...] = 0
        fm = np.random.default_rng(0).normal(size=(1, 4, 3, 5))
        m = np.ones((1, 4, 3), dtype=bool)
        out = fuse([Tensor(fm)], [m], Tensor(np.ones((1, 8))), p)[0].data
        assert np.allclose(out, l2norm(Tensor(fm)).data)

    def test_zero_sentence(self):
        cfg = tiny()
        p = init_params(cfg, np.random.default_rng(1))
        p["fuse.bs"].data[...] = 0
        fm = np.random.default_rng(0).normal(size=(1, 4, 3, 6))
        out = fuse([Tensor(fm)], [np.ones((1, 4, 3), bool)], Tensor(np.zeros((1, 8))), p)[0].data
        assert not out.any()

    def test_unit_norms_and_mask(self):
        cfg = tiny()
        p = init_params(cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        m = rng.random((2, 4, 3)) > 0.3
        out = fuse([Tensor(rng.normal(size=(2, 4, 3, 6)))], [m], Tensor(rng.normal(size=(2, 8))), p)[0].data
        assert np.allclose(np.linalg.norm(out, axis=-1)[m], 1.0)
        assert not out[~m].any()


def tan_inputs(cfg, N, seed=0, n_valid=None):
    lays = scale_layouts(cfg.geometry(N))
    masks = layout_masks(lays, np.array([N if n_valid is None else n_valid]))
    rng = np.random.default_rng(seed)
    fused = [Tensor(rng.normal(size=(1, lay.rows, lay.cols, cfg.d_f)) * m[..., None]) for lay, m in zip(lays, masks)]
    return lays, masks, fused


class TestTAN:
    def test_zero_head(self):
        cfg = tiny()
        p = init_params(cfg)
        for name, t in p.items():
            if name.startswith("head"):
                t.data[...] = 0
        lays, masks, fused = tan_inputs(cfg, 16)
        for s, m in zip(tan_forward(fused, masks, p, cfg), masks):
            assert np.all(s.data[m] == 0.5) and not s.data[~m].any()

    def test_shapes(self):
        cfg = tiny()
        lays, masks, fused = tan_inputs(cfg, 16)
        scores = tan_forward(fused, masks, init_params(cfg), cfg)
        assert [s.shape for s in scores] == [(1, lay.rows, lay.cols) for lay in lays]

    def test_masked_with_ones(self):
        cfg = tiny()
        p = init_params(cfg)
        for _, t in p.items():
            t.data[...] = 1.0
        lays, masks, fused = tan_inputs(cfg, 16, n_valid=11)
        scores, layers = tan_forward(fused, masks, p, cfg, return_layers=True)
        for s, m in zip(scores, masks):
            assert not s.data[~m].any() and np.all(s.data[m] > 0)
        assert all(not x.data[~np.broadcast_to(m[..., None], x.shape)].any()
                   for x, m in zip(layers, [mm for mm in masks for _ in range(cfg.L)]))

    def test_even_kernel(self):
        cfg = tiny()
        lays, masks, fused = tan_inputs(cfg, 16)
        p = init_params(cfg)
        object.__setattr__(cfg, "kappa", 4)  # bypass config validation
        with pytest.raises(ModelError):
            tan_forward(fused, masks, p, cfg)

    def test_gate_shut_off(self):
        cfg = tiny(head_layers=1)
        p = init_params(cfg, np.random.default_rng(5))
        lays, masks, fused = tan_inputs(cfg, 16, seed=2)
        scores = tan_forward(fused, masks, p, cfg, gate_shift=-20.0)
        for k, (s, m) in enumerate(zip(scores, masks)):
            want = 1 / (1 + np.exp(-p[f"head.{k}.0.b"].data[0]))
            assert np.abs(s.data[m] - want).max() < 1e-4


class TestRecover:
    def test_duplicate_takes_max(self):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 8, 2, 2))
        masks = [lay.mask for lay in lays]
        s0, s1 = np.zeros((8, 2)), np.zeros((4, 2))
        s0[0, 1] = 0.3  # (0, 1) at scale 0
        s1[0, 0] = 0.7  # (0, 1) at scale 1
        coords, vals, src = recover_scores([s0, s1], masks, lays)
        k = [tuple(c) for c in coords].index((0, 1))
        assert vals[k] == 0.7 and src[k] == 1

    def test_single_scale_identity(self):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 10, 4, 1))
        s = np.random.default_rng(0).random((10, 4))
        coords, vals, _ = recover_scores([s], [lays[0].mask], lays)
        want = {(a, b): s[a, b] for a in range(10) for b in range(4) if a + b < 10}
        assert {tuple(c): v for c, v in zip(coords, vals)} == want

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 64), st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(0, 999))
    def test_dedup_oracle(self, N, A, K, seed):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, N, A, K))
        rng = np.random.default_rng(seed)
        maps = [rng.random((lay.rows, lay.cols)) for lay in lays]
        coords, vals, _ = recover_scores(maps, [lay.mask for lay in lays], lays)
        best = {}
        for lay, s in zip(lays, maps):
            for i, j in zip(*np.nonzero(lay.mask)):
                key = (int(i * lay.stride), int((j + 1) * lay.stride - 1))
                best[key] = max(best.get(key, -1.0), s[i, j])
        assert len(coords) == len(best)
        assert {tuple(map(int, c)): v for c, v in zip(coords, vals)} == best

    def test_shape_mismatch(self):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 8, 2, 2))
        with pytest.raises(ModelError):
            recover_scores([np.zeros((8, 2))], [lays[0].mask], lays)


class TestForward:
    @pytest.mark.parametrize("poc", ["pool", "conv"])
    def test_finite_deterministic(self, poc):
        for seed in range(100):
            cfg = tiny(pool_or_conv=poc, seed=seed)
            m = MomentLocalizer(cfg)
            rng = np.random.default_rng(seed)
            b = make_batch([rng.normal(size=(16, 5)), rng.normal(size=(12, 5))], [[1, 2], [3]], N=16)
            s1, masks, _ = m.forward(b, train=True)
            s2, _, _ = m.forward(b, train=True)
            for x, y, mk in zip(s1, s2, masks):
                assert np.all(np.isfinite(x.data)) and np.array_equal(x.data, y.data)
                assert not x.data[~mk].any()

    def test_padding_mask(self):
        lays = scale_layouts(LatticeGeometry(MapKind.MULTI, 16, 4, 2))
        masks = layout_masks(lays, np.array([16, 10]))
        for lay, m in zip(lays, masks):
            assert np.array_equal(m[0], lay.mask)
            ends = lay.starts + lay.dur_idx
            assert np.array_equal(m[1], lay.mask & (ends < 10))

    def test_zero_params_give_half(self):
        cfg = tiny()
        m = MomentLocalizer(cfg)
        zero_params(m.params)
        b = make_batch([np.ones((16, 5))], [[1]], N=16)
        scores, masks, _ = m.forward(b, train=True)
        for s, mk in zip(scores, masks):
            assert np.all(s.data[mk] == 0.5)
