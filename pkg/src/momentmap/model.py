"""Moment localization network: query/clip encoding, 2D moment maps,
fusion, per-scale gated-convolution context network and score heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .lattice import LatticeGeometry, ScaleLayout, scale_layouts
from .numerics import (
    ParamSet,
    Tensor,
    batch_norm,
    bilstm_encode,
    conv,
    gated_conv2d,
    index,
    init_lstm,
    l2norm,
    linear,
    mask,
    mul,
    out_extent,
    sigmoid,
    stack,
    take,
    tanh,
)
from .numerics.nn import RunningStats


class ModelError(ValueError):
    pass


class ExtractorError(ModelError):
    pass


@dataclass
class ScaleMaps:
    """Per-scale dense-at-scale tensors [B, rows, cols, C] with their masks [B, rows, cols]."""

    layouts: list[ScaleLayout]
    maps: list[Tensor]
    masks: list[np.ndarray]

    def __len__(self):
        return len(self.maps)


def layout_masks(layouts: Sequence[ScaleLayout], n_valid: np.ndarray) -> list[np.ndarray]:
    """Layout masks further restricted to moments inside each sample's real clips."""
    out = []
    for lay in layouts:
        end = lay.starts + lay.dur_idx  # last clip index per cell
        out.append(lay.mask[None] & (end[None] < n_valid[:, None, None]))
    return out


# ---------------------------------------------------------------------------
# stacked-convolution schedule


def conv_schedule(A: int, K: int) -> list[tuple[int, int]]:
    """(kernel, stride) per layer, 0-based. Layer 0 is 1x1; layers (i+1)A/2 for
    1 <= i <= K-1 are kernel 3 / stride 2; the rest kernel 2 / stride 1."""
    if A % 2:
        raise ExtractorError(f"stacked-convolution schedule needs an even A, got {A}")
    n_layers = (K + 1) * A // 2
    down = {(i + 1) * A // 2 for i in range(1, K)}
    return [(1, 1) if j == 0 else (3, 2) if j in down else (2, 1) for j in range(n_layers)]


@dataclass(frozen=True)
class LayerCoverage:
    layer: int
    step: int  # start offset between consecutive outputs, in clips
    duration: int  # clips spanned by every output of this layer
    length: int  # number of outputs for the input length it was built for


def track_receptive_fields(N: int, A: int, K: int) -> list[LayerCoverage]:
    out = []
    step, dur, length = 1, 0, N
    for j, (k, s) in enumerate(conv_schedule(A, K)):
        dur = 1 if j == 0 else dur + (k - 1) * step
        length = out_extent(length, k, s) if length > 0 else 0
        step *= s
        out.append(LayerCoverage(j, step, dur, max(length, 0)))
    return out


def closed_form_dur_idx(j: int, A: int) -> int:
    """Duration index of layer j's outputs by the published closed form."""
    if j < A:
        return j
    r = j - A + 1
    return A + 2 ** (-(-2 * r // A)) * r - 1


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> ParamSet:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    p = ParamSet()
    p.add("embed", rng.normal(0.0, 1.0, size=(config.vocab, config.d_s)).astype(dt))
    init_lstm(p, config.d_s, config.H, config.lstm_layers, rng, dt)
    p.add("clip.w", _uniform(rng, (config.d_v, config.d_raw), config.d_raw, dt))
    p.add("clip.b", _uniform(rng, (config.d_v,), config.d_raw, dt))
    if config.pool_or_conv == "conv":
        for j, (k, _) in enumerate(conv_schedule(config.A, config.K)):
            p.add(f"ext.{j}.w", _uniform(rng, (k, config.d_v, config.d_v), k * config.d_v, dt))
            # batch norm cancels a conv bias, so the layer only gets one without it
            if not config.batch_norm:
                p.add(f"ext.{j}.b", _uniform(rng, (config.d_v,), k * config.d_v, dt))
            else:
                p.add(f"ext.{j}.bn_g", np.ones(config.d_v, dtype=dt))
                p.add(f"ext.{j}.bn_b", np.zeros(config.d_v, dtype=dt))
    ds = 2 * config.H
    p.add("fuse.ws", _uniform(rng, (config.d_f, ds), ds, dt))
    p.add("fuse.wm", _uniform(rng, (config.d_f, config.d_v), config.d_v, dt))
    if config.fusion_bias:
        # zero biases keep the query-dependent part of the sentence projection dominant at start
        p.add("fuse.bs", np.zeros(config.d_f, dtype=dt))
        p.add("fuse.bm", np.zeros(config.d_f, dtype=dt))
    kk, c = config.kappa, config.d_f
    for s in _scale_keys(config):
        for layer in range(config.L):
            pre = f"tan.{s}.{layer}"
            for part in ("f", "g"):
                p.add(f"{pre}.w{part}", _uniform(rng, (kk, kk, c, c), kk * kk * c, dt))
                p.add(f"{pre}.b{part}", _uniform(rng, (c,), kk * kk * c, dt))
        for h in range(config.head_layers):
            width = 1 if h == config.head_layers - 1 else c
            p.add(f"head.{s}.{h}.w", _uniform(rng, (width, c), c, dt))
            p.add(f"head.{s}.{h}.b", _uniform(rng, (width,), c, dt))
    return p


def _scale_keys(config: ModelConfig) -> list[str]:
    n = 1 if config.map != "multi" else config.K
    return ["s"] if config.share_scales else [str(k) for k in range(n)]


def _scale_key(config: ModelConfig, k: int) -> str:
    return "s" if config.share_scales else str(k)


def zero_params(params: ParamSet) -> None:
    for _, t in params.items():
        t.data[...] = 0.0


# ---------------------------------------------------------------------------
# pipeline stages


def encode_query(tokens, params: ParamSet, config: ModelConfig, lengths=None) -> Tensor:
    """Sentence feature f^S: embedding lookup then bi-LSTM average. ``tokens`` is
    a list of ids or a padded [B, T] id array with ``lengths``."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ModelError("empty query")
    vocab = params["embed"].shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ModelError(f"token id outside vocabulary of size {vocab}")
    words = take(params["embed"], ids, axis=0)
    return bilstm_encode(words, params, layers=config.lstm_layers, hidden=config.H, lengths=lengths)


def encode_clips(raw: Tensor, params: ParamSet) -> Tensor:
    w = params["clip.w"]
    if raw.shape[-1] != w.shape[1]:
        raise ModelError(f"clip features have width {raw.shape[-1]}, encoder expects {w.shape[1]}")
    return linear(raw, w, params["clip.b"])


def _span_max(x: Tensor, lay: ScaleLayout) -> Tensor:
    """Max over clips a..a+b for every cell of ``lay``; out-of-range cells are 0."""
    xd = x.data
    B, N, C = xd.shape
    rows, cols, step = lay.rows, lay.cols, lay.stride
    starts = np.arange(rows) * step
    out = np.zeros((B, rows, cols, C), dtype=xd.dtype)
    arg = np.zeros((B, rows, cols, C), dtype=np.int64)
    cur = xd.copy()
    cur_arg = np.broadcast_to(np.arange(N)[None, :, None], xd.shape).copy()
    want = {(j + 1) * step: j for j in range(cols)}
    for d in range(1, min(max(want), N) + 1):
        if d > 1:
            nxt = xd[:, d - 1:, :]
            cur, cur_arg = cur[:, : N - d + 1], cur_arg[:, : N - d + 1]
            up = nxt > cur
            cur = np.where(up, nxt, cur)
            cur_arg = np.where(up, np.arange(d - 1, N)[None, :, None], cur_arg)
        if d in want:
            j = want[d]
            ok = starts < N - d + 1
            out[:, ok, j] = cur[:, starts[ok]]
            arg[:, ok, j] = cur_arg[:, starts[ok]]
    live = np.zeros((rows, cols), dtype=bool)
    for d, j in want.items():
        live[:, j] = starts < N - d + 1

    def back(g):
        g = g * live[None, :, :, None]
        gx = np.zeros_like(xd)
        b_idx = np.broadcast_to(np.arange(B)[:, None, None, None], arg.shape)
        c_idx = np.broadcast_to(np.arange(C)[None, None, None, :], arg.shape)
        np.add.at(gx, (b_idx, arg, c_idx), g)
        return (gx,)

    return Tensor._result(out, (x,), back)


def extract_moments_pool(clips: Tensor, layouts: Sequence[ScaleLayout]) -> list[Tensor]:
    if not layouts or all(not lay.mask.any() for lay in layouts):
        raise ExtractorError("empty candidate set")
    return [_span_max(clips, lay) for lay in layouts]


def extract_moments_conv(
    clips: Tensor,
    params: ParamSet,
    config: ModelConfig,
    layouts: Sequence[ScaleLayout],
    stats: dict[str, RunningStats] | None = None,
    train: bool = True,
    activation: bool = True,
    return_layers: bool = False,
):
    """Stacked 1-D convolutions over the clip axis, then sampling of the
    requested cells from the layer whose receptive field matches them.

    ``activation=False`` with batch norm disabled gives a purely linear stack.
    """
    N = clips.shape[1]
    if N < config.A:
        raise ExtractorError(f"stacked-convolution extractor needs N >= A ({N} < {config.A})")
    stats = stats if stats is not None else {}
    cover = track_receptive_fields(N, config.A, config.K)
    layers: list[Tensor | None] = []
    x = clips
    for j, (k, s) in enumerate(conv_schedule(config.A, config.K)):
        if cover[j].length < 1:
            layers.append(None)
            continue
        x = conv(x, params[f"ext.{j}.w"], params.get(f"ext.{j}.b"), stride=s)
        if config.batch_norm:
            run = stats.setdefault(f"ext.{j}", RunningStats())
            x = batch_norm(x, params[f"ext.{j}.bn_g"], params[f"ext.{j}.bn_b"], run, train=train)
        if activation:
            x = tanh(x)
        layers.append(x)
    by_dur = {c.duration: c for c in cover}
    maps = []
    for lay in layouts:
        cols = []
        for j in range(lay.cols):
            dur = (j + 1) * lay.stride
            col_valid = lay.mask[:, j]
            src = by_dur.get(dur)
            if src is None or src.step > lay.stride or lay.stride % src.step:
                if col_valid.any():
                    raise ExtractorError(f"no convolution layer produces moments of {dur} clips at stride {lay.stride}")
                cols.append(None)
                continue
            rows = np.arange(lay.rows) * (lay.stride // src.step)
            if col_valid.any() and (layers[src.layer] is None or rows[col_valid].max() >= src.length):
                raise ExtractorError(f"layer {src.layer} does not cover column {j} of scale {lay.scale}")
            out = layers[src.layer]
            if out is None:
                cols.append(None)
                continue
            cols.append(take(out, np.minimum(rows, src.length - 1), axis=1))
        zero = Tensor(np.zeros((clips.shape[0], lay.rows, clips.shape[2]), dtype=clips.dtype))
        maps.append(stack([c if c is not None else zero for c in cols], axis=2))
    if return_layers:
        return maps, layers, cover
    return maps


def span_mean_weights(config: ModelConfig, params: ParamSet, width: int) -> None:
    """Overwrite the extractor kernels so the linear stack computes span means.

    Channels come in two blocks of ``width``: block 0 holds the mean of the
    layer's span, block 1 the sum over the first ``step`` clips of it (its
    head). Feed ``[x, x]`` and disable batch norm and the activation; block 0
    of every sampled cell (a, b) is then the mean of clips a..a+b.
    """
    if config.batch_norm:
        raise ExtractorError("span-mean weights need batch norm disabled")
    if config.d_v != 2 * width:
        raise ExtractorError(f"span-mean weights need d_v = 2 * {width}, got {config.d_v}")
    eye = np.eye(width)
    dur, step = 0, 1
    for j, (k, s) in enumerate(conv_schedule(config.A, config.K)):
        w = np.zeros((k, 2 * width, 2 * width))
        mean_in, head_in = slice(0, width), slice(width, 2 * width)
        if j == 0:
            w[0] = np.eye(2 * width)
            dur = 1
        else:
            new = dur + (k - 1) * step
            # the first k-1 taps contribute their heads, the last tap its whole span
            # the first k-1 taps contribute their heads (which also form the
            # next head), the last tap its whole span
            for t in range(k - 1):
                w[t, head_in, mean_in] = eye / new
                w[t, head_in, head_in] = eye
            w[k - 1, mean_in, mean_in] = eye * dur / new
            dur = new
        step *= s
        params[f"ext.{j}.w"].data[...] = w
        if f"ext.{j}.b" in params:
            params[f"ext.{j}.b"].data[...] = 0.0


def fuse(maps: Sequence[Tensor], masks: Sequence[np.ndarray], sentence: Tensor, params: ParamSet) -> list[Tensor]:
    """Per cell: l2norm((w^S f^S) * (W^M f^M)); masked cells stay 0."""
    bs = params["fuse.bs"] if "fuse.bs" in params else None
    bm = params["fuse.bm"] if "fuse.bm" in params else None
    s = linear(sentence, params["fuse.ws"], bs)
    s = s.reshape(s.shape[0], 1, 1, s.shape[1])
    out = []
    for fm, m in zip(maps, masks):
        if fm.shape[-1] != params["fuse.wm"].shape[1]:
            raise ModelError(f"moment features have width {fm.shape[-1]}, fusion expects {params['fuse.wm'].shape[1]}")
        f = l2norm(mul(s, linear(fm, params["fuse.wm"], bm)))
        out.append(mask(f, m[..., None]))
    return out


def tan_forward(
    fused: Sequence[Tensor],
    masks: Sequence[np.ndarray],
    params: ParamSet,
    config: ModelConfig,
    gate_shift: float | None = None,
    return_layers: bool = False,
):
    """L gated conv layers per scale (shape kept by zero padding, mask re-applied
    after each), then a fully connected head and a sigmoid.

    ``gate_shift`` replaces every gate pre-activation by a constant (diagnostic).
    """
    if config.kappa % 2 == 0:
        raise ModelError(f"kappa must be odd, got {config.kappa}")
    pad = config.kappa // 2
    scores, trace = [], []
    for k, (x, m) in enumerate(zip(fused, masks)):
        key = _scale_key(config, k)
        m4 = m[..., None]
        for layer in range(config.L):
            pre = f"tan.{key}.{layer}"
            wf, bf, wg, bg = (params[f"{pre}.{n}"] for n in ("wf", "bf", "wg", "bg"))
            if gate_shift is None:
                x = gated_conv2d(x, (wf, bf), (wg, bg), padding=pad)
            else:
                f = conv(x, wf, bf, padding=pad)
                x = mul(tanh(f), float(1.0 / (1.0 + np.exp(-gate_shift))))
            x = mask(x, m4)
            trace.append(x)
        for h in range(config.head_layers):
            x = linear(x, params[f"head.{key}.{h}.w"], params[f"head.{key}.{h}.b"])
            if h < config.head_layers - 1:
                x = tanh(x)
        p = mask(sigmoid(x), m4)
        scores.append(p.reshape(p.shape[:-1]))
    if return_layers:
        return scores, trace
    return scores


# ---------------------------------------------------------------------------
# score recovery


def recover_scores(scores: Sequence[np.ndarray], masks: Sequence[np.ndarray], layouts: Sequence[ScaleLayout]):
    """Collapse per-scale score maps of one sample onto unique (a, b) coordinates,
    keeping the highest score of duplicates. Returns (coords [P, 2], scores [P], scale [P])."""
    if len(scores) != len(layouts):
        raise ModelError(f"{len(scores)} score maps for {len(layouts)} layouts")
    coords, vals, src = [], [], []
    for k, (s, m, lay) in enumerate(zip(scores, masks, layouts)):
        s = np.asarray(s)
        if s.shape != (lay.rows, lay.cols):
            raise ModelError(f"score map {k} has shape {s.shape}, layout expects {(lay.rows, lay.cols)}")
        i, j = np.nonzero(m)
        coords.append(np.stack([i * lay.stride, (j + 1) * lay.stride - 1], axis=1))
        vals.append(s[i, j])
        src.append(np.full(len(i), k))
    coords = np.concatenate(coords).astype(np.int64)
    vals = np.concatenate(vals)
    src = np.concatenate(src)
    if len(coords) == 0:
        return coords.reshape(0, 2), vals, src
    uniq, inv = np.unique(coords, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    best = np.full(len(uniq), -np.inf)
    np.maximum.at(best, inv, vals)
    # scale that produced the kept score (lowest scale on ties)
    order = np.lexsort((src, -vals, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    best_src = np.empty(len(uniq), dtype=np.int64)
    best_src[inv[order][first]] = src[order][first]
    return uniq, best, best_src


# ---------------------------------------------------------------------------
# the assembled model


@dataclass
class Batch:
    clips: np.ndarray  # [B, N, d_raw]
    tokens: np.ndarray  # [B, T] padded ids
    lengths: np.ndarray  # [B]
    n_valid: np.ndarray  # [B] real (unpadded) clips per sample


class MomentLocalizer:
    def __init__(self, config: ModelConfig, params: ParamSet | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        self.stats: dict[str, RunningStats] = {}
        self._layouts: dict[int, list[ScaleLayout]] = {}

    def geometry(self, N: int) -> LatticeGeometry:
        return self.config.geometry(N)

    def layouts(self, N: int) -> list[ScaleLayout]:
        if N not in self._layouts:
            self._layouts[N] = scale_layouts(self.geometry(N))
        return self._layouts[N]

    def extract(self, clips: Tensor, layouts, train: bool) -> list[Tensor]:
        if self.config.pool_or_conv == "pool":
            return extract_moments_pool(clips, layouts)
        return extract_moments_conv(clips, self.params, self.config, layouts, self.stats, train=train)

    def forward(self, batch: Batch, train: bool = False) -> tuple[list[Tensor], list[np.ndarray], list[ScaleLayout]]:
        dt = np.dtype(self.config.dtype)
        raw = Tensor(np.asarray(batch.clips, dtype=dt))
        N = raw.shape[1]
        layouts = self.layouts(N)
        masks = layout_masks(layouts, np.asarray(batch.n_valid))
        sentence = encode_query(batch.tokens, self.params, self.config, lengths=batch.lengths)
        clips = encode_clips(raw, self.params)
        moment_maps = self.extract(clips, layouts, train)
        moment_maps = [mask(f, m[..., None]) for f, m in zip(moment_maps, masks)]
        fused = fuse(moment_maps, masks, sentence, self.params)
        scores = tan_forward(fused, masks, self.params, self.config)
        return scores, masks, layouts


def make_batch(clip_list: Sequence[np.ndarray], token_list: Sequence[Sequence[int]], N: int | None = None,
               n_valid: Sequence[int] | None = None) -> Batch:
    """Stack per-sample clips (zero-padded to ``N``) and token lists into a batch."""
    N = N if N is not None else max(len(c) for c in clip_list)
    d = clip_list[0].shape[1]
    clips = np.zeros((len(clip_list), N, d))
    nv = np.zeros(len(clip_list), dtype=np.int64)
    for i, c in enumerate(clip_list):
        n = min(len(c), N)
        clips[i, :n] = c[:n]
        nv[i] = n if n_valid is None else n_valid[i]
    T = max(len(t) for t in token_list)
    tokens = np.zeros((len(token_list), T), dtype=np.int64)
    lengths = np.array([len(t) for t in token_list], dtype=np.int64)
    for i, t in enumerate(token_list):
        tokens[i, : len(t)] = t
    return Batch(clips, tokens, lengths, nv)
