"""Synthetic planted-moment datasets for desk-scale end-to-end checks.

Every video hides one target moment whose clips carry the query's signature
vector on top of unit Gaussian noise. With ``distractor=True`` a second segment
carries another query's signature, so the sentence has to be read to find the
target; the default leaves it out.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import AnnotationRecord, FeatureStore, Vocabulary
from .lattice import ClipGrid, LatticeGeometry, MapKind, TimeInterval, best_iou
from .training import Sample


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 48
    videos: int = 500
    clips_per_video: int = 64
    feature_dim: int = 64
    snr: float = 3.0
    seed: int = 0
    concepts: int = 12
    query_len: int = 3
    min_len: int = 2
    max_len: int = 24
    lattice_A: int = 8
    lattice_K: int = 3
    min_best_iou: float = 0.7
    clip_seconds: float = 1.0
    distractor: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "videos", "clips_per_video", "feature_dim", "concepts", "query_len", "min_len"):
            if getattr(self, name) < 1:
                raise SynthError(f"{name} must be >= 1")
        if not self.snr > 0:
            raise SynthError("snr must be > 0")
        if self.concepts < 2:
            raise SynthError("need at least two concepts (target plus distractor)")
        if self.max_len < self.min_len:
            raise SynthError("max_len < min_len")
        if self.query_len > self.vocab_size:
            raise SynthError("query_len exceeds vocabulary size")


@dataclass
class SynthDataset:
    spec: SynthSpec
    records: list[AnnotationRecord]
    features: dict[str, FeatureStore]
    vocab: Vocabulary
    queries: list[str]  # one per concept
    signatures: np.ndarray  # [concepts, feature_dim], unit rows
    concept_of: list[int] = field(default_factory=list)  # per record

    def samples(self, lo: int = 0, hi: int | None = None) -> list[Sample]:
        out = []
        for r in self.records[lo:hi]:
            fs = self.features[r.video_id]
            out.append(Sample(r.video_id, fs.features, self.vocab.encode(r.query), r.target, fs.clip_seconds))
        return out


def coverable_lengths(spec: SynthSpec) -> np.ndarray:
    """Target lengths (in clips) that some placement covers at IoU > min_best_iou."""
    T = spec.clips_per_video
    geom = LatticeGeometry(MapKind.MULTI, T, spec.lattice_A, spec.lattice_K)
    grid = ClipGrid(T, spec.clip_seconds)
    lens = np.arange(spec.min_len, min(spec.max_len, T) + 1)
    ok = []
    for n in lens:
        targets = [TimeInterval(a * grid.clip_seconds, (a + n) * grid.clip_seconds) for a in range(T - n + 1)]
        if (best_iou(geom, grid, targets) > spec.min_best_iou).any():
            ok.append(n)
    return np.array(ok, dtype=np.int64)


def synth_generate(spec: SynthSpec, rng: np.random.Generator | None = None) -> SynthDataset:
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    T, d = spec.clips_per_video, spec.feature_dim
    geom = LatticeGeometry(MapKind.MULTI, T, spec.lattice_A, spec.lattice_K)
    grid = ClipGrid(T, spec.clip_seconds)
    lengths = coverable_lengths(spec)
    if len(lengths) == 0:
        raise SynthError("no target length is coverable by the lattice at this configuration")

    words = [f"w{i:03d}" for i in range(spec.vocab_size)]
    vocab = Vocabulary(words)
    queries = []
    for _ in range(spec.concepts):
        picks = rng.choice(spec.vocab_size, spec.query_len, replace=False)
        queries.append(" ".join(words[i] for i in picks))
    if len(set(queries)) < spec.concepts:
        raise SynthError("vocabulary too small for distinct concept queries")
    word_vecs = rng.normal(size=(spec.vocab_size, d))
    sig = np.stack([word_vecs[[vocab.token_id(t) for t in q.split()]].sum(axis=0) for q in queries])
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)

    records, features, concept_of = [], {}, []
    tau = spec.clip_seconds
    for v in range(spec.videos):
        c = int(rng.integers(spec.concepts))
        for _ in range(1000):
            n = int(rng.choice(lengths))
            a = int(rng.integers(0, T - n + 1))
            if best_iou(geom, grid, [TimeInterval(a * tau, (a + n) * tau)])[0] > spec.min_best_iou:
                break
        else:
            raise SynthError("could not draw a lattice-coverable target")
        x = rng.normal(size=(T, d))
        x[a:a + n] += spec.snr * sig[c]
        # distractor: another concept on clips outside the target, when room allows
        free = [(0, a), (a + n, T)]
        free = [(lo, hi) for lo, hi in free if hi - lo >= spec.min_len]
        if spec.distractor and free:
            lo, hi = free[int(rng.integers(len(free)))]
            dn = int(rng.integers(spec.min_len, min(spec.max_len, hi - lo) + 1))
            da = int(rng.integers(lo, hi - dn + 1))
            other = (c + 1 + int(rng.integers(spec.concepts - 1))) % spec.concepts
            x[da:da + dn] += spec.snr * sig[other]
        vid = f"v{v:05d}"
        features[vid] = FeatureStore(x.astype(np.float32), tau, 0)
        records.append(AnnotationRecord(vid, T * tau, a * tau, (a + n) * tau, queries[c]))
        concept_of.append(c)
    return SynthDataset(spec, records, features, vocab, queries, sig.astype(np.float32), concept_of)


def decode_clips(features: np.ndarray, signatures: np.ndarray, snr: float) -> np.ndarray:
    """Nearest-signature label per clip: index into ``signatures``, or -1 for background."""
    cands = np.concatenate([np.zeros((1, signatures.shape[1])), snr * signatures], axis=0)
    d2 = ((features[:, None, :] - cands[None]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1) - 1
