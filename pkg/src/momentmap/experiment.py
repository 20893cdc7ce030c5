"""End-to-end synthetic localization runs at the desk configuration."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .evaluation import evaluate_samples
from .synth import SynthSpec, synth_generate
from .training import train


@dataclass(frozen=True)
class SyntheticExperiment:
    """One training seed on a planted dataset; the last ``test_videos`` are held out."""

    synth: SynthSpec = field(default_factory=SynthSpec)
    test_videos: int = 100
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 4
    dtype: str = "float32"
    pool_or_conv: str = "conv"
    seed: int = 0
    # stop after the epoch that crosses it; 540 s keeps three seeds under 30 min on one core
    time_budget_s: float | None = 540.0

    def model_config(self, vocab: int) -> ModelConfig:
        return ModelConfig(
            vocab=vocab, d_raw=self.synth.feature_dim, N=self.synth.clips_per_video, A=self.synth.lattice_A,
            K=self.synth.lattice_K, epochs=self.epochs, lr=self.lr, batch=self.batch, dtype=self.dtype,
            pool_or_conv=self.pool_or_conv, seed=self.seed,
        )


@dataclass
class SyntheticResult:
    seed: int
    metrics: dict[str, float]
    history: list[dict]
    seconds: float


def run_synthetic(exp: SyntheticExperiment, log_path=None) -> SyntheticResult:
    t0 = time.perf_counter()
    ds = synth_generate(exp.synth)
    cut = exp.synth.videos - exp.test_videos
    if not 0 < cut < exp.synth.videos:
        raise ValueError(f"{exp.test_videos} held-out videos leave no training split")
    tr, te = ds.samples(0, cut), ds.samples(cut, None)
    cfg = exp.model_config(len(ds.vocab))
    stop = None
    if exp.time_budget_s is not None:
        def stop(row):
            return time.perf_counter() - t0 > exp.time_budget_s
    res = train(tr, cfg, np.random.default_rng(exp.seed), log_path=log_path, early_stop=stop)
    metrics = evaluate_samples(res.model, te, ns=(1, 5), ms=(0.5, 0.7))
    return SyntheticResult(exp.seed, metrics, res.history, time.perf_counter() - t0)


def median_over_seeds(exp: SyntheticExperiment, seeds=(0, 1, 2), log_dir=None) -> tuple[dict[str, float], list]:
    results = []
    for s in seeds:
        log = None if log_dir is None else f"{log_dir}/seed{s}.jsonl"
        # each seed draws its own dataset and its own initialisation
        results.append(run_synthetic(replace(exp, seed=s, synth=replace(exp.synth, seed=s)), log_path=log))
    keys = results[0].metrics
    return {k: float(np.median([r.metrics[k] for r in results])) for k in keys}, results
