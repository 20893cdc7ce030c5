"""Command-line entry points.

Exit status: 0 on success, 1 when a run fails, 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import BenchConfig
from .config import ConfigError, ModelConfig
from .lattice import (
    ClipGrid,
    LatticeGeometry,
    MapKind,
    TimeInterval,
    candidate_count,
    dedup,
    enumerate_candidates,
    iou_matrix,
)

log = logging.getLogger("momentmap")


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def load_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig()
    changes = {}
    for flag, name in (("n", "N"), ("k", "K"), ("a", "A"), ("kappa", "kappa"), ("layers", "L"), ("seed", "seed")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[name] = v
    return cfg.replace(**changes) if changes else cfg


def _emit(text: str, args, filename: str):
    """Write to ``--out/filename`` when --out is given, else to stdout."""
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)
    else:
        sys.stdout.write(text)


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands


def cmd_enumerate(args) -> int:
    cfg = load_config(args)
    kind = MapKind(args.map or "dense")
    geom = LatticeGeometry(kind, cfg.N, cfg.A, cfg.K)
    counts = candidate_count(geom)
    cands = enumerate_candidates(geom)
    if args.counts:
        row = {"geometry": kind.value, "N": cfg.N, "full_grid": counts.full_grid, "valid": counts.valid}
        text = json.dumps(row) + "\n" if args.format == "json" else _csv([list(row.values())], list(row))
        _emit(text, args, f"counts.{args.format}")
        return 0
    rows = [(k, int(a), int(b)) for k, (a, b) in cands.iter_coords()]
    if args.format == "json":
        text = json.dumps({"geometry": kind.value, "N": cfg.N, "full_grid": counts.full_grid,
                           "valid": counts.valid, "candidates": rows}) + "\n"
    else:
        text = _csv(rows, ["scale", "a", "b"])
    _emit(text, args, f"candidates.{args.format}")
    return 0


def upper_bound_table(records, geom_kind: MapKind, N: int, A: int, K: int, tau: float,
                      thresholds: Sequence[float]) -> dict[float, float]:
    """Coverage upper bound over annotation records.

    Each video is cut to floor(duration / tau) whole clips (at least one) and
    targets are clipped to that span. Videos longer than N clips are tiled by
    consecutive windows of N clips, the last one aligned to the video end; a
    target's best IoU is its best over all windows.
    """
    best = []
    for r in records:
        clips = max(1, int(math.floor(r.duration_s / tau + 1e-9)))
        span = clips * tau
        t = TimeInterval(min(r.start_s, span), min(r.end_s, span)) if r.start_s < span else None
        if t is None or t.end_s <= t.start_s:
            best.append(0.0)
            continue
        n = min(clips, N)
        starts = sorted(set(list(range(0, clips - n + 1, n)) + [clips - n]))
        geom = LatticeGeometry(geom_kind, n, A, K)
        grid = ClipGrid(n, tau)
        b = 0.0
        for w in starts:
            lo, hi = w * tau, (w + n) * tau
            if t.end_s <= lo or t.start_s >= hi:
                continue
            b = max(b, float(_window_best(geom, grid, t, lo)))
        best.append(b)
    best = np.array(best)
    return {float(m): 100.0 * float(np.mean(best > m)) for m in thresholds}


def _window_best(geom: LatticeGeometry, grid: ClipGrid, target: TimeInterval, offset: float) -> float:
    flat = dedup(enumerate_candidates(geom)).flat()
    starts = offset + flat[:, 0] * grid.clip_seconds
    ends = offset + (flat[:, 0] + flat[:, 1] + 1) * grid.clip_seconds
    return float(iou_matrix(starts, ends, [target.start_s], [target.end_s]).max())


def cmd_upper_bound(args) -> int:
    from .dataio import load_annotations

    cfg = load_config(args)
    records = load_annotations(args.annotations, format=args.annotation_format, durations=args.durations)
    if not records:
        raise CliError("annotation file holds no records")
    kind = MapKind(args.map or cfg.map)
    table = upper_bound_table(records, kind, cfg.N, cfg.A, cfg.K, args.tau, args.thresholds)
    if args.format == "json":
        text = json.dumps({f"{m:g}": v for m, v in table.items()}) + "\n"
    else:
        # an oracle puts its best candidate first, so Rank1 and Rank5 bounds coincide
        text = _csv([[f"{m:g}", f"{v:.2f}", f"{v:.2f}"] for m, v in table.items()], ["m", "rank1", "rank5"])
    _emit(text, args, f"upper_bound.{args.format}")
    return 0


def cmd_synth(args) -> int:
    from .dataio import write_dataset
    from .synth import SynthSpec, synth_generate

    if not args.out:
        raise CliError("synth needs --out DIR")
    spec = SynthSpec(videos=args.videos, clips_per_video=args.clips, feature_dim=args.dim, snr=args.snr,
                     seed=args.seed if args.seed is not None else 0, distractor=args.distractor)
    ds = synth_generate(spec)
    n_test = int(round(args.test_fraction * spec.videos))
    if not 0 < n_test < spec.videos:
        raise CliError(f"test fraction {args.test_fraction} leaves an empty split")
    cut = spec.videos - n_test
    write_dataset(args.out, {"train": ds.records[:cut], "test": ds.records[cut:]}, ds.features, ds.vocab)
    print(f"wrote {cut} train and {n_test} test videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .dataio import dataset_samples, model_checkpoint, save_checkpoint
    from .training import train

    if not args.out:
        raise CliError("train needs --out DIR")
    samples, vocab = dataset_samples(args.data, args.split)
    val = dataset_samples(args.data, args.val)[0] if args.val else None
    cfg = load_config(args)
    changes = {"vocab": len(vocab), "d_raw": int(samples[0].clips.shape[1])}
    for name in ("epochs", "lr", "batch"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    cfg = cfg.replace(**changes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    res = train(samples, cfg, np.random.default_rng(cfg.seed), val=val, log_path=log_path)
    save_checkpoint(out / "model.mstc", model_checkpoint(res.model))
    if res.history:
        print(json.dumps(res.history[-1]))
    return 0


def _load_model(path):
    from .dataio import load_checkpoint, model_from_checkpoint

    return model_from_checkpoint(load_checkpoint(path))


def cmd_eval(args) -> int:
    from .dataio import dataset_samples, load_annotations
    from .evaluation import MetricSpec, evaluate_samples, rank_at, write_report

    ns, ms = tuple(args.top_n), tuple(args.thresholds)
    if args.predictions:
        records = load_annotations(Path(args.data) / f"{args.split}.jsonl")
        preds = [json.loads(line) for line in Path(args.predictions).read_text().splitlines() if line.strip()]
        if len(preds) != len(records):
            raise CliError(f"{len(preds)} prediction rows for {len(records)} annotations")
        moments = [[TimeInterval(float(s), float(e)) for s, e in p["moments"]] for p in preds]
        table = rank_at(moments, [r.target for r in records], MetricSpec(ns, ms))
    else:
        if not args.checkpoint:
            raise CliError("eval needs --checkpoint or --predictions")
        model = _load_model(args.checkpoint)
        samples, _ = dataset_samples(args.data, args.split)
        flat = evaluate_samples(model, samples, ns=ns, ms=ms)
        table = {(n, m): flat[f"rank{n}@{m:g}"] for n in ns for m in ms}
    if args.out:
        write_report(table, args.out)
    rows = [[n, f"{m:g}", f"{v:.2f}"] for (n, m), v in sorted(table.items())]
    if args.format == "json":
        sys.stdout.write(json.dumps({f"rank{n}@{m:g}": v for (n, m), v in sorted(table.items())}) + "\n")
    else:
        sys.stdout.write(_csv(rows, ["n", "m", "percentage"]))
    return 0


def cmd_localize(args) -> int:
    from .dataio import Vocabulary, read_features
    from .evaluation import localize

    model = _load_model(args.checkpoint)
    store = read_features(args.features)
    vocab = Vocabulary.load(args.vocab)
    moments = localize(store.features, vocab.encode(args.query), model, store.clip_seconds, top_n=args.top)
    out = [{"start_s": m.interval.start_s, "end_s": m.interval.end_s, "score": m.score} for m in moments]
    _emit(json.dumps(out, indent=2) + "\n", args, "localize.json")
    return 0


def cmd_bench(args) -> int:
    from .bench import CSV_HEADER, bench_scaling

    cfg = load_config(args)
    bc = BenchConfig(geometries=tuple(args.geometries.split(",")), ns=tuple(args.ns), repeats=args.repeats,
                     A=cfg.A, K=cfg.K, kappa=cfg.kappa, L=cfg.L, channels=args.channels, seed=cfg.seed)
    report = bench_scaling(bc)
    if args.format == "json":
        rows = [dict(zip(CSV_HEADER, r.cells())) for r in report.rows]
        fits = {f"{g}.{q}": vars(f) for (g, q), f in report.fits.items()}
        _emit(json.dumps({"rows": rows, "slopes": fits}, indent=2) + "\n", args, "bench.json")
    else:
        _emit(report.to_csv(), args, "bench.csv")
        if args.out:
            (Path(args.out) / "bench_slopes.csv").write_text(report.slopes_csv())
        else:
            sys.stdout.write("\n" + report.slopes_csv())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value model configuration file")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--n", type=int, help="window size N in clips")
    common.add_argument("--k", type=int, help="number of scales K")
    common.add_argument("--a", type=int, help="anchors per scale A")
    common.add_argument("--kappa", type=int, help="gated convolution kernel size")
    common.add_argument("--layers", type=int, help="gated convolution layers per scale")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="momentmap", description="Multi-scale temporal moment localization toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("enumerate", parents=[common], help="list candidate moments of a lattice")
    e.add_argument("--map", choices=[k.value for k in MapKind], help="map type (default dense)")
    e.add_argument("--counts", action="store_true", help="emit only full-grid and valid counts")
    e.set_defaults(func=cmd_enumerate)

    u = sub.add_parser("upper-bound", parents=[common], help="coverage upper bound of a lattice on annotations")
    u.add_argument("--annotations", required=True)
    u.add_argument("--annotation-format", choices=("canonical", "charades_txt"), default="canonical")
    u.add_argument("--durations", help="video durations file for charades_txt annotations")
    u.add_argument("--tau", type=float, default=1.0, help="clip length in seconds")
    u.add_argument("--thresholds", type=_floats, default=[0.1, 0.3, 0.5, 0.7])
    u.add_argument("--map", choices=[k.value for k in MapKind])
    u.set_defaults(func=cmd_upper_bound)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic planted-moment dataset")
    s.add_argument("--videos", type=int, default=500)
    s.add_argument("--clips", type=int, default=64)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--snr", type=float, default=3.0)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--distractor", action="store_true", help="plant a second segment of another concept")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--val", help="split evaluated after every epoch")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", parents=[common], help="Rank n@m table for a checkpoint or prediction file")
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="test")
    v.add_argument("--checkpoint")
    v.add_argument("--predictions", help="JSONL rows with a 'moments' list of [start_s, end_s], in annotation order")
    v.add_argument("--top-n", type=_ints, default=[1, 5])
    v.add_argument("--thresholds", type=_floats, default=[0.3, 0.5, 0.7])
    v.set_defaults(func=cmd_eval)

    lo = sub.add_parser("localize", parents=[common], help="top-n moments for one query")
    lo.add_argument("--checkpoint", required=True)
    lo.add_argument("--features", required=True, help="clip feature file (.mstf)")
    lo.add_argument("--vocab", required=True)
    lo.add_argument("--query", required=True)
    lo.add_argument("--top", type=int, default=5)
    lo.set_defaults(func=cmd_localize)

    b = sub.add_parser("bench", parents=[common], help="scaling benchmark of dense versus multi-scale maps")
    b.add_argument("--ns", type=_ints, default=[64, 128, 256, 512, 1024])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--geometries", default="dense,multi")
    b.add_argument("--channels", type=int, default=BenchConfig.channels)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
