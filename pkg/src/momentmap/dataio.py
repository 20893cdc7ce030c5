"""On-disk formats: annotation JSONL, MSTF clip features, checkpoints, vocabularies.

All readers reject malformed input with a positioned diagnostic instead of
repairing it.
"""
from __future__ import annotations

import io
import json
import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig
from .lattice import TimeInterval
from .numerics import ParamSet
from .numerics.nn import RunningStats


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# annotations

FIELDS = ("video_id", "duration_s", "start_s", "end_s", "query")


@dataclass(frozen=True)
class AnnotationRecord:
    video_id: str
    duration_s: float
    start_s: float
    end_s: float
    query: str

    def __post_init__(self):
        if not (0 <= self.start_s < self.end_s <= self.duration_s):
            raise ValueError(
                f"need 0 <= start_s < end_s <= duration_s, got {self.start_s}, {self.end_s}, {self.duration_s}"
            )

    @property
    def target(self) -> TimeInterval:
        return TimeInterval(self.start_s, self.end_s)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in FIELDS}, ensure_ascii=False)


def _record(obj, where: str) -> AnnotationRecord:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected a JSON object")
    missing = [k for k in FIELDS if k not in obj]
    if missing:
        raise FormatError(f"{where}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(FIELDS))
    if extra:
        raise FormatError(f"{where}: unknown field(s) {', '.join(extra)}")
    try:
        return AnnotationRecord(
            str(obj["video_id"]), float(obj["duration_s"]), float(obj["start_s"]), float(obj["end_s"]), str(obj["query"])
        )
    except (TypeError, ValueError) as e:
        raise FormatError(f"{where}: {e}") from None


def load_annotations(path, format: str = "canonical", durations: dict[str, float] | str | Path | None = None
                     ) -> list[AnnotationRecord]:
    """Read annotation records. ``charades_txt`` needs video durations, either as a
    dict or a sidecar file of ``video_id duration`` lines."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if format == "canonical":
        out = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({e.msg} at column {e.colno})") from None
            out.append(_record(obj, f"{path}:{lineno}"))
        return out
    if format == "charades_txt":
        if durations is None:
            raise FormatError("charades_txt annotations need video durations")
        if not isinstance(durations, dict):
            durations = load_durations(durations)
        return [_charades_line(line, lineno, path, durations)
                for lineno, line in enumerate(text.splitlines(), 1) if line.strip()]
    raise ValueError(f"unknown annotation format {format!r}")


def _charades_line(line: str, lineno: int, path, durations) -> AnnotationRecord:
    where = f"{path}:{lineno}"
    head, sep, query = line.partition("##")
    parts = head.split()
    if not sep or len(parts) != 3:
        raise FormatError(f"{where}: expected 'VID START END##query'")
    vid = parts[0]
    try:
        start, end = float(parts[1]), float(parts[2])
    except ValueError:
        raise FormatError(f"{where}: non-numeric time") from None
    if vid not in durations:
        raise FormatError(f"{where}: no duration known for video {vid!r}")
    try:
        return AnnotationRecord(vid, float(durations[vid]), start, end, query.strip())
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from None


def load_durations(path) -> dict[str, float]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}:{lineno}: expected 'video_id duration'")
        try:
            out[parts[0]] = float(parts[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric duration") from None
    return out


def save_annotations(path, records: Iterable[AnnotationRecord]):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


# ---------------------------------------------------------------------------
# MSTF clip features

MSTF_MAGIC = b"MSTF"
MSTF_VERSION = 1
_MSTF_HEADER = struct.Struct("<4sIIIfI")


@dataclass
class FeatureStore:
    features: np.ndarray  # [clip_count, dim] float32
    clip_seconds: float = 1.0
    frames_per_clip: int = 0

    @property
    def clip_count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def encode_features(store: FeatureStore) -> bytes:
    f = np.asarray(store.features)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise FormatError(f"feature matrix must be non-empty 2-D, got shape {f.shape}")
    data = f.astype("<f4")
    if not np.isfinite(data).all():
        raise FormatError("feature matrix has non-finite values")
    head = _MSTF_HEADER.pack(MSTF_MAGIC, MSTF_VERSION, f.shape[0], f.shape[1], store.clip_seconds,
                             store.frames_per_clip)
    return head + data.tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> FeatureStore:
    if len(buf) < _MSTF_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(buf)} of {_MSTF_HEADER.size} bytes)")
    magic, version, count, dim, secs, fpc = _MSTF_HEADER.unpack_from(buf)
    if magic != MSTF_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0")
    if version != MSTF_VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte 4")
    if count < 1:
        raise FormatError(f"{source}: clip_count 0 at byte 8")
    if dim < 1:
        raise FormatError(f"{source}: dim 0 at byte 12")
    if not (math.isfinite(secs) and secs > 0):
        raise FormatError(f"{source}: clip_seconds {secs} at byte 16")
    need = _MSTF_HEADER.size + 4 * count * dim
    if len(buf) != need:
        kind = "truncated" if len(buf) < need else "trailing bytes in"
        raise FormatError(f"{source}: {kind} payload ({len(buf)} bytes, expected {need})")
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=_MSTF_HEADER.size).reshape(count, dim)
    bad = np.flatnonzero(~np.isfinite(data.reshape(-1)))
    if len(bad):
        raise FormatError(f"{source}: non-finite value at byte {_MSTF_HEADER.size + 4 * int(bad[0])}")
    return FeatureStore(data.astype(np.float32), float(secs), int(fpc))


def write_features(path, store: FeatureStore):
    Path(path).write_bytes(encode_features(store))


def read_features(path) -> FeatureStore:
    return decode_features(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MSTC"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = CKPT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    cfg = ckpt.config.to_text().encode()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", ckpt.version, len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BI", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def read(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{source}: truncated while reading {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if read(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic at byte 0")
    version, cfg_len = struct.unpack("<II", read(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version} at byte 4, expected {CKPT_VERSION}")
    try:
        config = ModelConfig.from_text(read(cfg_len, "config").decode())
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"{source}: bad config block at byte 12: {e}") from None
    (count,) = struct.unpack("<I", read(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        at = pos
        (nlen,) = struct.unpack("<I", read(4, "name length"))
        name = read(nlen, "name").decode()
        code, ndim = struct.unpack("<BI", read(5, f"{name} header"))
        if code not in _DTYPES:
            raise FormatError(f"{source}: tensor {name} at byte {at}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim, f"{name} shape"))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(read(n * dt.itemsize, f"{name} data"), dtype=dt).reshape(shape)
        if name in tensors:
            raise FormatError(f"{source}: duplicate tensor {name} at byte {at}")
        tensors[name] = data.astype(dt.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes at byte {pos}")
    return Checkpoint(config, tensors, version)


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


def model_checkpoint(model) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in model.params.items()}
    for name, st in model.stats.items():
        if st.initialized:
            tensors[f"bn.{name}.mean"] = st.mean.copy()
            tensors[f"bn.{name}.var"] = st.var.copy()
    return Checkpoint(model.config, tensors)


def model_from_checkpoint(ckpt: Checkpoint, config: ModelConfig | None = None):
    """Build a model from ``ckpt``; with ``config`` given, shapes must match it."""
    from .model import MomentLocalizer, init_params

    config = config if config is not None else ckpt.config
    expected = init_params(config, np.random.default_rng(0))
    params = {k: v for k, v in ckpt.tensors.items() if not k.startswith("bn.")}
    problems = []
    for name, t in expected.items():
        if name not in params:
            problems.append(f"{name} (missing)")
        elif params[name].shape != t.shape:
            problems.append(f"{name} (shape {params[name].shape} != {t.shape})")
    problems += [f"{n} (unexpected)" for n in sorted(set(params) - set(expected.names()))]
    if problems:
        raise FormatError("checkpoint does not fit the model config: " + ", ".join(sorted(problems)))
    dt = np.dtype(config.dtype)
    ps = ParamSet({name: params[name].astype(dt) for name in expected.names()})
    model = MomentLocalizer(config, ps)
    for k, v in ckpt.tensors.items():
        if k.startswith("bn.") and k.endswith(".mean"):
            layer = k[3:-5]
            model.stats[layer] = RunningStats(v.astype(dt), ckpt.tensors[f"bn.{layer}.var"].astype(dt))
    return model


# ---------------------------------------------------------------------------
# tokens

OOV_BUCKETS = 16
_SPLIT = re.compile(r"[\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return [t for t in _SPLIT.split(text.lower()) if t]


@dataclass
class Vocabulary:
    words: list[str]
    oov_buckets: int = OOV_BUCKETS

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + self.oov_buckets

    def token_id(self, token: str) -> int:
        i = self._index.get(token)
        if i is not None:
            return i
        return len(self.words) + zlib.crc32(token.encode()) % self.oov_buckets

    def encode(self, text: str) -> list[int]:
        ids = [self.token_id(t) for t in tokenize(text)]
        if not ids:
            raise ValueError(f"query {text!r} has no tokens")
        return ids

    def save(self, path):
        Path(path).write_text(f"#oov_buckets={self.oov_buckets}\n" + "".join(w + "\n" for w in self.words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        buckets = OOV_BUCKETS
        if lines and lines[0].startswith("#oov_buckets="):
            buckets = int(lines[0].split("=", 1)[1])
            lines = lines[1:]
        return cls([w for w in lines if w], buckets)


# ---------------------------------------------------------------------------
# dataset directories


def dataset_samples(root, split: str = "train"):
    """Samples of ``<root>/<split>.jsonl`` joined with ``<root>/features/<video>.mstf``."""
    from .training import Sample

    root = Path(root)
    vocab = Vocabulary.load(root / "vocab.txt")
    records = load_annotations(root / f"{split}.jsonl")
    cache: dict[str, FeatureStore] = {}
    out = []
    for r in records:
        if r.video_id not in cache:
            cache[r.video_id] = read_features(root / "features" / f"{r.video_id}.mstf")
        fs = cache[r.video_id]
        out.append(Sample(r.video_id, fs.features, vocab.encode(r.query), r.target, fs.clip_seconds))
    return out, vocab


def split_names(root) -> list[str]:
    return sorted(p.stem for p in Path(root).glob("*.jsonl"))


def write_dataset(root, splits: dict[str, Sequence[AnnotationRecord]], features: dict[str, FeatureStore],
                  vocab: Vocabulary):
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    vocab.save(root / "vocab.txt")
    for name, recs in splits.items():
        save_annotations(root / f"{name}.jsonl", recs)
    for vid in sorted(features):
        write_features(root / "features" / f"{vid}.mstf", features[vid])
