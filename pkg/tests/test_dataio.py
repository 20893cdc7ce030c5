import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentmap.config import ModelConfig
from momentmap.dataio import (
    OOV_BUCKETS,
    AnnotationRecord,
    Checkpoint,
    FormatError,
    FeatureStore,
    Vocabulary,
    dataset_samples,
    decode_checkpoint,
    decode_features,
    encode_checkpoint,
    encode_features,
    load_annotations,
    model_checkpoint,
    model_from_checkpoint,
    read_features,
    save_annotations,
    tokenize,
    write_dataset,
    write_features,
)
from momentmap.model import MomentLocalizer, zero_params

SMALL = dict(H=4, N=16, K=2, A=4, kappa=3, L=1, d_v=6, d_f=6, d_s=4, d_raw=5, vocab=9, lstm_layers=1)


def records():
    return [
        AnnotationRecord("a", 30.0, 1.5, 7.25, "a person opens the door"),
        AnnotationRecord("b", 12.0, 0.0, 12.0, "Someone laughs, loudly!"),
        AnnotationRecord("c", 8.5, 3.0, 4.0, "naïve café query"),
    ]


class TestAnnotations:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "x.jsonl"
        save_annotations(p, records())
        assert load_annotations(p) == records()
        first = p.read_bytes()
        save_annotations(p, load_annotations(p))
        assert p.read_bytes() == first

    def test_field_order_normalised(self, tmp_path):
        p = tmp_path / "x.jsonl"
        p.write_text(json.dumps({"query": "q", "end_s": 2.0, "start_s": 1.0, "video_id": "v", "duration_s": 3.0}) + "\n")
        save_annotations(tmp_path / "y.jsonl", load_annotations(p))
        line = (tmp_path / "y.jsonl").read_text().strip()
        assert list(json.loads(line)) == ["video_id", "duration_s", "start_s", "end_s", "query"]

    def test_bad_interval_names_line(self, tmp_path):
        p = tmp_path / "x.jsonl"
        lines = [r.to_json() for r in records()]
        lines.insert(1, json.dumps({"video_id": "v", "duration_s": 9.0, "start_s": 4.0, "end_s": 4.0, "query": "q"}))
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match=r"x\.jsonl:2:"):
            load_annotations(p)

    @pytest.mark.parametrize("line,msg", [
        ("{not json", "malformed JSON"),
        ('{"video_id": "v", "duration_s": 9, "start_s": 1, "end_s": 2}', "missing field"),
        ('{"video_id": "v", "duration_s": 9, "start_s": 1, "end_s": 2, "query": "q", "x": 1}', "unknown field"),
        ("[1, 2]", "JSON object"),
        ('{"video_id": "v", "duration_s": "nine", "start_s": 1, "end_s": 2, "query": "q"}', ":1:"),
    ])
    def test_malformed(self, tmp_path, line, msg):
        p = tmp_path / "x.jsonl"
        p.write_text(line + "\n")
        with pytest.raises(FormatError, match=msg):
            load_annotations(p)

    def test_charades(self, tmp_path):
        ann, dur = tmp_path / "a.txt", tmp_path / "d.txt"
        ann.write_text("VID 2.5 7.0##a person opens the door\n")
        dur.write_text("VID 30.1\n")
        (rec,) = load_annotations(ann, "charades_txt", dur)
        assert rec == AnnotationRecord("VID", 30.1, 2.5, 7.0, "a person opens the door")

    def test_charades_errors(self, tmp_path):
        ann = tmp_path / "a.txt"
        ann.write_text("VID 2.5 7.0##ok\nVID 2.5##broken\n")
        with pytest.raises(FormatError, match=r"a\.txt:2"):
            load_annotations(ann, "charades_txt", {"VID": 30.0})
        with pytest.raises(FormatError, match="no duration"):
            load_annotations(ann, "charades_txt", {"OTHER": 30.0})
        with pytest.raises(FormatError):
            load_annotations(ann, "charades_txt")

    def test_unknown_format(self, tmp_path):
        p = tmp_path / "x"
        p.write_text("")
        with pytest.raises(ValueError):
            load_annotations(p, "activitynet")


class TestFeatures:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 9), st.floats(0.125, 10, width=32), st.integers(0, 64), st.integers(0, 99))
    def test_round_trip(self, n, d, secs, fpc, seed):
        x = np.random.default_rng(seed).normal(size=(n, d)).astype(np.float32)
        buf = encode_features(FeatureStore(x, secs, fpc))
        assert len(buf) == 24 + 4 * n * d
        back = decode_features(buf)
        assert back.features.tobytes() == x.tobytes()
        assert (back.clip_seconds, back.frames_per_clip) == (secs, fpc)
        assert encode_features(back) == buf

    def test_layout(self):
        buf = encode_features(FeatureStore(np.array([[1.0, 2.0]], np.float32), 0.5, 16))
        assert buf[:4] == b"MSTF"
        assert struct.unpack("<IIIfI", buf[4:24]) == (1, 1, 2, 0.5, 16)
        assert np.frombuffer(buf[24:], "<f4").tolist() == [1.0, 2.0]

    def test_file(self, tmp_path):
        x = np.arange(6, dtype=np.float32).reshape(3, 2)
        write_features(tmp_path / "f.mstf", FeatureStore(x))
        assert np.array_equal(read_features(tmp_path / "f.mstf").features, x)

    def good(self):
        return bytearray(encode_features(FeatureStore(np.ones((3, 2), np.float32))))

    def test_bad_magic(self):
        buf = self.good()
        buf[0:4] = b"XXXX"
        with pytest.raises(FormatError, match="byte 0"):
            decode_features(bytes(buf))

    def test_truncated(self):
        buf = bytes(self.good())
        with pytest.raises(FormatError, match="truncated payload"):
            decode_features(buf[:-1])
        with pytest.raises(FormatError, match="truncated header"):
            decode_features(buf[:10])
        with pytest.raises(FormatError, match="trailing"):
            decode_features(buf + b"\0")

    def test_zero_dim(self):
        buf = self.good()
        buf[12:16] = struct.pack("<I", 0)
        with pytest.raises(FormatError, match="dim 0"):
            decode_features(bytes(buf))

    def test_version(self):
        buf = self.good()
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError, match="version 2"):
            decode_features(bytes(buf))

    def test_non_finite_position(self):
        buf = self.good()
        buf[24 + 4 * 3:24 + 4 * 4] = struct.pack("<f", float("inf"))
        with pytest.raises(FormatError, match="byte 36"):
            decode_features(bytes(buf))

    def test_encode_rejects(self):
        with pytest.raises(FormatError):
            encode_features(FeatureStore(np.array([[np.nan]], np.float32)))
        with pytest.raises(FormatError):
            encode_features(FeatureStore(np.zeros((0, 3), np.float32)))


class TestCheckpoint:
    def model(self, **kw):
        return MomentLocalizer(ModelConfig(**{**SMALL, **kw}))

    @pytest.mark.parametrize("dtype", ["float64", "float32"])
    def test_round_trip(self, dtype):
        ck = model_checkpoint(self.model(dtype=dtype))
        buf = encode_checkpoint(ck)
        back = decode_checkpoint(buf)
        assert back.config == ck.config
        assert set(back.tensors) == set(ck.tensors)
        assert all(np.array_equal(back.tensors[k], ck.tensors[k]) for k in ck.tensors)
        assert encode_checkpoint(back) == buf

    def test_load_into_model(self):
        m = self.model()
        m2 = model_from_checkpoint(decode_checkpoint(encode_checkpoint(model_checkpoint(m))))
        for (n, a), (_, b) in zip(m.params.items(), m2.params.items()):
            assert np.array_equal(a.data, b.data), n

    def test_zero_model(self):
        m = self.model()
        zero_params(m.params)
        back = decode_checkpoint(encode_checkpoint(model_checkpoint(m)))
        assert all(not v.any() for v in back.tensors.values())

    def test_mismatch_lists_names(self):
        ck = model_checkpoint(self.model())
        with pytest.raises(FormatError, match="clip.w"):
            model_from_checkpoint(ck, ModelConfig(**{**SMALL, "d_raw": 7}))

    def test_version(self):
        buf = bytearray(encode_checkpoint(model_checkpoint(self.model())))
        buf[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError, match="version 9"):
            decode_checkpoint(bytes(buf))

    def test_truncated_position(self):
        buf = encode_checkpoint(model_checkpoint(self.model()))
        with pytest.raises(FormatError, match=r"truncated .* at byte \d+"):
            decode_checkpoint(buf[:-3])
        with pytest.raises(FormatError, match="trailing"):
            decode_checkpoint(buf + b"x")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"NOPE" + b"\0" * 20)

    def test_sorted_names(self):
        ck = Checkpoint(ModelConfig(**SMALL), {"b": np.zeros(1), "a": np.ones(2)})
        buf = encode_checkpoint(ck)
        assert buf.index(b"\x01\x00\x00\x00a") < buf.index(b"\x01\x00\x00\x00b")


class TestTokens:
    def test_tokenize(self):
        assert tokenize("A person, opens_the DOOR!") == ["a", "person", "opens", "the", "door"]

    def test_oov_bucket(self):
        v = Vocabulary(["a", "b"])
        assert len(v) == 2 + OOV_BUCKETS
        i = v.token_id("zebra")
        assert 2 <= i < len(v) and v.token_id("zebra") == i
        assert v.encode("B a") == [1, 0]

    def test_empty_query(self):
        with pytest.raises(ValueError):
            Vocabulary(["a"]).encode("!!")

    def test_save_load(self, tmp_path):
        v = Vocabulary(["x", "y"], 4)
        v.save(tmp_path / "v.txt")
        w = Vocabulary.load(tmp_path / "v.txt")
        assert w.words == ["x", "y"] and w.oov_buckets == 4


def test_dataset_directory(tmp_path):
    vocab = Vocabulary(["open", "door"])
    feats = {"a": FeatureStore(np.ones((30, 3), np.float32)), "c": FeatureStore(np.zeros((9, 3), np.float32), 0.5)}
    recs = [AnnotationRecord("a", 30.0, 1.0, 4.0, "open door"), AnnotationRecord("c", 4.5, 0.5, 2.0, "door")]
    write_dataset(tmp_path, {"train": recs}, feats, vocab)
    samples, v = dataset_samples(tmp_path, "train")
    assert [s.tokens for s in samples] == [[0, 1], [1]]
    assert samples[1].clip_seconds == 0.5 and samples[1].clips.shape == (9, 3)
