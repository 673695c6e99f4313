"""Generator contracts: determinism, identity splits, label permutation,
motif recurrence statistics, and lossless serialization."""

import json

import numpy as np
import pytest

from ccm.errors import DataError, UsageError
from ccm.taskgen import (ICLDataset, OnlineSample, StreamVocab, VocabSpec,
                         gen_icl_dataset, gen_iid_stream, gen_stream,
                         read_dataset, write_icl_dataset, write_stream_dataset)


def test_icl_deterministic_under_seed():
    a = gen_icl_dataset(20, T=4, n_classes=4, seed=11)
    b = gen_icl_dataset(20, T=4, n_classes=4, seed=11)
    assert a.train[3].segments == b.train[3].segments
    assert a.test[0].inputs == b.test[0].inputs
    c = gen_icl_dataset(20, T=4, n_classes=4, seed=12)
    assert a.train[3].segments != c.train[3].segments


def test_icl_identity_split_disjoint():
    ds = gen_icl_dataset(30, T=4, n_classes=4, seed=0)
    train_ids = {s.identity for s in ds.train}
    test_ids = {s.identity for s in ds.test}
    assert not train_ids & test_ids
    assert len(train_ids) + len(test_ids) == 30


def test_icl_segment_format():
    ds = gen_icl_dataset(5, T=6, n_classes=4, seed=1, pattern_len=4)
    v = ds.vocab
    for sample in ds.train:
        assert len(sample.segments) == 6
        for seg, inp, out in zip(sample.segments, sample.inputs, sample.outputs):
            assert len(seg) == 6  # pattern + sep + label
            assert seg[4] == v.sep_id
            assert v.n_pattern <= seg[5] < v.n_pattern + v.n_labels
            assert inp[-1] == v.sep_id
            assert len(out) == 1


def test_icl_labels_permuted_per_identity():
    """Marginal label frequency is uniform: no-context accuracy pins at 1/n."""
    ds = gen_icl_dataset(400, T=4, n_classes=4, seed=2)
    v = ds.vocab
    counts = np.zeros(v.n_labels)
    for sample in ds.train + ds.test:
        counts[sample.outputs[0][0] - v.n_pattern] += 1
    freq = counts[:4] / counts.sum()
    assert np.abs(freq - 0.25).max() < 0.06


def test_icl_mapping_consistent_within_identity():
    """Repeated demonstrations of a class always carry the same label."""
    ds = gen_icl_dataset(50, T=8, n_classes=8, seed=3)
    for sample in ds.train:
        seen: dict[tuple, int] = {}
        for seg in sample.segments:
            pattern = tuple(seg[:4])
            if pattern in seen:
                assert seen[pattern] == seg[-1]
            seen[pattern] = seg[-1]


def test_icl_query_answerable_from_demos():
    """Every step's query class was demonstrated in c(1..t)."""
    ds = gen_icl_dataset(50, T=8, n_classes=8, seed=4)
    for sample in ds.train:
        for t in range(1, 9):
            segments, inputs, outputs = sample.step_sample(t)
            pattern = tuple(inputs[:-1])
            matching = [seg for seg in segments if tuple(seg[:4]) == pattern]
            assert matching, "query must come from a demonstrated class"
            assert matching[0][-1] == outputs[0]


def test_class_count_guard():
    with pytest.raises(UsageError):
        gen_icl_dataset(5, T=2, n_classes=9, seed=0,
                        vocab=VocabSpec(n_pattern=16, n_labels=8))


# ---------------------------------------------------------------------------
# streams


def test_stream_deterministic_and_sized():
    a = gen_stream(2000, seed=5)
    b = gen_stream(2000, seed=5)
    assert a.tokens == b.tokens
    assert len(a.tokens) == 2000


def test_stream_recurrence_beyond_window():
    sample = gen_stream(8000, seed=6)
    gaps = sample.recurrence_distances()
    assert gaps.size > 20
    frac_long = (gaps > 151).mean()
    assert frac_long >= 0.30


def test_iid_control_stream():
    sample = gen_iid_stream(3000, seed=7)
    assert len(sample.tokens) == 3000
    assert sample.motif_positions == []
    vocab = StreamVocab()
    assert max(sample.tokens) < vocab.n_content + vocab.n_noise


# ---------------------------------------------------------------------------
# serialization


def test_icl_roundtrip(tmp_path):
    ds = gen_icl_dataset(12, T=3, n_classes=4, seed=8)
    path = tmp_path / "icl.jsonl"
    write_icl_dataset(path, ds)
    loaded = read_dataset(path)
    assert isinstance(loaded, ICLDataset)
    assert loaded.vocab == ds.vocab and loaded.T == ds.T
    assert [s.segments for s in loaded.train] == [s.segments for s in ds.train]
    assert [s.outputs for s in loaded.test] == [s.outputs for s in ds.test]


def test_stream_roundtrip(tmp_path):
    streams = [gen_stream(500, seed=9, identity=i) for i in range(2)]
    path = tmp_path / "stream.jsonl"
    write_stream_dataset(path, streams, StreamVocab(), seed=9)
    loaded, vocab, header = read_dataset(path)
    assert header["kind"] == "stream"
    assert loaded[1].tokens == streams[1].tokens
    assert loaded[0].motif_positions == streams[0].motif_positions


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    ds = gen_icl_dataset(3, T=2, n_classes=2, seed=10)
    write_icl_dataset(path, ds)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:10]  # truncate a record
    path.write_text("\n".join(lines))
    with pytest.raises(DataError, match=":3"):
        read_dataset(path)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "old.jsonl"
    header = {"format_version": 0, "kind": "icl", "seed": 0,
              "vocab": {"n_pattern": 4, "n_labels": 4}, "n_classes": 2, "T": 1,
              "pattern_len": 2}
    path.write_text(json.dumps(header) + "\n")
    with pytest.raises(DataError, match="format version"):
        read_dataset(path)


def test_vocab_reserved_ids():
    v = VocabSpec(n_pattern=32, n_labels=8)
    cfg = v.model_config()
    assert cfg.comp_token_id == v.comp_id
    assert cfg.vocab_size == v.size
    assert v.comp_id != v.pad_id != v.sep_id
