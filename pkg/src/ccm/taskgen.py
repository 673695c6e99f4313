"""Synthetic online-scenario data: in-context-learning tasks and token
streams with long-range structure.

The ICL generator mirrors the online format: per identity, a hidden
mapping from pattern classes to label tokens (a fresh random permutation
per identity, so labels carry no information without demonstrations).
Each time step contributes one demonstration segment
[pattern tokens, sep, label] and one query (I = pattern + sep, O = label).
Identities split disjointly into train and test.

The stream generator emits recurring token motifs whose reuse distances
straddle a sliding window's reach, so retained memory measurably lowers
perplexity; an i.i.d. control stream is available where memory cannot help.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .model import ModelConfig
from .seeding import derive_seed

FORMAT_VERSION = 1


@dataclass(frozen=True)
class VocabSpec:
    """Fixed vocabulary regions: patterns, labels, then sep/comp/pad."""

    n_pattern: int = 32
    n_labels: int = 8

    @property
    def sep_id(self) -> int:
        return self.n_pattern + self.n_labels

    @property
    def comp_id(self) -> int:
        return self.sep_id + 1

    @property
    def pad_id(self) -> int:
        return self.sep_id + 2

    @property
    def size(self) -> int:
        return self.sep_id + 3

    def label_id(self, label: int) -> int:
        return self.n_pattern + label

    def model_config(self, **overrides) -> ModelConfig:
        defaults = dict(n_layers=3, d_model=64, n_heads=4, d_ff=256,
                        vocab_size=self.size, max_layout=1024,
                        comp_token_id=self.comp_id, pad_token_id=self.pad_id)
        defaults.update(overrides)
        return ModelConfig(**defaults)

    def to_dict(self) -> dict:
        return {"n_pattern": self.n_pattern, "n_labels": self.n_labels}


@dataclass
class OnlineSample:
    """One identity's full online trajectory: segments plus per-step queries."""

    identity: int
    segments: list[list[int]]     # c(1..T)
    inputs: list[list[int]]       # I(1..T)
    outputs: list[list[int]]      # O(1..T)

    def step_sample(self, t: int) -> tuple[list[list[int]], list[int], list[int]]:
        """(C(t), I(t), O(t)) for 1-based time step t."""
        return self.segments[:t], self.inputs[t - 1], self.outputs[t - 1]


@dataclass
class ICLDataset:
    vocab: VocabSpec
    n_classes: int
    T: int
    pattern_len: int
    seed: int
    train: list[OnlineSample] = field(default_factory=list)
    test: list[OnlineSample] = field(default_factory=list)


def _identity_patterns(rng: np.random.Generator, vocab: VocabSpec, n_classes: int,
                       pattern_len: int) -> np.ndarray:
    """Distinct class patterns for one identity."""
    seen: set[tuple[int, ...]] = set()
    patterns = np.empty((n_classes, pattern_len), dtype=np.intp)
    for c in range(n_classes):
        while True:
            pat = tuple(rng.integers(0, vocab.n_pattern, size=pattern_len).tolist())
            if pat not in seen:
                seen.add(pat)
                patterns[c] = pat
                break
    return patterns


def _gen_identity(identity: int, root_seed: int, vocab: VocabSpec, n_classes: int,
                  T: int, pattern_len: int) -> OnlineSample:
    rng = np.random.default_rng(derive_seed(root_seed, f"icl-identity-{identity}"))
    patterns = _identity_patterns(rng, vocab, n_classes, pattern_len)
    label_perm = rng.permutation(n_classes)

    # first demonstrations are distinct classes, later ones repeat often
    # (repeats are the in-sequence supervision); queries always come from
    # the classes demonstrated so far
    first_cycle = rng.permutation(n_classes).tolist()
    segments, inputs, outputs = [], [], []
    seen: list[int] = []
    for t in range(T):
        if t < min(2, n_classes):
            c = first_cycle[t]
        elif rng.random() < 0.6 and seen:
            c = int(seen[rng.integers(len(seen))])
        else:
            c = int(rng.integers(n_classes))
        seen.append(c)
        label = vocab.label_id(int(label_perm[c]))
        segments.append(patterns[c].tolist() + [vocab.sep_id, label])
        # uniform over distinct demonstrated classes: long-range retrieval
        # gets as much supervision as recent repeats
        opts = sorted(set(seen))
        q = int(opts[rng.integers(len(opts))])
        inputs.append(patterns[q].tolist() + [vocab.sep_id])
        outputs.append([vocab.label_id(int(label_perm[q]))])
    return OnlineSample(identity, segments, inputs, outputs)


def gen_icl_dataset(n_identities: int, T: int, n_classes: int, seed: int,
                    pattern_len: int = 4, vocab: VocabSpec | None = None,
                    test_fraction: float = 0.1) -> ICLDataset:
    """Deterministic corpus with a disjoint train/test identity split."""
    vocab = vocab or VocabSpec(n_labels=max(8, n_classes))
    if n_classes > vocab.n_labels:
        raise UsageError(f"{n_classes} classes exceed {vocab.n_labels} label tokens")
    ds = ICLDataset(vocab, n_classes, T, pattern_len, seed)
    n_test = max(1, int(round(n_identities * test_fraction)))
    for identity in range(n_identities):
        sample = _gen_identity(identity, seed, vocab, n_classes, T, pattern_len)
        (ds.test if identity >= n_identities - n_test else ds.train).append(sample)
    return ds


# ---------------------------------------------------------------------------
# streams


@dataclass(frozen=True)
class StreamVocab:
    n_content: int = 48
    n_noise: int = 8

    @property
    def comp_id(self) -> int:
        return self.n_content + self.n_noise

    @property
    def pad_id(self) -> int:
        return self.comp_id + 1

    @property
    def size(self) -> int:
        return self.comp_id + 2

    def model_config(self, **overrides) -> ModelConfig:
        defaults = dict(n_layers=3, d_model=64, n_heads=4, d_ff=256,
                        vocab_size=self.size, max_layout=2048,
                        comp_token_id=self.comp_id, pad_token_id=self.pad_id)
        defaults.update(overrides)
        return ModelConfig(**defaults)

    def to_dict(self) -> dict:
        return {"n_content": self.n_content, "n_noise": self.n_noise}


@dataclass
class StreamSample:
    identity: int
    tokens: list[int]
    motif_positions: list[tuple[int, int]] = field(default_factory=list)  # (motif, pos)

    def recurrence_distances(self) -> np.ndarray:
        last: dict[int, int] = {}
        gaps = []
        for motif, pos in self.motif_positions:
            if motif in last:
                gaps.append(pos - last[motif])
            last[motif] = pos
        return np.asarray(gaps, dtype=np.intp)


def gen_stream(length: int, seed: int, vocab: StreamVocab | None = None,
               n_motifs: int = 20, motif_len: int = 10,
               short_gap: tuple[int, int] = (20, 100),
               long_gap: tuple[int, int] = (170, 400),
               identity: int = 0) -> StreamSample:
    """Motif stream: recurring n-grams at short and beyond-window distances."""
    if length <= 0:
        raise UsageError("stream length must be positive")
    vocab = vocab or StreamVocab()
    rng = np.random.default_rng(derive_seed(seed, f"stream-{identity}"))
    motifs = [rng.integers(0, vocab.n_content, size=motif_len).tolist()
              for _ in range(n_motifs)]
    last_seen: dict[int, int] = {}
    tokens: list[int] = []
    positions: list[tuple[int, int]] = []
    fresh = list(rng.permutation(n_motifs))
    while len(tokens) < length:
        pos = len(tokens)
        recent = [m for m, p in last_seen.items() if short_gap[0] <= pos - p <= short_gap[1]]
        old = [m for m, p in last_seen.items() if long_gap[0] <= pos - p <= long_gap[1]]
        r = rng.random()
        if r < 0.35 and recent:
            motif = int(recent[rng.integers(len(recent))])
        elif r < 0.85 and old:
            motif = int(old[rng.integers(len(old))])
        elif fresh:
            motif = int(fresh.pop())
        else:
            keys = list(last_seen)
            motif = int(keys[rng.integers(len(keys))])
        positions.append((motif, pos))
        last_seen[motif] = pos
        tokens.extend(motifs[motif])
        tokens.extend(rng.integers(vocab.n_content,
                                   vocab.n_content + vocab.n_noise,
                                   size=int(rng.integers(1, 4))).tolist())
    return StreamSample(identity, tokens[:length], positions)


def gen_iid_stream(length: int, seed: int, vocab: StreamVocab | None = None,
                   identity: int = 0) -> StreamSample:
    """Control stream: i.i.d. uniform tokens; memory cannot help."""
    if length <= 0:
        raise UsageError("stream length must be positive")
    vocab = vocab or StreamVocab()
    rng = np.random.default_rng(derive_seed(seed, f"iid-stream-{identity}"))
    tokens = rng.integers(0, vocab.n_content + vocab.n_noise, size=length)
    return StreamSample(identity, tokens.tolist(), [])


# ---------------------------------------------------------------------------
# training samplers


def icl_pretrain_sampler(samples: list[OnlineSample], T: int,
                         vocab: VocabSpec | None = None):
    """Full-context sequences [c(1..t), I(t), O(t)], t biased toward T.

    When a vocabulary is given, the loss is focused on the positions that
    are actually predictable from earlier context: labels of repeated
    demonstrations and the output. First occurrences are uniform noise and
    pattern tokens are identity-specific noise; both would swamp the
    in-context signal at this scale.
    """

    def sampler(rng: np.random.Generator):
        sample = samples[int(rng.integers(len(samples)))]
        t = T if rng.random() < 0.5 else int(rng.integers(1, T + 1))
        segments, inputs, outputs = sample.step_sample(t)
        parts = [tok for seg in segments for tok in seg] + list(inputs) + list(outputs)
        tokens = np.asarray(parts, dtype=np.intp)
        if vocab is None:
            return tokens
        weights = np.zeros(tokens.size, dtype=np.int8)
        seen_labels: set[int] = set()
        pos = 0
        for seg in segments:
            label = seg[-1]
            if label in seen_labels:
                weights[pos + len(seg) - 2] = 1  # separator predicts the label
            seen_labels.add(label)
            pos += len(seg)
        weights[pos + len(inputs) - 1] = 1       # last input predicts the output
        return tokens, weights

    return sampler


def icl_compression_sampler(samples: list[OnlineSample]):
    def sampler(rng: np.random.Generator, t: int):
        sample = samples[int(rng.integers(len(samples)))]
        return sample.step_sample(t)

    return sampler


def stream_pretrain_sampler(streams: list[StreamSample], window: int = 192):
    def sampler(rng: np.random.Generator) -> np.ndarray:
        stream = streams[int(rng.integers(len(streams)))]
        tokens = np.asarray(stream.tokens, dtype=np.intp)
        lo = int(rng.integers(0, max(1, tokens.size - window)))
        return tokens[lo:lo + window]

    return sampler


def stream_compression_sampler(streams: list[StreamSample], chunk: int = 64,
                               io_len: int = 16):
    """(C(t), I, O) built from consecutive chunks of a stream."""

    def sampler(rng: np.random.Generator, t: int):
        stream = streams[int(rng.integers(len(streams)))]
        tokens = np.asarray(stream.tokens, dtype=np.intp)
        need = t * chunk + 2 * io_len
        lo = int(rng.integers(0, max(1, tokens.size - need)))
        segments = [tokens[lo + j * chunk: lo + (j + 1) * chunk].tolist()
                    for j in range(t)]
        base = lo + t * chunk
        return (segments, tokens[base: base + io_len].tolist(),
                tokens[base + io_len: base + 2 * io_len].tolist())

    return sampler


# ---------------------------------------------------------------------------
# serialization: line-delimited records with a version header


def write_icl_dataset(path, ds: ICLDataset) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "format_version": FORMAT_VERSION, "kind": "icl", "seed": ds.seed,
            "vocab": ds.vocab.to_dict(), "n_classes": ds.n_classes, "T": ds.T,
            "pattern_len": ds.pattern_len,
        }, sort_keys=True) + "\n")
        for split, samples in (("train", ds.train), ("test", ds.test)):
            for s in samples:
                fh.write(json.dumps({
                    "identity": s.identity, "split": split, "segments": s.segments,
                    "inputs": s.inputs, "outputs": s.outputs,
                }, sort_keys=True) + "\n")


def write_stream_dataset(path, streams: list[StreamSample], vocab: StreamVocab,
                         seed: int, kind_note: str = "motif") -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({
            "format_version": FORMAT_VERSION, "kind": "stream", "seed": seed,
            "vocab": vocab.to_dict(), "note": kind_note,
        }, sort_keys=True) + "\n")
        for s in streams:
            fh.write(json.dumps({
                "identity": s.identity, "tokens": s.tokens,
                "motif_positions": [[m, p] for m, p in s.motif_positions],
            }, sort_keys=True) + "\n")


def _parse_line(path, lineno: int, raw: str) -> dict:
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc


def read_dataset(path):
    """Returns an ICLDataset or (streams, StreamVocab, meta) per header kind."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: {path}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = _parse_line(path, 1, lines[0])
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: format version {header.get('format_version')} "
                        f"!= supported {FORMAT_VERSION}")
    kind = header.get("kind")
    if kind == "icl":
        ds = ICLDataset(VocabSpec(**header["vocab"]), header["n_classes"],
                        header["T"], header["pattern_len"], header["seed"])
        for lineno, raw in enumerate(lines[1:], start=2):
            rec = _parse_line(path, lineno, raw)
            try:
                sample = OnlineSample(rec["identity"], rec["segments"],
                                      rec["inputs"], rec["outputs"])
                split = rec["split"]
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
            (ds.train if split == "train" else ds.test).append(sample)
        return ds
    if kind == "stream":
        vocab = StreamVocab(**header["vocab"])
        streams = []
        for lineno, raw in enumerate(lines[1:], start=2):
            rec = _parse_line(path, lineno, raw)
            try:
                streams.append(StreamSample(rec["identity"], rec["tokens"],
                                            [tuple(x) for x in rec["motif_positions"]]))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
        return streams, vocab, header
    raise DataError(f"{path}: unknown dataset kind {kind!r}")
