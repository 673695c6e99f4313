"""Parallelized compression training and its recursive reference oracle.

The online compress-update-infer loop is unrolled into one forward pass
over the interleaved sequence [c(1), comps, ..., c(t), comps, I(t), O(t)].
Within every layer the memory states for all time steps are produced from
the compression blocks' keys/values (``parallel_memory_update``), and the
attention mask confines each query to exactly what it would see in the
recursive execution:

* tokens of c(j):    causal self within c(j), plus all of Mem(j-1);
* compression block j: causal self within the block, plus c(j), plus Mem(j-1);
* I(t) and O(t):     causal self within [I, O], plus Mem(t) only.

Position ids mirror the recursive layouts: each query group lives in its
own frame [Mem | own tokens] numbered from zero, which is what makes the
single-pass logits match the step-by-step oracle to float precision.

With the ``independent`` policy each segment is compressed without seeing
the memory (the online variant of fixed-context compression); only the
final inference block reads the concatenated results.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DataError, UsageError
from .lora import AdapterSet, trainable_parameters
from .memory import CompressedSlots, ContextMemory, compress_segment
from .model import (ToyLM, attend, causal_mask, embed_tokens, mlp,
                    project_rows, rmsnorm)
from .optim import Adam, cosine_lr
from .seeding import derive_seed
from .tensor import Tensor

ROLE_CONTEXT, ROLE_COMP, ROLE_INPUT, ROLE_OUTPUT = 0, 1, 2, 3

TRAIN_POLICIES = ("concat", "merge", "ema", "independent")


@dataclass
class TrainingSequence:
    """Interleaved tokens with per-token roles and loss positions."""

    tokens: np.ndarray          # [N] token ids
    kind: np.ndarray            # [N] role codes (ROLE_*)
    step: np.ndarray            # [N] 1-based segment index (t for I/O tokens)
    t: int
    s: int
    ctx_ranges: list[tuple[int, int]]
    comp_ranges: list[tuple[int, int]]
    io_range: tuple[int, int]
    target_weights: np.ndarray  # [N] 1 on positions predicting O(t) tokens
    targets: np.ndarray         # [N] next-token ids (last entry unused)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def build_training_sequence(sample: tuple[Sequence, Sequence, Sequence],
                            s: int, t: int, comp_token_id: int) -> TrainingSequence:
    """Interleave [c(1), s comps, ..., c(t), s comps, I(t), O(t)]."""
    segments, inputs, outputs = sample
    if t < 1 or len(segments) < t:
        raise DataError(f"need t >= 1 segments, got t={t} with {len(segments)}")
    if s < 1:
        raise DataError("compression token length s must be >= 1")
    segments = [np.asarray(seg, dtype=np.intp) for seg in segments[:t]]
    inputs = np.asarray(inputs, dtype=np.intp)
    outputs = np.asarray(outputs, dtype=np.intp)
    if any(seg.size == 0 for seg in segments):
        raise DataError("empty context segment")
    if inputs.size == 0 or outputs.size == 0:
        raise DataError("empty input or output")

    parts, kinds, steps = [], [], []
    ctx_ranges, comp_ranges = [], []
    pos = 0
    for j, seg in enumerate(segments, start=1):
        ctx_ranges.append((pos, pos + seg.size))
        parts.append(seg)
        kinds.append(np.full(seg.size, ROLE_CONTEXT, dtype=np.int8))
        steps.append(np.full(seg.size, j, dtype=np.intp))
        pos += seg.size
        comp_ranges.append((pos, pos + s))
        parts.append(np.full(s, comp_token_id, dtype=np.intp))
        kinds.append(np.full(s, ROLE_COMP, dtype=np.int8))
        steps.append(np.full(s, j, dtype=np.intp))
        pos += s
    io_range = (pos, pos + inputs.size + outputs.size)
    parts.extend([inputs, outputs])
    kinds.append(np.full(inputs.size, ROLE_INPUT, dtype=np.int8))
    kinds.append(np.full(outputs.size, ROLE_OUTPUT, dtype=np.int8))
    steps.append(np.full(inputs.size + outputs.size, t, dtype=np.intp))

    tokens = np.concatenate(parts)
    kind = np.concatenate(kinds)
    step = np.concatenate(steps)
    n = tokens.shape[0]
    weights = np.zeros(n, dtype=np.int8)
    weights[:-1] = kind[1:] == ROLE_OUTPUT
    targets = np.zeros(n, dtype=np.intp)
    targets[:-1] = tokens[1:]
    return TrainingSequence(tokens, kind, step, t, s, ctx_ranges, comp_ranges,
                            io_range, weights, targets)


# ---------------------------------------------------------------------------
# the parallel mask


@dataclass
class ParallelMask:
    """Boolean matrix over (queries = tokens, keys = memory columns + tokens).

    For growing policies (concat / independent) the memory columns alias
    the compression-token columns, so ``n_mem_cols`` is zero and cross-step
    attention is carried by the token part. For merge / ema there are
    t * s dedicated columns: block j (columns [(j-1)s, js)) is Mem(j).
    """

    allowed: np.ndarray
    n_mem_cols: int
    policy: str


def build_parallel_mask(seq: TrainingSequence, policy: str) -> ParallelMask:
    if policy not in TRAIN_POLICIES:
        raise UsageError(f"unknown training policy {policy!r}")
    n, t, s = seq.n_tokens, seq.t, seq.s
    merged = policy in ("merge", "ema")
    m = t * s if merged else 0
    allowed = np.zeros((n, m + n), dtype=bool)

    def causal_block(lo: int, hi: int) -> None:
        for r in range(lo, hi):
            allowed[r, m + lo:m + r + 1] = True

    # within-step attention: [c(j) | comp block j] is causal, [I | O] is causal
    for (clo, _), (_, phi) in zip(seq.ctx_ranges, seq.comp_ranges):
        causal_block(clo, phi)
    causal_block(*seq.io_range)

    # cross-step attention through the memory
    io_lo, io_hi = seq.io_range
    if merged:
        for j in range(2, t + 1):
            glo = seq.ctx_ranges[j - 1][0]
            ghi = seq.comp_ranges[j - 1][1]
            allowed[glo:ghi, (j - 2) * s:(j - 1) * s] = True
        allowed[io_lo:io_hi, (t - 1) * s:t * s] = True
    else:
        for j in range(2, t + 1):
            glo = seq.ctx_ranges[j - 1][0]
            ghi = seq.comp_ranges[j - 1][1]
            if policy == "concat":
                for b in range(j - 1):
                    blo, bhi = seq.comp_ranges[b]
                    allowed[glo:ghi, m + blo:m + bhi] = True
        for b in range(t):
            blo, bhi = seq.comp_ranges[b]
            allowed[io_lo:io_hi, m + blo:m + bhi] = True
    return ParallelMask(allowed, m, policy)


# ---------------------------------------------------------------------------
# per-layer memory materialization


def parallel_memory_update(comp_kvs: Sequence[tuple[Tensor, Tensor]], policy: str,
                           ema_a: float = 0.5) -> list[tuple[Tensor, Tensor]]:
    """Memory states Mem(1..t) from the compression blocks of one layer.

    ``comp_kvs[j]`` holds block j+1's (keys, values), each [s, d]. For
    ``concat`` the states alias the inputs (Mem(j) = blocks 1..j
    concatenated); for ``merge`` they are cumulative means; for ``ema`` the
    recurrence (1-a) * prev + a * h with a_1 = 1.
    """
    if policy in ("concat", "independent"):
        out: list[tuple[Tensor, Tensor]] = []
        for j in range(1, len(comp_kvs) + 1):
            ks = [kv[0] for kv in comp_kvs[:j]]
            vs = [kv[1] for kv in comp_kvs[:j]]
            out.append((T.concat(ks, axis=0) if j > 1 else ks[0],
                        T.concat(vs, axis=0) if j > 1 else vs[0]))
        return out
    if policy == "merge":
        out = []
        run_k, run_v = None, None
        for j, (k, v) in enumerate(comp_kvs, start=1):
            run_k = k if run_k is None else T.add(run_k, k)
            run_v = v if run_v is None else T.add(run_v, v)
            out.append((T.mul(run_k, 1.0 / j), T.mul(run_v, 1.0 / j)))
        return out
    if policy == "ema":
        if not 0.0 < ema_a <= 1.0:
            raise ContractViolation(f"ema coefficient {ema_a} outside (0, 1]")
        out = []
        prev_k, prev_v = None, None
        for k, v in comp_kvs:
            if prev_k is None:
                prev_k, prev_v = k, v
            else:
                prev_k = T.add(T.mul(prev_k, 1.0 - ema_a), T.mul(k, ema_a))
                prev_v = T.add(T.mul(prev_v, 1.0 - ema_a), T.mul(v, ema_a))
            out.append((prev_k, prev_v))
        return out
    raise UsageError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# single-pass forward


def _query_groups(seq: TrainingSequence) -> list[tuple[str, int, int, int]]:
    """(kind, j, lo, hi) per group: t context+comp groups then the I/O group."""
    groups = []
    for j in range(1, seq.t + 1):
        groups.append(("ctx", j, seq.ctx_ranges[j - 1][0], seq.comp_ranges[j - 1][1]))
    groups.append(("io", seq.t, *seq.io_range))
    return groups


def _group_mem_cols(mask: ParallelMask, seq: TrainingSequence,
                    kind: str, j: int) -> list[int]:
    """Mask column indices of the memory visible to one query group.

    For merged policies these land in the dedicated memory-column region;
    for growing policies they are the aliased compression-token columns
    (the token region starts at column 0 because n_mem_cols is 0).
    """
    merged = mask.n_mem_cols > 0
    s = seq.s
    if kind == "ctx":
        if j == 1 or mask.policy == "independent":
            return []
        if merged:
            return list(range((j - 2) * s, (j - 1) * s))
        return [c for b in range(j - 1)
                for c in range(seq.comp_ranges[b][0], seq.comp_ranges[b][1])]
    if merged:
        return list(range((seq.t - 1) * s, seq.t * s))
    return [c for b in range(seq.t)
            for c in range(seq.comp_ranges[b][0], seq.comp_ranges[b][1])]


def check_mask_decomposition(mask: ParallelMask, seq: TrainingSequence) -> None:
    """Every allowed mask entry must be reachable through the group plan."""
    covered = 0
    for kind, j, lo, hi in _query_groups(seq):
        mem_cols = _group_mem_cols(mask, seq, kind, j)
        cols = mem_cols + list(range(mask.n_mem_cols + lo, mask.n_mem_cols + hi))
        sub = mask.allowed[np.ix_(range(lo, hi), cols)]
        if sub.sum() != mask.allowed[lo:hi].sum():
            raise ContractViolation("mask has allowed entries outside the group plan")
        covered += int(sub.sum())
    if covered != int(mask.allowed.sum()):
        raise ContractViolation("group plan does not cover the parallel mask")


def training_forward(model: ToyLM, adapters: AdapterSet, seq: TrainingSequence,
                     policy: str, ema_a: float = 0.5,
                     ) -> tuple[Tensor, Tensor]:
    """One masked forward over the interleaved sequence; loss on O(t) positions.

    Gradients reach every token of every time step through the memory
    states and the attention mask.
    """
    cfg = model.config
    mask = build_parallel_mask(seq, policy)
    groups = _query_groups(seq)
    comp_idx = np.flatnonzero(seq.kind == ROLE_COMP)
    s = seq.s

    x = embed_tokens(model, seq.tokens, adapters, comp_idx)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        xa = rmsnorm(x, model.params[p + "attn_norm"])
        q = project_rows(xa, model.params[p + "wq"], adapters.lora(layer, "q"), comp_idx)
        k = project_rows(xa, model.params[p + "wk"], adapters.lora(layer, "k"), comp_idx)
        v = project_rows(xa, model.params[p + "wv"], adapters.lora(layer, "v"), comp_idx)

        comp_kvs = [(T.narrow(k, 0, lo, s), T.narrow(v, 0, lo, s))
                    for lo, _ in seq.comp_ranges]
        if policy in ("merge", "ema"):
            mems = parallel_memory_update(comp_kvs, policy, ema_a)
        else:
            mems = parallel_memory_update(comp_kvs, policy)

        outs = []
        for kind, j, lo, hi in groups:
            n_g = hi - lo
            if kind == "ctx":
                mem_kv = None if (j == 1 or policy == "independent") else mems[j - 2]
            else:
                mem_kv = mems[seq.t - 1]
            q_g = T.narrow(q, 0, lo, n_g)
            if mem_kv is None:
                k_g = T.narrow(k, 0, lo, n_g)
                v_g = T.narrow(v, 0, lo, n_g)
                n_mem_g = 0
            else:
                k_g = T.concat([mem_kv[0], T.narrow(k, 0, lo, n_g)], axis=0)
                v_g = T.concat([mem_kv[1], T.narrow(v, 0, lo, n_g)], axis=0)
                n_mem_g = mem_kv[0].shape[0]
            mem_cols = _group_mem_cols(mask, seq, kind, j)
            if len(mem_cols) != n_mem_g:
                raise ContractViolation("group memory width inconsistent with mask")
            cols = mem_cols + list(range(mask.n_mem_cols + lo, mask.n_mem_cols + hi))
            sub_mask = mask.allowed[np.ix_(range(lo, hi), cols)]
            k_pos = np.arange(n_mem_g + n_g)
            q_pos = np.arange(n_mem_g, n_mem_g + n_g)
            outs.append(attend(q_g, k_g, v_g, sub_mask, q_pos, k_pos, cfg))
        ctx = T.concat(outs, axis=0) if len(outs) > 1 else outs[0]
        ctx = project_rows(ctx, model.params[p + "wo"], adapters.lora(layer, "o"),
                           comp_idx)
        x = T.add(x, ctx)
        xf = rmsnorm(x, model.params[p + "ffn_norm"])
        x = T.add(x, mlp(xf, model.params[p + "w_gate"], model.params[p + "w_up"],
                         model.params[p + "w_down"]))
    xo = rmsnorm(x, model.params["final_norm"])
    logits = T.matmul(xo, model.params["head"].tensor)
    loss = T.cross_entropy_next_token(logits, seq.targets, seq.target_weights)
    return loss, logits


# ---------------------------------------------------------------------------
# recursive reference


@dataclass
class RecursiveResult:
    io_logits: np.ndarray               # [|I| + |O|, vocab]
    slots: list[CompressedSlots]        # h(1..t)
    memory: ContextMemory               # Mem(t)


def recursive_reference_forward(model: ToyLM, adapters: AdapterSet,
                                sample: tuple[Sequence, Sequence, Sequence],
                                policy: str, t: int,
                                ema_a: float = 0.5) -> RecursiveResult:
    """Literal sequential execution: compress, update, then infer on Mem(t)."""
    if policy not in TRAIN_POLICIES:
        raise UsageError(f"unknown policy {policy!r}")
    segments, inputs, outputs = sample
    mem = ContextMemory(policy, ema_a=ema_a)
    slots = []
    for seg in segments[:t]:
        h = compress_segment(model, adapters, mem, seg)
        slots.append(h)
        mem = mem.updated(h)
    tokens = np.concatenate([np.asarray(inputs, dtype=np.intp),
                             np.asarray(outputs, dtype=np.intp)])
    layout = mem.layout(model)
    mask = causal_mask(layout.n_entries, tokens.size)
    logits, _ = model.forward(tokens, layout, mask, adapters=adapters)
    return RecursiveResult(logits.data.copy(), slots, mem)


def io_logits_from_training_forward(seq: TrainingSequence,
                                    logits: Tensor) -> np.ndarray:
    lo, hi = seq.io_range
    return logits.data[lo:hi].copy()


# ---------------------------------------------------------------------------
# recipes and the two training stages


@dataclass
class Recipe:
    """Key-value training recipe (steps, batch, lr, T, s, policy, seed)."""

    steps: int = 300
    batch: int = 8
    lr: float = 3e-3
    T: int = 8
    s: int = 2
    policy: str = "concat"
    seed: int = 0
    min_lr: float = 0.0
    ema_a: float = 0.5

    def save(self, path) -> None:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Recipe":
        known = {f.name: f.type for f in fields(cls)}
        kwargs: dict = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise DataError(f"{path}:{lineno}: unknown recipe key {key!r}")
            if key in ("steps", "batch", "T", "s", "seed"):
                kwargs[key] = int(value)
            elif key in ("lr", "min_lr", "ema_a"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


MetricsRow = dict  # step, loss, lr, wall_ms


def _finite_or_raise(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise ContractViolation(
            f"training diverged at step {step}: loss={loss!r}; "
            "lower the learning rate or check the data")


def pretrain(model: ToyLM, sampler: Callable[[np.random.Generator], np.ndarray],
             recipe: Recipe) -> list[MetricsRow]:
    """Stage 1: full-context language modelling from scratch (no comp tokens).

    ``sampler`` draws one token sequence per call, either a plain id array
    (loss on every next-token position) or a (tokens, weights) pair to
    focus the loss. Trains all model parameters.
    """
    model.thaw()
    opt = Adam(model.parameters())
    rng = np.random.default_rng(derive_seed(recipe.seed, "pretrain-order"))
    rows: list[MetricsRow] = []
    for step in range(recipe.steps):
        lr = cosine_lr(step, recipe.steps, recipe.lr, recipe.min_lr)
        opt.zero_grad()
        total = 0.0
        for _ in range(recipe.batch):
            drawn = sampler(rng)
            if isinstance(drawn, tuple):
                tokens, weights = drawn
                tokens = np.asarray(tokens, dtype=np.intp)
                weights = np.asarray(weights, dtype=np.int8).copy()
            else:
                tokens = np.asarray(drawn, dtype=np.intp)
                weights = np.ones(tokens.size, dtype=np.int8)
            weights[-1] = 0  # final position has no next token
            layout = model.empty_layout()
            mask = causal_mask(0, tokens.size)
            logits, _ = model.forward(tokens, layout, mask)
            targets = np.zeros(tokens.size, dtype=np.intp)
            targets[:-1] = tokens[1:]
            loss = T.cross_entropy_next_token(logits, targets, weights)
            T.mul(loss, 1.0 / recipe.batch).backward()
            total += loss.item()
        mean_loss = total / recipe.batch
        _finite_or_raise(mean_loss, step)
        opt.step(lr)
        rows.append({"step": step, "loss": mean_loss, "lr": lr, "wall_ms": 0})
    return rows


def train_compression(model: ToyLM, adapters: AdapterSet,
                      sampler: Callable[[np.random.Generator, int],
                                        tuple[list, Sequence, Sequence]],
                      recipe: Recipe) -> list[MetricsRow]:
    """Stage 2: optimize only the adapters and the shared comp embedding.

    ``sampler(rng, t)`` returns one (segments, inputs, outputs) triple with
    at least t segments; t is drawn uniformly from 1..T per sample.
    """
    params = trainable_parameters(model, adapters)
    opt = Adam(params)
    rng = np.random.default_rng(derive_seed(recipe.seed, "compress-order"))
    rows: list[MetricsRow] = []
    for step in range(recipe.steps):
        lr = cosine_lr(step, recipe.steps, recipe.lr, recipe.min_lr)
        opt.zero_grad()
        total = 0.0
        for _ in range(recipe.batch):
            t = int(rng.integers(1, recipe.T + 1))
            sample = sampler(rng, t)
            seq = build_training_sequence(sample, recipe.s, t,
                                          model.config.comp_token_id)
            loss, _ = training_forward(model, adapters, seq, recipe.policy,
                                       recipe.ema_a)
            T.mul(loss, 1.0 / recipe.batch).backward()
            total += loss.item()
        mean_loss = total / recipe.batch
        _finite_or_raise(mean_loss, step)
        opt.step(lr)
        rows.append({"step": step, "loss": mean_loss, "lr": lr, "wall_ms": 0})
    return rows


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    """Loss log; wall_ms is pinned to 0 so reruns are byte-identical."""
    lines = ["step,loss,lr,wall_ms"]
    for r in rows:
        lines.append(f"{r['step']},{r['loss']:.8f},{r['lr']:.8g},{r['wall_ms']}")
    Path(path).write_text("\n".join(lines) + "\n")
