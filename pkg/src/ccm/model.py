"""Decoder-only transformer with an externally managed KV layout.

The attention cache is explicit: callers hand ``forward`` a KVLayout whose
entries may come from anywhere (raw tokens, compressed memory slots, a
streaming window) and a boolean mask saying which entries each query may
read. Keys are stored UNROTATED; rotary position encoding is applied at
attention time with sequential position ids 0..n-1 assigned over the
current layout order [memory entries | current tokens]. This makes memory
entries position-free: averaging them stays well defined and streaming
reassignment of positions is a no-op.

Blocks are pre-norm with RMS normalization, a SiLU-gated feed-forward and
an untied output head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .errors import CapacityError, ContractViolation, DataError, DimensionError
from .lora import AdapterSet, comp_flags
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 512
    rope_base: float = 10000.0
    max_layout: int = 1024
    comp_token_id: int = -1  # -1: second-to-last vocab id
    pad_token_id: int = -1   # -1: last vocab id

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DimensionError("d_model must be divisible by n_heads")
        if self.comp_token_id == -1:
            object.__setattr__(self, "comp_token_id", self.vocab_size - 2)
        if self.pad_token_id == -1:
            object.__setattr__(self, "pad_token_id", self.vocab_size - 1)
        for tid in (self.comp_token_id, self.pad_token_id):
            if not 0 <= tid < self.vocab_size:
                raise DimensionError(f"reserved token id {tid} outside vocabulary")
        if self.comp_token_id == self.pad_token_id:
            raise DimensionError("comp and pad token ids must differ")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model,
            "n_heads": self.n_heads, "d_ff": self.d_ff,
            "vocab_size": self.vocab_size, "rope_base": self.rope_base,
            "max_layout": self.max_layout, "comp_token_id": self.comp_token_id,
            "pad_token_id": self.pad_token_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# tags recording where a layout entry came from
TAG_MEMORY = "memory-slot"
TAG_CONTEXT = "context-token"
TAG_INPUT = "input-token"
TAG_SINK = "sink-token"


@dataclass
class KVLayout:
    """Per-layer unrotated key/value entries visible to attention.

    ``keys`` and ``values`` have shape [n_layers, n, d_model]; every layer
    holds the same entry count. ``tags`` records per-entry provenance.
    """

    keys: np.ndarray
    values: np.ndarray
    tags: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, n_layers: int, d_model: int, dtype) -> "KVLayout":
        z = np.zeros((n_layers, 0, d_model), dtype=dtype)
        return cls(z, z.copy(), [])

    @property
    def n_entries(self) -> int:
        return self.keys.shape[1]

    def extended(self, keys: np.ndarray, values: np.ndarray,
                 tags: Sequence[str]) -> "KVLayout":
        if keys.shape != values.shape or keys.shape[0] != self.keys.shape[0]:
            raise DimensionError("layout extension shape mismatch")
        if keys.shape[1] != len(tags):
            raise DimensionError("one tag per new entry required")
        return KVLayout(np.concatenate([self.keys, keys], axis=1),
                        np.concatenate([self.values, values], axis=1),
                        self.tags + list(tags))

    def concat(self, other: "KVLayout") -> "KVLayout":
        return self.extended(other.keys, other.values, other.tags)


@dataclass
class AttentionMask:
    """Boolean [n_queries, n_layout_entries] matrix; True marks an allowed read."""

    allowed: np.ndarray

    def validate(self, n_mem: int, n_tokens: int) -> None:
        if self.allowed.shape != (n_tokens, n_mem + n_tokens):
            raise DimensionError(
                f"mask shape {self.allowed.shape} != ({n_tokens}, {n_mem + n_tokens})")
        if not self.allowed.any(axis=1).all():
            raise ContractViolation("mask row with no allowed entries")
        if not self.allowed[np.arange(n_tokens), n_mem + np.arange(n_tokens)].all():
            raise ContractViolation("mask must allow self-attention for every query")


def causal_mask(n_mem: int, n_tokens: int, mem_visible: bool = True) -> AttentionMask:
    """Memory columns fully visible (optionally), causal among the tokens."""
    allowed = np.zeros((n_tokens, n_mem + n_tokens), dtype=bool)
    if mem_visible:
        allowed[:, :n_mem] = True
    allowed[:, n_mem:] = np.tril(np.ones((n_tokens, n_tokens), dtype=bool))
    return AttentionMask(allowed)


# ---------------------------------------------------------------------------
# shared building blocks (also used by the parallel training forward)


def rmsnorm(x: Tensor, gain: Parameter, eps: float = 1e-6) -> Tensor:
    ms = T.add(T.mean_last(T.mul(x, x)), eps)
    return T.mul(T.mul(x, T.pow_scalar(ms, -0.5)), gain.tensor)


def project_rows(x: Tensor, w: Parameter, lora, comp_idx: np.ndarray) -> Tensor:
    """y = x @ w, plus the conditional low-rank delta on compression rows."""
    out = T.matmul(x, w.tensor)
    if lora is not None and comp_idx.size:
        delta = lora.delta(T.take_rows(x, comp_idx))
        out = T.add_rows(out, comp_idx, delta)
    return out


def attend(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray,
           q_positions: np.ndarray, k_positions: np.ndarray,
           config: ModelConfig) -> Tensor:
    """Multi-head attention of [n, d] queries over [m, d] unrotated keys/values.

    Rotary rotation is applied here using the caller's position frames.
    """
    n, m = q.shape[0], k.shape[0]
    h, dh = config.n_heads, config.head_dim
    dtype = q.data.dtype
    qh = T.transpose(T.reshape(q, (n, h, dh)), (1, 0, 2))
    kh = T.transpose(T.reshape(k, (m, h, dh)), (1, 0, 2))
    vh = T.transpose(T.reshape(v, (m, h, dh)), (1, 0, 2))
    cos_q, sin_q = T.rope_angles(q_positions, dh, config.rope_base, dtype)
    cos_k, sin_k = T.rope_angles(k_positions, dh, config.rope_base, dtype)
    qh = T.rope(qh, cos_q, sin_q)
    kh = T.rope(kh, cos_k, sin_k)
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    weights = T.softmax_rows(scores, np.broadcast_to(allowed, (h, n, m)))
    ctx = T.matmul(weights, vh)
    return T.reshape(T.transpose(ctx, (1, 0, 2)), (n, h * dh))


def mlp(x: Tensor, w_gate: Parameter, w_up: Parameter, w_down: Parameter) -> Tensor:
    gated = T.mul(T.silu(T.matmul(x, w_gate.tensor)), T.matmul(x, w_up.tensor))
    return T.matmul(gated, w_down.tensor)


def embed_tokens(model: "ToyLM", tokens: np.ndarray,
                 adapters: AdapterSet | None, comp_idx: np.ndarray) -> Tensor:
    """Token embeddings, with compression rows taken from the adapter's row."""
    x = T.embedding(model.params["embed"].tensor, tokens)
    if adapters is not None and comp_idx.size:
        rows = T.take_rows(adapters.comp_embedding.tensor,
                           np.zeros(comp_idx.size, dtype=np.intp))
        x = T.set_rows(x, comp_idx, rows)
    return x


# ---------------------------------------------------------------------------


class ToyLM:
    """Config + parameters, with layout-based forward and greedy decoding."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    # -- construction ----------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ToyLM":
        rng = np.random.default_rng(seed)
        d, dff, v = config.d_model, config.d_ff, config.vocab_size

        def normal(shape, scale):
            return (rng.standard_normal(shape) * scale).astype(dtype)

        params: dict[str, Parameter] = {}

        def add(name, arr):
            params[name] = Parameter(name, Tensor(arr))

        embed = normal((v, d), 0.02)
        # keep the reserved compression row in-distribution
        others = np.delete(embed, config.comp_token_id, axis=0)
        embed[config.comp_token_id] = others.mean(axis=0)
        add("embed", embed)
        # residual-output projections start small so token identity is not
        # drowned by layer noise at init
        resid_scale = 0.02 / np.sqrt(2 * config.n_layers)
        for layer in range(config.n_layers):
            p = f"layers.{layer}."
            add(p + "attn_norm", np.ones(d, dtype=dtype))
            for tgt in ("wq", "wk", "wv"):
                add(p + tgt, normal((d, d), 0.02))
            add(p + "wo", normal((d, d), resid_scale))
            add(p + "ffn_norm", np.ones(d, dtype=dtype))
            add(p + "w_gate", normal((d, dff), 0.02))
            add(p + "w_up", normal((d, dff), 0.02))
            add(p + "w_down", normal((dff, d), resid_scale))
        add("final_norm", np.ones(d, dtype=dtype))
        add("head", normal((d, v), 0.02))
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["embed"].data.dtype

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def thaw(self) -> None:
        for p in self.parameters():
            p.trainable = True
            p.tensor.requires_grad = True

    def empty_layout(self) -> KVLayout:
        return KVLayout.empty(self.config.n_layers, self.config.d_model, self.dtype)

    def astype(self, dtype) -> "ToyLM":
        params = {name: Parameter(name, Tensor(p.data.astype(dtype)), p.trainable)
                  for name, p in self.params.items()}
        return ToyLM(self.config, params)

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        save_arrays(path, {name: p.data for name, p in self.params.items()},
                    meta={"kind": "model", "config": self.config.to_dict()})

    @classmethod
    def load(cls, path, dtype=None) -> "ToyLM":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "model":
            raise DataError(f"{path}: not a model checkpoint")
        config = ModelConfig.from_dict(meta["config"])
        params = {}
        for name, arr in arrays.items():
            if dtype is not None:
                arr = arr.astype(dtype)
            params[name] = Parameter(name, Tensor(arr))
        return cls(config, params)

    # -- forward -------------------------------------------------------------------

    def forward(self, tokens, layout: KVLayout, mask: AttentionMask,
                comp_mask: np.ndarray | None = None,
                adapters: AdapterSet | None = None,
                ) -> tuple[Tensor, tuple[np.ndarray, np.ndarray]]:
        """One call over new tokens appended (for attention) after ``layout``.

        Returns per-token logits and the unrotated per-layer KV the tokens
        produced (shape [n_layers, n, d] each). The input layout is not
        mutated. The conditional adapter fires only on compression-flagged
        tokens.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.intp)
        n = tokens.shape[0]
        n_mem = layout.n_entries
        if n_mem + n > cfg.max_layout:
            raise CapacityError(
                f"layout would hold {n_mem + n} entries > max_layout {cfg.max_layout}")
        mask.validate(n_mem, n)
        if comp_mask is None:
            comp_mask = comp_flags(tokens, cfg.comp_token_id)
        comp_idx = np.flatnonzero(comp_mask)

        k_pos = np.arange(n_mem + n)
        q_pos = np.arange(n_mem, n_mem + n)

        x = embed_tokens(self, tokens, adapters, comp_idx)
        new_k = np.empty((cfg.n_layers, n, cfg.d_model), dtype=self.dtype)
        new_v = np.empty_like(new_k)
        for layer in range(cfg.n_layers):
            p = f"layers.{layer}."
            xa = rmsnorm(x, self.params[p + "attn_norm"])
            lq = adapters.lora(layer, "q") if adapters else None
            lk = adapters.lora(layer, "k") if adapters else None
            lv = adapters.lora(layer, "v") if adapters else None
            q = project_rows(xa, self.params[p + "wq"], lq, comp_idx)
            k = project_rows(xa, self.params[p + "wk"], lk, comp_idx)
            v = project_rows(xa, self.params[p + "wv"], lv, comp_idx)
            new_k[layer] = k.data
            new_v[layer] = v.data
            if n_mem:
                k_all = T.concat([Tensor(layout.keys[layer]), k], axis=0)
                v_all = T.concat([Tensor(layout.values[layer]), v], axis=0)
            else:
                k_all, v_all = k, v
            ctx = attend(q, k_all, v_all, mask.allowed, q_pos, k_pos, cfg)
            lo = adapters.lora(layer, "o") if adapters else None
            ctx = project_rows(ctx, self.params[p + "wo"], lo, comp_idx)
            x = T.add(x, ctx)
            xf = rmsnorm(x, self.params[p + "ffn_norm"])
            x = T.add(x, mlp(xf, self.params[p + "w_gate"], self.params[p + "w_up"],
                             self.params[p + "w_down"]))
        xo = rmsnorm(x, self.params["final_norm"])
        logits = T.matmul(xo, self.params["head"].tensor)
        return logits, (new_k, new_v)

    # -- decoding ---------------------------------------------------------------

    def greedy_decode(self, layout: KVLayout, input_tokens, max_new: int,
                      adapters: AdapterSet | None = None,
                      stop_token: int | None = None,
                      ) -> tuple[np.ndarray, int]:
        """Argmax continuation of ``input_tokens`` over the given layout.

        New tokens attend the memory plus prior input/output tokens only.
        Every accepted token's KV is cached, so the returned peak entry
        count is exactly layout entries + inputs + generated tokens.
        """
        input_tokens = np.asarray(input_tokens, dtype=np.intp)
        if input_tokens.size == 0:
            raise ContractViolation("greedy_decode needs at least one input token")
        work = layout
        mask = causal_mask(work.n_entries, input_tokens.size)
        logits, (k, v) = self.forward(input_tokens, work, mask, adapters=adapters)
        work = work.extended(k, v, [TAG_INPUT] * input_tokens.size)
        out: list[int] = []
        last_logits = logits.data[-1]
        for _ in range(max_new):
            nxt = int(np.argmax(last_logits))
            out.append(nxt)
            step_mask = causal_mask(work.n_entries, 1)
            logits, (k, v) = self.forward(np.array([nxt]), work, step_mask,
                                          adapters=adapters)
            work = work.extended(k, v, [TAG_INPUT])
            last_logits = logits.data[-1]
            if stop_token is not None and nxt == stop_token:
                break
        return np.asarray(out, dtype=np.intp), work.n_entries

    def score_tokens(self, layout: KVLayout, tokens,
                     adapters: AdapterSet | None = None) -> np.ndarray:
        """Teacher-forced per-position log-probabilities log p(tokens[i+1] | ...).

        Returns an array of length len(tokens)-1 (next-token scores), plus the
        final row's full distribution is available via ``forward`` if needed.
        """
        tokens = np.asarray(tokens, dtype=np.intp)
        mask = causal_mask(layout.n_entries, tokens.size)
        logits, _ = self.forward(tokens, layout, mask, adapters=adapters)
        logp = T.log_softmax_rows(logits.data)
        return logp[np.arange(tokens.size - 1), tokens[1:]]
