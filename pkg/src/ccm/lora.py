"""Conditional low-rank adapters gated on compression tokens.

A LoRA pair (A, B) adds a rank-k update (alpha/k) * A^T B to one of the
attention projections, but only for tokens whose id equals the reserved
compression token. Ordinary tokens pass through the frozen base weights
bit-exactly, so attaching fresh adapters never changes model behaviour on
compression-free input. The compression-token embedding row is trained
jointly with the adapters and shared across all time steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .errors import ContractViolation, DataError, DimensionError
from .tensor import Parameter, Tensor

TARGETS = ("q", "k", "v", "o")


@dataclass
class LoRAPair:
    """One low-rank update: effective delta-W = (alpha/rank) * A^T B."""

    a: Parameter  # [rank, d]
    b: Parameter  # [rank, d]
    alpha: float
    rank: int
    layer: int
    target: str

    def delta(self, x: Tensor) -> Tensor:
        """Apply the low-rank update to row vectors: (x B^T) A * alpha/rank."""
        down = T.matmul(x, T.transpose(self.b.tensor, (1, 0)))
        return T.mul(T.matmul(down, self.a.tensor), self.alpha / self.rank)


def comp_flags(tokens: np.ndarray, comp_token_id: int) -> np.ndarray:
    """Per-token gate m (spec: m = 1 iff the token is the compression token)."""
    return np.asarray(tokens) == comp_token_id


def conditional_project(w: Tensor, lora: LoRAPair | None, x_h: Tensor, m: bool) -> Tensor:
    """Project a single hidden vector, adding the low-rank delta only when gated.

    ``x_h`` is a [d] vector; weights act on row vectors (y = x @ w).
    """
    if x_h.data.ndim != 1:
        raise DimensionError("conditional_project expects a single hidden vector")
    row = T.reshape(x_h, (1, x_h.shape[0]))
    out = T.matmul(row, w)
    if m and lora is not None:
        out = T.add(out, lora.delta(row))
    return T.reshape(out, (out.shape[1],))


class AdapterSet:
    """All LoRA pairs for a model plus the trainable compression embedding.

    ``comp_len`` records how many compression tokens one segment is
    condensed into (the slot count s of every compressed memory entry).
    """

    def __init__(self, pairs: dict[tuple[int, str], LoRAPair],
                 comp_embedding: Parameter, rank: int, alpha: float,
                 comp_len: int):
        self.pairs = pairs
        self.comp_embedding = comp_embedding  # [1, d]
        self.rank = rank
        self.alpha = alpha
        self.comp_len = comp_len

    @classmethod
    def init(cls, model, rank: int = 8, alpha: float = 16.0, comp_len: int = 1,
             seed: int = 0, targets: tuple[str, ...] = TARGETS) -> "AdapterSet":
        """Fresh adapters: A random normal, B zero (so the initial delta is zero)."""
        cfg = model.config
        dtype = model.dtype
        rng = np.random.default_rng(seed)
        pairs: dict[tuple[int, str], LoRAPair] = {}
        for layer in range(cfg.n_layers):
            for tgt in targets:
                a = Parameter(f"adapter/layers.{layer}.{tgt}.a",
                              Tensor((rng.standard_normal((rank, cfg.d_model))
                                      / np.sqrt(cfg.d_model)).astype(dtype)))
                b = Parameter(f"adapter/layers.{layer}.{tgt}.b",
                              Tensor(np.zeros((rank, cfg.d_model), dtype=dtype)))
                pairs[(layer, tgt)] = LoRAPair(a, b, alpha, rank, layer, tgt)
        comp_row = model.params["embed"].data[cfg.comp_token_id].copy()
        comp_embedding = Parameter("adapter/comp_embedding",
                                   Tensor(comp_row.reshape(1, -1)))
        return cls(pairs, comp_embedding, rank, alpha, comp_len)

    def lora(self, layer: int, target: str) -> LoRAPair | None:
        return self.pairs.get((layer, target))

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for pair in self.pairs.values():
            out.append(pair.a)
            out.append(pair.b)
        out.append(self.comp_embedding)
        return out

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        arrays = {p.name: p.data for p in self.parameters()}
        save_arrays(path, arrays, meta={
            "kind": "adapters", "rank": self.rank, "alpha": self.alpha,
            "comp_len": self.comp_len,
        })

    @classmethod
    def load(cls, path, model) -> "AdapterSet":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "adapters":
            raise DataError(f"{path}: not an adapter checkpoint")
        adapters = cls.init(model, rank=int(meta["rank"]), alpha=float(meta["alpha"]),
                            comp_len=int(meta["comp_len"]))
        for p in adapters.parameters():
            if p.name not in arrays:
                raise DataError(f"{path}: missing adapter record {p.name!r}")
            if arrays[p.name].shape != p.data.shape:
                raise DataError(f"{path}: shape mismatch for {p.name!r}")
            p.data[...] = arrays[p.name].astype(p.data.dtype)
        return adapters


def trainable_parameters(model, adapters: AdapterSet) -> list[Parameter]:
    """Exactly the compression-stage trainables: LoRA tensors + shared embedding row.

    The base model must already be frozen.
    """
    thawed = [p.name for p in model.parameters() if p.trainable]
    if thawed:
        raise ContractViolation(f"base model not frozen: {thawed[:3]}...")
    return adapters.parameters()
