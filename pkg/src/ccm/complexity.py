"""Analytic KV-memory and attention-FLOPS accounting for online inference.

Entry counts are exact (they must equal what a live session measures);
FLOPS use the standard dense estimates: 2 * n_params per processed token
for a forward pass, and 4 * d_model * n_layers reads per (query, KV entry)
pair for attention (QK plus AV). The break-even token length is the
smallest inference length at which the attention savings from a shorter
context outweigh the forward-pass overhead of the compression tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import UsageError

METHODS = ("full", "fixed_comp", "ccm_concat", "ccm_merge")
PHASES = ("compression", "inference")


@dataclass(frozen=True)
class ComplexityParams:
    t: int            # time step
    l_c: int          # expected context segment KV length
    l_i: int          # input + output length
    s: int            # compression token (slot) length
    n_layers: int
    d_model: int
    d_ff: int = 0
    vocab_size: int = 0
    n_params: float = 0.0

    def __post_init__(self):
        if min(self.t, self.l_c, self.l_i, self.s, self.n_layers, self.d_model) <= 0:
            raise UsageError("complexity parameters must be positive")
        if self.l_c < self.s:
            raise UsageError("segment length l_c must be >= slot length s")


def llama_7b_params(t: int = 16, l_c: int = 50, l_i: int = 10, s: int = 1,
                    ) -> ComplexityParams:
    """Dimensions of a 7B-parameter decoder (32 layers, width 4096)."""
    return ComplexityParams(t=t, l_c=l_c, l_i=l_i, s=s, n_layers=32, d_model=4096,
                            d_ff=11008, vocab_size=32000, n_params=6.7e9)


def kv_entries(params: ComplexityParams, method: str, phase: str) -> int:
    """Exact KV entry count for one method/phase at time step t.

    The counts instantiate the complexity table rows: full inference holds
    t*l_c + l_i entries, fixed-context compression reprocesses t*l_c + s,
    concat compression holds (t-1)*s + l_c + s and serves t*s + l_i at
    inference, merge stays at s + l_c + s / s + l_i. At t = 1 the memory
    term of a merge compression is zero (the memory starts empty).
    """
    t, l_c, l_i, s = params.t, params.l_c, params.l_i, params.s
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    if phase not in PHASES:
        raise UsageError(f"unknown phase {phase!r}")
    if method == "full":
        return 0 if phase == "compression" else t * l_c + l_i
    if method == "fixed_comp":
        return t * l_c + s if phase == "compression" else s + l_i
    if method == "ccm_concat":
        return (t - 1) * s + l_c + s if phase == "compression" else t * s + l_i
    # ccm_merge: running state is s entries once it exists
    mem_before = s if t >= 2 else 0
    return mem_before + l_c + s if phase == "compression" else s + l_i


def _phase_queries(params: ComplexityParams, method: str, phase: str) -> int:
    t, l_c, l_i, s = params.t, params.l_c, params.l_i, params.s
    if phase == "inference":
        return l_i
    if method == "full":
        return 0
    if method == "fixed_comp":
        return t * l_c + s
    return l_c + s


def attn_flops(params: ComplexityParams, method: str, phase: str) -> float:
    """Attention read cost: 4 * d * L per (query token, visible KV entry)."""
    unit = 4.0 * params.d_model * params.n_layers
    return unit * _phase_queries(params, method, phase) * kv_entries(params, method, phase)


def kv_bytes(entries: int, n_layers: int, d_model: int, bytes_per_value: int) -> int:
    """Entries are per-layer sequence positions: each holds 2*L*d numbers."""
    return entries * 2 * n_layers * d_model * bytes_per_value


def compression_factor(l_c: int, s: int) -> int:
    """Context length over slot length, rounded half up."""
    if s > l_c:
        raise UsageError("slot length exceeds segment length")
    return int(math.floor(l_c / s + 0.5))


def break_even_inference_tokens(params: ComplexityParams) -> float:
    """Smallest inference token count where attention savings beat overhead.

    Overhead: forward-computing s compression tokens costs ~2 * n_params * s.
    Savings: every inference token reads l_c - s fewer KV entries, i.e.
    4 * d * L * (l_c - s) fewer FLOPS.
    """
    if params.n_params <= 0:
        raise UsageError("break-even needs the parameter count")
    if params.s >= params.l_c:
        return math.inf
    overhead = 2.0 * params.n_params * params.s
    savings = 4.0 * params.d_model * params.n_layers * (params.l_c - params.s)
    return float(math.floor(overhead / savings) + 1)


@dataclass
class ComplexityReport:
    """Per-method entry counts, byte sizes and FLOPS at one (t, s)."""

    params: ComplexityParams
    rows: list[dict]

    @classmethod
    def build(cls, params: ComplexityParams) -> "ComplexityReport":
        rows = []
        for method in METHODS:
            for phase in PHASES:
                entries = kv_entries(params, method, phase)
                rows.append({
                    "method": method,
                    "phase": phase,
                    "t": params.t,
                    "s": params.s,
                    "kv_entries": entries,
                    "kv_bytes_fp16": kv_bytes(entries, params.n_layers,
                                              params.d_model, 2),
                    "kv_bytes_fp32": kv_bytes(entries, params.n_layers,
                                              params.d_model, 4),
                    "attn_flops": attn_flops(params, method, phase),
                })
        return cls(params, rows)


def sweep_rows(base: ComplexityParams, t_values, s_values) -> list[dict]:
    """One CSV row per (method, phase, t, s)."""
    rows = []
    for t in t_values:
        for s in s_values:
            params = ComplexityParams(t=t, l_c=base.l_c, l_i=base.l_i, s=s,
                                      n_layers=base.n_layers, d_model=base.d_model,
                                      d_ff=base.d_ff, vocab_size=base.vocab_size,
                                      n_params=base.n_params)
            rows.extend(ComplexityReport.build(params).rows)
    return rows
