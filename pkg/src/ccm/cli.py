"""Operator entry point: data generation, the two training stages,
session evaluation, streaming, and complexity sweeps.

Every command is deterministic under its flags and seed: reruns produce
byte-identical CSV artifacts. Exit codes: 0 ok, 1 usage error, 2 data
error, 3 numeric contract violation. ``CCM_THREADS`` caps evaluation
parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .complexity import ComplexityParams, llama_7b_params, sweep_rows
from .engine import Session, StreamCaps, evaluate_multichoice, evaluate_perplexity
from .errors import CcmError, ContractViolation, DataError, UsageError
from .lora import AdapterSet
from .model import ToyLM
from .seeding import derive_seed
from .taskgen import (ICLDataset, VocabSpec, gen_icl_dataset, gen_iid_stream,
                      gen_stream, icl_compression_sampler, icl_pretrain_sampler,
                      read_dataset, stream_compression_sampler,
                      stream_pretrain_sampler, write_icl_dataset,
                      write_stream_dataset, StreamVocab)
from .training import Recipe, pretrain, train_compression, write_metrics_csv

EVAL_POLICIES = ("concat", "merge", "ema", "independent", "full", "none")
STREAM_POLICIES = ("concat", "sliding")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we own exit codes
        raise UsageError(message)


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(x) for x in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _load_recipe(args, **overrides) -> Recipe:
    recipe = Recipe.load(args.config) if args.config else Recipe()
    for key, value in overrides.items():
        if value is not None:
            setattr(recipe, key, value)
    return recipe


def _require_icl(data) -> ICLDataset:
    if not isinstance(data, ICLDataset):
        raise DataError("this command needs an ICL dataset file")
    return data


def _require_stream(data):
    if isinstance(data, ICLDataset):
        raise DataError("this command needs a stream dataset file")
    return data


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.kind == "icl":
        vocab = VocabSpec(n_pattern=args.pattern_tokens, n_labels=max(8, args.classes))
        ds = gen_icl_dataset(args.identities, T=args.t_max, n_classes=args.classes,
                             seed=args.seed, pattern_len=args.pattern_len,
                             vocab=vocab, test_fraction=args.test_fraction)
        write_icl_dataset(args.out, ds)
    else:
        vocab = StreamVocab()
        gen = gen_iid_stream if args.kind == "stream-iid" else gen_stream
        streams = [gen(args.length, seed=args.seed, vocab=vocab, identity=i)
                   for i in range(args.streams)]
        write_stream_dataset(args.out, streams, vocab, seed=args.seed,
                             kind_note=args.kind)
    print(f"wrote {args.out}")
    return 0


def _model_from_flags(args, vocab) -> ToyLM:
    overrides = {}
    if args.layers:
        overrides["n_layers"] = args.layers
    if args.d_model:
        overrides["d_model"] = args.d_model
    if args.heads:
        overrides["n_heads"] = args.heads
    if args.d_ff:
        overrides["d_ff"] = args.d_ff
    config = vocab.model_config(**overrides)
    return ToyLM.init(config, seed=derive_seed(args.seed, "model-init"),
                      dtype=np.float32)


def cmd_pretrain(args) -> int:
    data = read_dataset(args.data)
    recipe = _load_recipe(args, steps=args.steps, batch=args.batch, lr=args.lr,
                          seed=args.seed)
    if isinstance(data, ICLDataset):
        recipe.T = data.T
        model = _model_from_flags(args, data.vocab)
        sampler = icl_pretrain_sampler(data.train, T=data.T, vocab=data.vocab)
    else:
        streams, vocab, _ = data
        model = _model_from_flags(args, vocab)
        sampler = stream_pretrain_sampler(streams, window=args.window)
    rows = pretrain(model, sampler, recipe)
    model.save(args.out)
    if args.metrics:
        write_metrics_csv(args.metrics, rows)
    print(f"pretrained {recipe.steps} steps, final loss {rows[-1]['loss']:.4f}; "
          f"wrote {args.out}")
    return 0


def cmd_train_compress(args) -> int:
    data = read_dataset(args.data)
    model = ToyLM.load(args.model)
    model.freeze()
    recipe = _load_recipe(args, steps=args.steps, batch=args.batch, lr=args.lr,
                          seed=args.seed, policy=args.policy, s=args.slots)
    if recipe.policy not in ("concat", "merge", "ema", "independent"):
        raise UsageError(f"--policy {recipe.policy!r} is not a training policy")
    if isinstance(data, ICLDataset):
        recipe.T = data.T
        sampler = icl_compression_sampler(data.train)
    else:
        streams, _, _ = data
        sampler = stream_compression_sampler(streams, chunk=args.chunk,
                                             io_len=args.io_len)
    adapters = AdapterSet.init(model, rank=args.rank, alpha=args.alpha,
                               comp_len=recipe.s,
                               seed=derive_seed(recipe.seed, "adapter-init"))
    rows = train_compression(model, adapters, sampler, recipe)
    adapters.save(args.out)
    if args.metrics:
        write_metrics_csv(args.metrics, rows)
    print(f"trained adapters ({recipe.policy}, s={recipe.s}) "
          f"final loss {rows[-1]['loss']:.4f}; wrote {args.out}")
    return 0


def eval_rows(model: ToyLM, adapters: AdapterSet | None, ds: ICLDataset,
              policy: str, max_eval: int | None = None,
              threads: int = 1) -> list[list]:
    """One row per t = 1..T: accuracy and measured KV counts."""
    samples = ds.test if max_eval is None else ds.test[:max_eval]
    label_ids = [ds.vocab.label_id(i) for i in range(ds.n_classes)]
    choices = [[lid] for lid in label_ids]

    def run_identity(sample):
        session = Session(model, adapters, policy)
        per_t = []
        for t in range(1, ds.T + 1):
            comp_peak = session.ingest(sample.segments[t - 1])
            idx = evaluate_multichoice(session, sample.inputs[t - 1], choices)
            correct = label_ids[idx] == sample.outputs[t - 1][0]
            infer_peak = (session.context_entries
                          + len(sample.inputs[t - 1]) + 1)
            per_t.append((correct, session.context_entries,
                          max(comp_peak, infer_peak)))
        return per_t

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_identity, samples))
    else:
        results = [run_identity(s) for s in samples]

    rows = []
    for t in range(1, ds.T + 1):
        at_t = [r[t - 1] for r in results]
        acc = float(np.mean([x[0] for x in at_t]))
        ctx = float(np.mean([x[1] for x in at_t]))
        peak = float(np.mean([x[2] for x in at_t]))
        rows.append([policy, t, f"{acc:.6f}", f"{ctx:.2f}", f"{peak:.2f}"])
    return rows


def cmd_eval(args) -> int:
    if args.policy not in EVAL_POLICIES:
        raise UsageError(f"--policy must be one of {EVAL_POLICIES}")
    if args.policy in ("concat", "merge", "ema", "independent") \
            and args.adapters is None:
        raise UsageError(f"policy {args.policy!r} needs --adapters")
    ds = _require_icl(read_dataset(args.data))
    model = ToyLM.load(args.model)
    model.freeze()
    adapters = AdapterSet.load(args.adapters, model) if args.adapters else None
    threads = int(os.environ.get("CCM_THREADS", "1"))
    rows = eval_rows(model, adapters, ds, args.policy, args.max_eval, threads)
    _write_csv(args.out, ["policy", "t", "accuracy", "context_kv_entries",
                          "peak_kv_entries"], rows)
    print(f"wrote {args.out}")
    return 0


def cmd_stream(args) -> int:
    if args.policy not in STREAM_POLICIES:
        raise UsageError(f"--policy must be one of {STREAM_POLICIES}")
    if args.policy == "concat" and args.adapters is None:
        raise UsageError("policy 'concat' needs --adapters")
    caps = StreamCaps(n_sink=args.sink, ccm_entries=args.ccm_entries,
                      window=args.window, chunk=args.chunk, comp_len=args.slots)
    streams, _, _ = _require_stream(read_dataset(args.data))
    if args.stream_index >= len(streams):
        raise DataError(f"stream index {args.stream_index} out of range")
    model = ToyLM.load(args.model)
    model.freeze()
    adapters = AdapterSet.load(args.adapters, model) if args.adapters else None
    tokens = np.asarray(streams[args.stream_index].tokens, dtype=np.intp)
    if args.length:
        tokens = tokens[:args.length]
    result = evaluate_perplexity(model, adapters, args.policy, tokens, caps)
    ppl_cum = result.cumulative_perplexity()
    rows = []
    for i in range(result.nll.size):
        rows.append([i + 1, result.kv_totals[i], f"{ppl_cum[i]:.6f}",
                     result.events[i]])
    _write_csv(args.out, ["pos", "kv_total", "ppl_cum", "compression_event"], rows)
    print(f"wrote {args.out} (ppl {result.perplexity:.4f}, "
          f"max kv {int(result.kv_totals.max())})")
    return 0


def cmd_complexity(args) -> int:
    if args.llama7b:
        base = llama_7b_params(l_c=args.lc, l_i=args.li)
    else:
        base = ComplexityParams(t=1, l_c=args.lc, l_i=args.li, s=1,
                                n_layers=args.layers or 4,
                                d_model=args.d_model or 128,
                                n_params=args.params)
    t_values = list(range(1, args.t_max + 1))
    s_values = [int(x) for x in args.slots.split(",")]
    rows = sweep_rows(base, t_values, s_values)
    out_rows = [[r["method"], r["phase"], r["t"], r["s"], r["kv_entries"],
                 r["kv_bytes_fp16"], f"{r['attn_flops']:.6g}"] for r in rows]
    _write_csv(args.out, ["method", "phase", "t", "s", "kv_entries",
                          "kv_bytes_fp16", "attn_flops"], out_rows)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="ccm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="recipe file (key=value)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--kind", choices=("icl", "stream", "stream-iid"), default="icl")
    g.add_argument("--identities", type=int, default=2200)
    g.add_argument("--t-max", type=int, default=8, dest="t_max")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--pattern-len", type=int, default=4, dest="pattern_len")
    g.add_argument("--pattern-tokens", type=int, default=64, dest="pattern_tokens")
    g.add_argument("--test-fraction", type=float, default=0.1, dest="test_fraction")
    g.add_argument("--length", type=int, default=10000)
    g.add_argument("--streams", type=int, default=3)

    p = sub.add_parser("pretrain", help="stage 1: train the base model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--metrics", default=None)
    p.add_argument("--window", type=int, default=192, help="stream sample length")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None, dest="d_model")
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None, dest="d_ff")

    c = sub.add_parser("train-compress", help="stage 2: train the adapters")
    common(c)
    c.add_argument("--data", required=True)
    c.add_argument("--model", required=True)
    c.add_argument("--policy", default=None)
    c.add_argument("--slots", type=int, default=None)
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--batch", type=int, default=None)
    c.add_argument("--lr", type=float, default=None)
    c.add_argument("--rank", type=int, default=8)
    c.add_argument("--alpha", type=float, default=16.0)
    c.add_argument("--metrics", default=None)
    c.add_argument("--chunk", type=int, default=64)
    c.add_argument("--io-len", type=int, default=16, dest="io_len")

    e = sub.add_parser("eval", help="per-time-step accuracy and KV counts")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--adapters", default=None)
    e.add_argument("--policy", required=True)
    e.add_argument("--max-eval", type=int, default=None, dest="max_eval")

    s = sub.add_parser("stream", help="streaming perplexity under a KV budget")
    common(s)
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--adapters", default=None)
    s.add_argument("--policy", required=True)
    s.add_argument("--sink", type=int, default=1)
    s.add_argument("--ccm-entries", type=int, default=8, dest="ccm_entries")
    s.add_argument("--window", type=int, default=151)
    s.add_argument("--chunk", type=int, default=64)
    s.add_argument("--slots", type=int, default=2)
    s.add_argument("--stream-index", type=int, default=0, dest="stream_index")
    s.add_argument("--length", type=int, default=None)

    x = sub.add_parser("complexity", help="analytic KV / FLOPS sweep")
    common(x)
    x.add_argument("--t-max", type=int, default=16, dest="t_max")
    x.add_argument("--lc", type=int, default=50)
    x.add_argument("--li", type=int, default=10)
    x.add_argument("--slots", default="1,2,4,8")
    x.add_argument("--llama7b", action="store_true")
    x.add_argument("--layers", type=int, default=None)
    x.add_argument("--d-model", type=int, default=None, dest="d_model")
    x.add_argument("--params", type=float, default=0.0)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-compress": cmd_train_compress,
    "eval": cmd_eval,
    "stream": cmd_stream,
    "complexity": cmd_complexity,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"numeric contract violation: {exc}", file=sys.stderr)
        return 3
    except CcmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
