"""Desk-scale efficiency measurements: FLOPs vs knowledge length, gradient memory, wall-clock."""
from __future__ import annotations

import csv
import io
import json
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, Rendered, ROLE_BOS, ROLE_KNOW, ROLE_SYS, ROLE_USR, SYS, USR
from .injection import collate, injected_forward_batch
from .model import DecoderModel, EncoderBank, decoder_forward, encoder_forward
from .training import capture_pass, next_token_targets


def _is_decoder(tag: str) -> bool:
    return tag == "decoder" or tag.startswith("decoder:")


def _is_encoder(tag: str) -> bool:
    return tag.startswith("encoder:")


def synthetic_sample(k_len: int, x_len: int, seed: int = 0) -> Rendered:
    """Random byte tokens laid out as [BOS] K [USR] src [SYS] tgt with |K| = k_len, |x| = x_len."""
    if x_len < 3:
        raise ValueError("x_len must leave room for [USR], [SYS] and one target token")
    rng = np.random.default_rng([seed, k_len, x_len])
    k = rng.integers(32, 127, size=k_len)
    n_src = (x_len - 2) // 2
    src = rng.integers(32, 127, size=n_src)
    tgt = rng.integers(32, 127, size=x_len - 2 - n_src)
    ids = np.concatenate([[BOS], k, [USR], src, [SYS], tgt]).astype(np.int64)
    roles = np.array([ROLE_BOS] + [ROLE_KNOW] * k_len + [ROLE_USR] * (1 + n_src) + [ROLE_SYS] * (1 + len(tgt)),
                     dtype=np.int8)
    return Rendered(ids, roles, k_len)


@dataclass
class BenchTable:
    columns: list
    rows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "rows": self.rows}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r.get(c, "") for c in self.columns])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [[str(r.get(c, "")) for c in self.columns] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)


def _scope_sum(d: dict, pred) -> int:
    return int(sum(v for k, v in d.items() if pred(k)))


def forward_flops(decoder: DecoderModel, bank: EncoderBank | None, subset, sample: Rendered,
                  mode: str) -> dict:
    batch = collate([sample])
    with T.no_grad(), T.measure() as c, T.trace_attention() as shapes:
        if mode == "plain":
            decoder_forward(decoder, batch.plain_ids)
        elif mode == "concat":
            decoder_forward(decoder, batch.kx_ids)
        elif mode == "injected":
            injected_forward_batch(decoder, bank, subset, batch)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    dec_ctx = sorted({t for tag, t in shapes if _is_decoder(tag)})
    return {
        "decoder_flops": _scope_sum(c.flops_by_scope, _is_decoder),
        "encoder_flops": _scope_sum(c.flops_by_scope, _is_encoder),
        "total_flops": c.flops_accumulated,
        "attention_flops_decoder": int(sum(v for (tag, op), v in c.flops_by_scope_op.items()
                                           if op == "attention" and _is_decoder(tag))),
        "decoder_context": dec_ctx[0] if dec_ctx else 0,
    }


def flop_profile(decoder: DecoderModel, bank: EncoderBank | None, subset, mode: str, k_lens,
                 x_len: int) -> BenchTable:
    """Forward FLOPs per knowledge length; concat rows beyond max_context are marked OOC."""
    table = BenchTable(["mode", "k_len", "x_len", "decoder_flops", "encoder_flops", "total_flops",
                        "attention_flops_decoder", "decoder_context"])
    for k in k_lens:
        row = {"mode": mode, "k_len": int(k), "x_len": x_len}
        if mode == "concat" and 1 + k + x_len > decoder.cfg.max_context:
            row.update({c: "OOC" for c in table.columns[3:]})
        else:
            row.update(forward_flops(decoder, bank, subset, synthetic_sample(int(k), x_len), mode))
        table.rows.append(row)
    return table


def _peak_report(name: str, c: T.OpCounters, decoder: DecoderModel) -> dict:
    layer_nodes = [c.graph_nodes_by_scope.get(f"decoder:{l}", 0) for l in range(decoder.cfg.n_layers)]
    return {
        "step": name,
        "peak_live_bytes": c.peak_live_bytes,
        "decoder_grad_bytes": _scope_sum(c.grad_bytes_by_scope, _is_decoder),
        "encoder_grad_bytes": _scope_sum(c.grad_bytes_by_scope, _is_encoder),
        "decoder_graph_nodes": sum(layer_nodes),
        "decoder_layers_in_graph": sum(1 for n in layer_nodes if n > 0),
    }


def pretrain_step_counters(decoder: DecoderModel, bank: EncoderBank, subset, samples: list[Rendered],
                           include_capture: bool = True) -> T.OpCounters:
    """One backprop-free step: no-grad capture passes then an MSE step for every encoder."""
    with T.measure() as c:
        if include_capture:
            cache = capture_pass(decoder, samples, layers=subset, batch_size=len(samples))
        else:
            with T.measure():
                cache = capture_pass(decoder, samples, layers=subset, batch_size=len(samples))
        idx = list(range(len(cache)))
        for l in subset:
            ids, tg, mask = cache.layer_targets(l, idx)
            out = encoder_forward(bank, l, ids, key_valid=ids != 257)
            loss = T.masked_mse(out, tg, mask)
            loss.backward()
            del out, loss
        for p in bank.parameters(subset):
            p.grad = None
        del cache
    return c


def finetune_step_counters(decoder: DecoderModel, bank: EncoderBank, subset,
                           samples: list[Rendered]) -> T.OpCounters:
    batch = collate(samples)
    with T.measure() as c:
        logits, _ = injected_forward_batch(decoder, bank, subset, batch)
        tg, m = next_token_targets(batch.plain_ids, batch.plain_target_mask)
        loss = T.cross_entropy(logits, tg, m)
        nodes = dict(c.graph_nodes_by_scope)
        loss.backward()
        c.graph_nodes_by_scope.update(nodes)
        del logits, loss
        for p in bank.parameters(subset):
            p.grad = None
    return c


def grad_memory_profile(decoder: DecoderModel, bank: EncoderBank, subset, samples: list[Rendered]) -> BenchTable:
    """Peak tracked bytes and gradient attribution for one pretrain step vs one finetune step."""
    table = BenchTable(["step", "peak_live_bytes", "decoder_grad_bytes", "encoder_grad_bytes",
                        "decoder_graph_nodes", "decoder_layers_in_graph"])
    table.rows.append(_peak_report("pretrain", pretrain_step_counters(decoder, bank, subset, samples), decoder))
    table.rows.append(_peak_report("finetune", finetune_step_counters(decoder, bank, subset, samples), decoder))
    return table


def environment_fingerprint() -> dict:
    import os

    return {"python": platform.python_version(), "numpy": np.__version__, "machine": platform.machine(),
            "system": platform.system(), "cpus": os.cpu_count()}


def timing_report(tasks: dict, repetitions: int) -> BenchTable:
    """Median / spread of wall-clock per call for each named zero-argument task."""
    if repetitions < 3:
        raise ValueError(f"timing needs at least 3 repetitions, got {repetitions}")
    table = BenchTable(["task", "repetitions", "median_s", "min_s", "max_s", "iqr_s", "env"])
    env = json.dumps(environment_fingerprint(), sort_keys=True)
    for name, fn in tasks.items():
        fn()  # warm-up
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        q = statistics.quantiles(times, n=4) if len(times) >= 4 else [min(times), 0, max(times)]
        table.rows.append({"task": name, "repetitions": repetitions, "median_s": round(statistics.median(times), 6),
                           "min_s": round(min(times), 6), "max_s": round(max(times), 6),
                           "iqr_s": round(q[2] - q[0], 6), "env": env})
    return table


def inference_tasks(decoder: DecoderModel, bank: EncoderBank, subset, k_len: int, x_len: int) -> dict:
    """Zero-argument forward passes for concat and injected inference at one knowledge length.

    Concat is left out when the joined sequence does not fit the decoder context.
    """
    batch = collate([synthetic_sample(k_len, x_len)])

    def concat():
        with T.no_grad():
            decoder_forward(decoder, batch.kx_ids)

    def injected():
        with T.no_grad():
            injected_forward_batch(decoder, bank, subset, batch)

    def plain():
        with T.no_grad():
            decoder_forward(decoder, batch.plain_ids)

    tasks = {f"plain_k{k_len}": plain}
    if batch.kx_ids.shape[1] <= decoder.cfg.max_context:
        tasks[f"concat_k{k_len}"] = concat
    tasks[f"injected_k{k_len}"] = injected
    return tasks
