"""Perplexity, counterfactual edit success (ES/PS/NS) and rule-entailment accuracy."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import LABELS, EditSample, KnowledgeSample, render
from .injection import Batch, collate, injected_forward_batch
from .model import DecoderModel, EncoderBank, decoder_forward, params_hash
from .training import next_token_targets

MODES = ("plain", "concat", "injected")


class EvalError(ValueError):
    pass


def _logits(decoder, bank, subset, batch: Batch, mode: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Logits plus aligned (targets, mask) for the layout ``mode`` uses."""
    if mode not in MODES:
        raise EvalError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "injected":
        if bank is None:
            raise EvalError("injected mode needs an encoder bank")
        ids, tmask = batch.plain_ids, batch.plain_target_mask
    elif mode == "concat":
        ids, tmask = batch.kx_ids, batch.kx_target_mask
    else:
        ids, tmask = batch.plain_ids, batch.plain_target_mask
    with T.no_grad():
        if not isinstance(decoder, DecoderModel):
            logits = np.asarray(decoder(ids))
        elif mode == "injected":
            logits = injected_forward_batch(decoder, bank, subset, batch)[0].data
        else:
            logits = decoder_forward(decoder, ids)[0].data
    tg, m = next_token_targets(ids, tmask)
    return logits, tg, m


def target_logprobs(decoder, bank, subset, samples: list[KnowledgeSample], mode: str,
                    batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (sum of target-token log-probs, number of target tokens).

    ``decoder`` may also be any callable mapping (B, T) ids to (B, T, V) logits.
    """
    max_ctx = decoder.cfg.max_context if isinstance(decoder, DecoderModel) else None
    rendered = [render(s, max_ctx) for s in samples]
    sums = np.zeros(len(rendered))
    counts = np.zeros(len(rendered), dtype=np.int64)
    for s in range(0, len(rendered), batch_size):
        batch = collate(rendered[s:s + batch_size])
        logits, tg, m = _logits(decoder, bank, subset, batch, mode)
        logp = T.log_softmax_np(logits.astype(np.float64))
        picked = np.take_along_axis(logp, tg[..., None], axis=-1)[..., 0]
        sums[s:s + len(batch.k_lens)] = (picked * m).sum(axis=1)
        counts[s:s + len(batch.k_lens)] = m.sum(axis=1)
    return sums, counts


def perplexity(decoder, bank, subset, dataset: list[KnowledgeSample], mode: str) -> float:
    """exp of the mean cross-entropy over every target token in ``dataset``."""
    if not dataset:
        raise EvalError("perplexity of an empty dataset")
    sums, counts = target_logprobs(decoder, bank, subset, dataset, mode)
    return math.exp(-sums.sum() / counts.sum())


def _scores(decoder, bank, subset, pairs: list[tuple[str, str]], mode: str) -> np.ndarray:
    samples = [KnowledgeSample([], prompt, obj) for prompt, obj in pairs]
    sums, counts = target_logprobs(decoder, bank, subset, samples, mode)
    return sums / counts


@dataclass
class EditMetrics:
    es: float
    ps: float
    ns: float
    ps_per_edit: float
    ns_per_edit: float
    n_edits: int
    n_paraphrases: int
    n_neighborhood: int
    es_flips: int


def edit_metrics(decoder, bank, subset, edit_set: list[EditSample]) -> EditMetrics:
    """Efficacy / paraphrase / neighbourhood success by length-normalised object log-probability.

    A prompt is flipped when score(counter) > score(true), strictly. ES and PS count flips;
    NS counts neighbourhood prompts that are not flipped, so a tie fails ES/PS and passes NS.
    """
    for e in edit_set:
        if not e.paraphrases or not e.neighborhood:
            raise EvalError(f"edit for subject {e.subject!r} has an empty paraphrase or neighbourhood list")
    mode = "plain" if bank is None or not subset else "injected"
    pairs: list[tuple[str, str]] = []
    slots = []
    for e in edit_set:
        prompts = [("es", e.prompt)] + [("ps", p) for p in e.paraphrases] + [("ns", p) for p in e.neighborhood]
        for kind, p in prompts:
            slots.append(kind)
            pairs.append((p, e.true_object))
            pairs.append((p, e.counter_object))
    sc = _scores(decoder, bank, subset, pairs, mode).reshape(-1, 2)
    true_s, counter_s = sc[:, 0], sc[:, 1]
    kinds = np.array(slots)
    flip = counter_s > true_s
    keep = ~flip
    es_mask, ps_mask, ns_mask = kinds == "es", kinds == "ps", kinds == "ns"
    per_edit_ps, per_edit_ns = [], []
    pos = 0
    for e in edit_set:
        n = 1 + len(e.paraphrases) + len(e.neighborhood)
        f = flip[pos:pos + n]
        k = keep[pos:pos + n]
        per_edit_ps.append(f[1:1 + len(e.paraphrases)].mean())
        per_edit_ns.append(k[1 + len(e.paraphrases):].mean())
        pos += n
    return EditMetrics(
        es=float(flip[es_mask].mean()),
        ps=float(flip[ps_mask].mean()),
        ns=float(keep[ns_mask].mean()),
        ps_per_edit=float(np.mean(per_edit_ps)),
        ns_per_edit=float(np.mean(per_edit_ns)),
        n_edits=len(edit_set),
        n_paraphrases=int(ps_mask.sum()),
        n_neighborhood=int(ns_mask.sum()),
        es_flips=int(flip[es_mask].sum()),
    )


def icr_predictions(decoder, bank, subset, dataset: list[KnowledgeSample], mode: str) -> list[str]:
    for s in dataset:
        if s.target not in LABELS:
            raise EvalError(f"sample {s.sample_id!r} has label {s.target!r}, expected one of {LABELS}")
    samples = [KnowledgeSample(s.knowledge, s.source, lab, s.sample_id) for s in dataset for lab in LABELS]
    sums, counts = target_logprobs(decoder, bank, subset, samples, mode)
    scores = (sums / counts).reshape(len(dataset), len(LABELS))
    return [LABELS[i] for i in scores.argmax(axis=1)]


def icr_accuracy(decoder, bank, subset, dataset: list[KnowledgeSample], mode: str) -> float:
    """Fraction of samples whose highest-scoring label string is the gold label."""
    if not dataset:
        raise EvalError("accuracy of an empty dataset")
    preds = icr_predictions(decoder, bank, subset, dataset, mode)
    return float(np.mean([p == s.target for p, s in zip(preds, dataset)]))


def fingerprint(decoder: DecoderModel, bank: EncoderBank | None = None, subset=()) -> str:
    h = hashlib.sha256(decoder.param_hash().encode())
    if bank is not None:
        arrays = {f"{l}/{k}": v.data for l in subset for k, v in bank[l].params.items()}
        h.update(params_hash(arrays).encode())
    h.update(json.dumps(list(subset)).encode())
    return h.hexdigest()[:16]


@dataclass
class MetricsReport:
    perplexity: dict = field(default_factory=dict)   # dataset -> mode -> value
    edit: dict = field(default_factory=dict)         # label -> EditMetrics fields
    accuracy: dict = field(default_factory=dict)     # dataset -> mode -> value
    counts: dict = field(default_factory=dict)
    fingerprint: str = ""

    def validate(self) -> None:
        for em in self.edit.values():
            for k in ("es", "ps", "ns", "ps_per_edit", "ns_per_edit"):
                if not 0.0 <= em[k] <= 1.0:
                    raise EvalError(f"{k}={em[k]} outside [0, 1]")
        for modes in self.accuracy.values():
            for v in modes.values():
                if not 0.0 <= v <= 1.0:
                    raise EvalError(f"accuracy {v} outside [0, 1]")

    def add_edit(self, label: str, m: EditMetrics) -> None:
        self.edit[label] = asdict(m)

    def to_json(self) -> str:
        self.validate()
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def to_table(self) -> str:
        rows = [("section", "name", "metric", "value")]
        for ds in sorted(self.perplexity):
            for mode in sorted(self.perplexity[ds]):
                rows.append(("perplexity", ds, mode, f"{self.perplexity[ds][mode]:.4g}"))
        for ds in sorted(self.accuracy):
            for mode in sorted(self.accuracy[ds]):
                rows.append(("accuracy", ds, mode, f"{self.accuracy[ds][mode]:.4f}"))
        for label in sorted(self.edit):
            for k in ("es", "ps", "ns", "ps_per_edit", "ns_per_edit", "n_edits"):
                v = self.edit[label][k]
                rows.append(("edit", label, k, f"{v:.4f}" if isinstance(v, float) else str(v)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
