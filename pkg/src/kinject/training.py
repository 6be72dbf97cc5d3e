"""Capture cache and the training loops: backprop-free encoder pretraining, fine-tuning, editing.

Also hosts the short next-token pretraining used to produce the desk-scale frozen decoder.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EditSample, KnowledgeSample, OverlongError, Rendered, render, target_mask
from .injection import Batch, build_pretrain_targets, collate, injected_forward_batch
from .model import DecoderModel, EncoderBank, decoder_forward, encoder_forward
from .optim import Adam, AdamState

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    layers: tuple = (3, 4, 5, 6, 7, 8)
    lr_start: float = 1e-5
    lr_peak: float = 1e-4
    lr_end: float = 1e-5
    warmup_steps: int = 100
    max_steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 200
    eval_every: int = 50
    log_every: int = 10

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune", "edit", "decoder"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not (self.lr_peak >= self.lr_start and self.lr_peak >= self.lr_end):
            raise ValueError("lr_peak must be >= lr_start and lr_end")
        if self.max_steps <= self.warmup_steps:
            raise ValueError(f"max_steps {self.max_steps} must exceed warmup_steps {self.warmup_steps}")
        self.layers = tuple(self.layers)
        self.betas = tuple(self.betas)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr_start`` to ``lr_peak``, then cosine decay to ``lr_end``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_peak
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / cfg.warmup_steps
    frac = min(1.0, (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps))
    return cfg.lr_end + 0.5 * (cfg.lr_peak - cfg.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainLog:
    name: str
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    val: list = field(default_factory=list)
    baseline: float | None = None
    diverged: bool = False
    final_loss: float | None = None

    def record(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def events(self):
        for s, l, r in zip(self.steps, self.losses, self.lrs):
            yield {"job": self.name, "step": s, "loss": l, "lr": r}
        for s, v in self.val:
            yield {"job": self.name, "step": s, "val_loss": v}
        yield {"job": self.name, "event": "end", "baseline": self.baseline,
               "final_loss": self.final_loss, "diverged": self.diverged}

    def write_jsonl(self, path, mode: str = "a") -> None:
        with open(path, mode) as fh:
            for e in self.events():
                fh.write(json.dumps(e) + "\n")


def render_all(samples, max_context: int) -> tuple[list[Rendered], int]:
    """Render samples, skipping overlong ones; returns (rendered, n_skipped)."""
    out, skipped = [], 0
    for s in samples:
        try:
            out.append(render(s, max_context))
        except OverlongError as exc:
            skipped += 1
            log.warning("skipping sample %s: %s", getattr(s, "sample_id", "?"), exc)
    return out, skipped


# ---------------------------------------------------------------------
# capture cache
# ---------------------------------------------------------------------

@dataclass
class CaptureRecord:
    sample_id: str
    k_len: int
    ids: np.ndarray
    offset: int      # row offset into each layer stream
    rows: int        # valid rows = plain length - 1


class CaptureCache:
    """Difference targets stored per layer, valid rows only.

    Record ``r`` of layer ``l`` holds rows ``k_len + 1 .. len(ids) - 1`` of that layer's
    aligned target; everything else in knowledge-run coordinates is masked.
    """

    def __init__(self, records: list[CaptureRecord], layers: dict[int, np.ndarray], d_model: int,
                 skipped: int = 0):
        self.records = records
        self.layers = layers
        self.d_model = d_model
        self.skipped = skipped

    def __len__(self) -> int:
        return len(self.records)

    def layer_targets(self, layer: int, idx: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded (ids, targets, mask) for records ``idx`` in knowledge-run coordinates."""
        if layer not in self.layers:
            raise KeyError(f"capture cache has no targets for layer {layer}; has {sorted(self.layers)}")
        stream = self.layers[layer]
        recs = [self.records[i] for i in idx]
        Tk = max(len(r.ids) for r in recs)
        ids = np.full((len(recs), Tk), 257, dtype=np.int64)
        tg = np.zeros((len(recs), Tk, self.d_model), dtype=stream.dtype)
        mask = np.zeros((len(recs), Tk), dtype=bool)
        for b, r in enumerate(recs):
            n = len(r.ids)
            ids[b, :n] = r.ids
            tg[b, r.k_len + 1:n] = stream[r.offset:r.offset + r.rows]
            mask[b, r.k_len + 1:n] = True
        return ids, tg, mask

    def zero_baseline(self, layer: int) -> float:
        s = self.layers[layer].astype(np.float64)
        return float((s * s).mean())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "index.jsonl", "w") as fh:
            fh.write(json.dumps({"d_model": self.d_model, "layers": sorted(self.layers),
                                 "dtype": "<f4", "skipped": self.skipped}) + "\n")
            for r in self.records:
                fh.write(json.dumps({"id": r.sample_id, "k_len": r.k_len, "ids": r.ids.tolist(),
                                     "offset": r.offset, "rows": r.rows}) + "\n")
        for l, stream in self.layers.items():
            (d / f"layer_{l:02d}.f32").write_bytes(np.ascontiguousarray(stream, dtype="<f4").tobytes())

    @classmethod
    def load(cls, directory, layers=None) -> "CaptureCache":
        """Load the index and only the requested layer streams."""
        d = Path(directory)
        with open(d / "index.jsonl") as fh:
            head = json.loads(fh.readline())
            records = []
            for line in fh:
                o = json.loads(line)
                records.append(CaptureRecord(o["id"], o["k_len"], np.array(o["ids"], dtype=np.int64),
                                             o["offset"], o["rows"]))
        wanted = head["layers"] if layers is None else list(layers)
        missing = [l for l in wanted if l not in head["layers"]]
        if missing:
            raise KeyError(f"capture cache at {d} has no layers {missing}")
        dm = head["d_model"]
        streams = {l: np.fromfile(d / f"layer_{l:02d}.f32", dtype="<f4").astype(np.float32).reshape(-1, dm)
                   for l in wanted}
        return cls(records, streams, dm, head.get("skipped", 0))


def capture_pass(decoder: DecoderModel, samples, layers=None, batch_size: int = 32) -> CaptureCache:
    """Two no-grad decoder passes per sample (with and without knowledge) -> difference targets."""
    layers = tuple(range(decoder.cfg.n_layers)) if layers is None else tuple(layers)
    if samples and isinstance(samples[0], Rendered):
        rendered, skipped = list(samples), 0
        ids_for = [getattr(s, "sample_id", str(i)) for i, s in enumerate(samples)]
    else:
        kept = []
        skipped = 0
        for s in samples:
            try:
                kept.append((s.sample_id, render(s, decoder.cfg.max_context)))
            except OverlongError as exc:
                skipped += 1
                log.warning("capture: skipping %s (%s)", s.sample_id, exc)
        ids_for = [k for k, _ in kept]
        rendered = [r for _, r in kept]
    records: list[CaptureRecord] = []
    chunks: dict[int, list[np.ndarray]] = {l: [] for l in layers}
    offset = 0
    with T.no_grad():
        for start in range(0, len(rendered), batch_size):
            part = rendered[start:start + batch_size]
            batch = collate(part)
            _, hk = decoder_forward(decoder, batch.kx_ids, capture=True)
            _, hp = decoder_forward(decoder, batch.plain_ids, capture=True)
            for b, r in enumerate(part):
                n_k, n_p = len(r.ids), r.x_len
                tgt = build_pretrain_targets([h.data[b, :n_p] for h in hp],
                                             [h.data[b, :n_k] for h in hk], r.k_len)
                rows = n_p - 1
                for l in layers:
                    chunks[l].append(tgt.targets[l, r.k_len + 1:n_k])
                records.append(CaptureRecord(ids_for[start + b], r.k_len, r.ids.copy(), offset, rows))
                offset += rows
    streams = {l: (np.concatenate(c).astype(np.float32) if c else
                   np.zeros((0, decoder.cfg.d_model), np.float32)) for l, c in chunks.items()}
    return CaptureCache(records, streams, decoder.cfg.d_model, skipped)


# ---------------------------------------------------------------------
# encoder pretraining (no decoder backprop)
# ---------------------------------------------------------------------

def _batch_order(n: int, cfg: TrainConfig) -> list[np.ndarray]:
    """Minibatch schedule shared by every layer, so outcomes are independent of co-trained layers."""
    rng = np.random.default_rng([cfg.seed, 0x0DE5])
    out: list[np.ndarray] = []
    while len(out) < cfg.max_steps:
        perm = rng.permutation(n)
        for s in range(0, n - cfg.batch_size + 1 if n >= cfg.batch_size else 1, cfg.batch_size):
            out.append(perm[s:s + cfg.batch_size])
            if len(out) == cfg.max_steps:
                break
    return out


def pretrain_encoder(bank: EncoderBank, layer: int, cache: CaptureCache, cfg: TrainConfig,
                     opt_state: AdamState | None = None) -> TrainLog:
    """Regress encoder ``layer`` onto the cached hidden-state differences (masked MSE)."""
    if layer not in cache.layers:
        raise KeyError(f"capture cache has no targets for layer {layer}")
    enc = bank[layer]
    params = enc.parameters()
    opt = Adam(params, cfg.betas, cfg.eps, cfg.weight_decay)
    if opt_state is not None:
        opt.state = opt_state
    tlog = TrainLog(f"pretrain:{layer}", baseline=cache.zero_baseline(layer))
    best = math.inf
    since_best = 0
    ema = None
    for step, idx in enumerate(_batch_order(len(cache), cfg)):
        ids, tg, mask = cache.layer_targets(layer, list(idx))
        key_valid = ids != 257
        out = encoder_forward(bank, layer, ids, key_valid=key_valid)
        loss = T.masked_mse(out, tg, mask)
        loss.backward()
        lr = lr_at(step, cfg)
        opt.step(lr)
        lv = float(loss.item())
        ema = lv if ema is None else 0.95 * ema + 0.05 * lv
        if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
            tlog.record(step, lv, lr)
        if ema < best * 0.999:
            best, since_best = ema, 0
        else:
            since_best += 1
        if step >= cfg.patience and ema >= tlog.baseline:
            tlog.diverged = True
            log.warning("encoder %d does not improve on the zero predictor after %d steps", layer, step)
            break
    tlog.final_loss = encoder_eval_mse(bank, layer, cache)
    if tlog.final_loss >= tlog.baseline:
        tlog.diverged = True
    return tlog


def encoder_eval_mse(bank: EncoderBank, layer: int, cache: CaptureCache, batch_size: int = 64) -> float:
    """Masked MSE of encoder ``layer`` over the whole cache."""
    tot, cnt = 0.0, 0
    with T.no_grad():
        for s in range(0, len(cache), batch_size):
            idx = list(range(s, min(len(cache), s + batch_size)))
            ids, tg, mask = cache.layer_targets(layer, idx)
            out = encoder_forward(bank, layer, ids, key_valid=ids != 257).data
            err = (out - tg)[mask].astype(np.float64)
            tot += float((err * err).sum())
            cnt += err.size
    return tot / cnt


def _pretrain_job(args):
    bank, layer, cache_dir, cfg = args
    cache = CaptureCache.load(cache_dir, [layer])
    tlog = pretrain_encoder(bank, layer, cache, cfg)
    return layer, {k: v.data for k, v in bank[layer].params.items()}, tlog


def pretrain_bank(bank: EncoderBank, layers, cache: CaptureCache, cfg: TrainConfig, jobs: int = 1,
                  cache_dir=None) -> dict[int, TrainLog]:
    """Pretrain each layer's encoder independently; ``jobs > 1`` runs layers in worker processes."""
    layers = tuple(layers)
    if jobs <= 1 or cache_dir is None:
        return {l: pretrain_encoder(bank, l, cache, cfg) for l in layers}
    logs = {}
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        for layer, arrays, tlog in ex.map(_pretrain_job, [(bank.subset([l]), l, cache_dir, cfg) for l in layers]):
            for k, v in arrays.items():
                bank[layer].params[k].data[...] = v
            logs[layer] = tlog
    return logs


# ---------------------------------------------------------------------
# fine-tuning and editing (backprop through the frozen decoder)
# ---------------------------------------------------------------------

class FrozenDecoderError(RuntimeError):
    pass


def next_token_targets(ids: np.ndarray, target_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Targets/mask aligned with logits: position t predicts token t + 1."""
    tg = np.zeros_like(ids)
    tg[:, :-1] = ids[:, 1:]
    m = np.zeros_like(target_mask)
    m[:, :-1] = target_mask[:, 1:]
    return tg, m


def _ce_on_batch(decoder, bank, subset, batch: Batch):
    logits, _ = injected_forward_batch(decoder, bank, subset, batch)
    tg, m = next_token_targets(batch.plain_ids, batch.plain_target_mask)
    return T.cross_entropy(logits, tg, m)


def batch_loss(decoder, bank, subset, rendered: list[Rendered], batch_size: int = 64) -> float:
    """Mean target-token CE over ``rendered`` (token-weighted), injected mode, no grad."""
    tot, cnt = 0.0, 0
    with T.no_grad():
        for s in range(0, len(rendered), batch_size):
            b = collate(rendered[s:s + batch_size])
            n = int(b.plain_target_mask[:, 1:].sum())
            tot += float(_ce_on_batch(decoder, bank, subset, b).item()) * n
            cnt += n
    return tot / cnt


def _supervised(decoder: DecoderModel, bank: EncoderBank, subset, rendered: list[Rendered],
                cfg: TrainConfig, name: str, val: list[Rendered] | None = None,
                stop_loss: float | None = None) -> TrainLog:
    subset = tuple(subset)
    if not decoder.frozen:
        raise FrozenDecoderError("decoder must be frozen before fine-tuning encoders")
    h0 = decoder.param_hash()
    params = bank.parameters(subset)
    opt = Adam(params, cfg.betas, cfg.eps, cfg.weight_decay)
    tlog = TrainLog(name)
    if val:
        tlog.val.append((0, batch_loss(decoder, bank, subset, val)))
    order = _batch_order(len(rendered), cfg)
    if stop_loss is not None and batch_loss(decoder, bank, subset, rendered) < stop_loss:
        order = []  # already converged: take no step
    for step, idx in enumerate(order):
        batch = collate([rendered[i] for i in idx])
        loss = _ce_on_batch(decoder, bank, subset, batch)
        loss.backward()
        lr = lr_at(step, cfg)
        opt.step(lr)
        if decoder.param_hash() != h0:
            raise FrozenDecoderError(f"decoder parameters changed at step {step}")
        lv = float(loss.item())
        if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
            tlog.record(step, lv, lr)
        if val and (step + 1) % cfg.eval_every == 0:
            tlog.val.append((step + 1, batch_loss(decoder, bank, subset, val)))
        if stop_loss is not None and (step + 1) % cfg.eval_every == 0:
            if batch_loss(decoder, bank, subset, rendered) < stop_loss:
                tlog.record(step, lv, lr)
                break
    tlog.final_loss = batch_loss(decoder, bank, subset, rendered)
    return tlog


def finetune(decoder: DecoderModel, bank: EncoderBank, subset, dataset: list[KnowledgeSample],
             cfg: TrainConfig, val: list[KnowledgeSample] | None = None,
             stop_loss: float | None = None) -> TrainLog:
    """Target-token cross-entropy through the frozen decoder into the encoders of ``subset``."""
    rendered, _ = render_all(dataset, decoder.cfg.max_context)
    val_r = render_all(val, decoder.cfg.max_context)[0] if val else None
    return _supervised(decoder, bank, subset, rendered, cfg, "finetune", val_r, stop_loss)


def edit_samples(edit_set: list[EditSample]) -> list[KnowledgeSample]:
    return [KnowledgeSample([], e.prompt, e.counter_object, f"edit-{i}") for i, e in enumerate(edit_set)]


def edit(decoder: DecoderModel, bank: EncoderBank, subset, edit_set: list[EditSample], cfg: TrainConfig,
         stop_loss: float | None = None) -> TrainLog:
    """Knowledge-free fine-tuning of the encoders onto the counterfactual objects."""
    rendered, _ = render_all(edit_samples(edit_set), decoder.cfg.max_context)
    tlog = _supervised(decoder, bank, subset, rendered, cfg, "edit", None, stop_loss)
    return tlog


# ---------------------------------------------------------------------
# desk-scale decoder pretraining
# ---------------------------------------------------------------------

def lm_sequences(samples: list[KnowledgeSample], plain_fraction: float, seed: int,
                 max_context: int, targets_only: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """(ids, loss-mask) pairs; a fraction of knowledge-bearing samples is rendered without knowledge."""
    rng = np.random.default_rng([seed, 0x1A])
    out = []
    for s in samples:
        r = render(s, max_context)
        plain = bool(s.knowledge) and rng.random() < plain_fraction
        ids = r.plain_ids if plain else r.ids
        if targets_only:
            mask = target_mask(r.plain_roles if plain else r.roles, ids)
        else:
            mask = np.ones(len(ids), dtype=bool)
            mask[0] = False
        out.append((ids, mask))
    return out


def pretrain_decoder(decoder: DecoderModel, sequences: list[tuple[np.ndarray, np.ndarray]],
                     cfg: TrainConfig, callback=None) -> TrainLog:
    """Next-token training of the decoder itself; leaves it frozen afterwards."""
    params = decoder.unfreeze()
    opt = Adam(params, cfg.betas, cfg.eps, cfg.weight_decay)
    tlog = TrainLog("pretrain-decoder")
    try:
        for step, idx in enumerate(_batch_order(len(sequences), cfg)):
            seqs = [sequences[i] for i in idx]
            L = max(len(s[0]) for s in seqs)
            ids = np.full((len(seqs), L), 257, dtype=np.int64)
            m = np.zeros((len(seqs), L), dtype=bool)
            for b, (s, mk) in enumerate(seqs):
                ids[b, :len(s)] = s
                m[b, :len(s)] = mk
            logits, _ = decoder_forward(decoder, ids[:, :-1])
            loss = T.cross_entropy(logits, ids[:, 1:], m[:, 1:])
            loss.backward()
            lr = lr_at(step, cfg)
            opt.step(lr)
            if step % cfg.log_every == 0 or step == cfg.max_steps - 1:
                tlog.record(step, float(loss.item()), lr)
                if callback is not None:
                    callback(step, float(loss.item()))
    finally:
        decoder.freeze()
    tlog.final_loss = tlog.losses[-1] if tlog.losses else None
    return tlog
