"""Shift alignment between the knowledge run and the plain run, and the injected forward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOS, PAD, Rendered, target_mask
from .model import DecoderModel, EncoderBank, decoder_forward, encoder_forward
from .tensor import Tensor


class AlignmentError(ValueError):
    pass


def shift_left(seq, b: int):
    """Drop the first ``b`` rows."""
    n = len(seq)
    if b < 0 or b > n:
        raise AlignmentError(f"shift_left by {b} outside [0, {n}]")
    return seq[b:]


def shift_right(seq, b: int, fill=0.0):
    """Prepend ``b`` invalid rows; returns (shifted, validity mask)."""
    if b < 0:
        raise AlignmentError(f"shift_right by negative amount {b}")
    seq = np.asarray(seq)
    pad = np.full((b,) + seq.shape[1:], fill, dtype=seq.dtype)
    mask = np.concatenate([np.zeros(b, dtype=bool), np.ones(len(seq), dtype=bool)])
    return np.concatenate([pad, seq], axis=0), mask


@dataclass
class AlignedTarget:
    """Per-layer difference targets in knowledge-run coordinates, shape (n_layers, T, d)."""

    targets: np.ndarray
    mask: np.ndarray
    k_len: int


def build_pretrain_targets(capture_plain, capture_knowledge, k_len: int) -> AlignedTarget:
    """Knowledge-run states minus right-shifted plain-run states, per layer.

    ``targets`` holds the difference wherever the shifted plain run is defined (t >= k_len);
    ``mask`` additionally drops t == k_len, the slot the plain run's BOS lands on.
    """
    if len(capture_plain) != len(capture_knowledge):
        raise AlignmentError(f"layer count mismatch: {len(capture_plain)} vs {len(capture_knowledge)}")
    out = []
    mask = None
    for plain, know in zip(capture_plain, capture_knowledge):
        plain, know = np.asarray(plain), np.asarray(know)
        if know.shape[0] != plain.shape[0] + k_len:
            raise AlignmentError(
                f"knowledge run length {know.shape[0]} != plain length {plain.shape[0]} + k_len {k_len}")
        shifted, defined = shift_right(plain, k_len)
        out.append(np.where(defined[:, None], know - shifted, 0).astype(know.dtype))
        mask = defined.copy()
        mask[k_len] = False
    return AlignedTarget(np.stack(out), mask, k_len)


@dataclass
class Batch:
    """Right-padded batch of rendered samples in both layouts."""

    kx_ids: np.ndarray       # (B, Tk) knowledge run
    plain_ids: np.ndarray    # (B, Tp) plain run
    k_lens: np.ndarray
    kx_lens: np.ndarray
    plain_lens: np.ndarray
    kx_target_mask: np.ndarray
    plain_target_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.k_lens)

    def inject_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Gather map taking encoder rows to plain-run rows (BOS and padding excluded)."""
        Tp = self.plain_ids.shape[1]
        j = np.arange(Tp)[None, :]
        index = j + self.k_lens[:, None]
        valid = (j >= 1) & (j < self.plain_lens[:, None])
        return index, valid


def collate(samples: list[Rendered]) -> Batch:
    B = len(samples)
    kx_lens = np.array([len(s.ids) for s in samples])
    plain_lens = np.array([s.x_len for s in samples])
    kx = np.full((B, kx_lens.max()), PAD, dtype=np.int64)
    pl = np.full((B, plain_lens.max()), PAD, dtype=np.int64)
    kx_tm = np.zeros(kx.shape, dtype=bool)
    pl_tm = np.zeros(pl.shape, dtype=bool)
    for i, s in enumerate(samples):
        kx[i, :kx_lens[i]] = s.ids
        pl[i, :plain_lens[i]] = s.plain_ids
        kx_tm[i, :kx_lens[i]] = target_mask(s.roles, s.ids)
        pl_tm[i, :plain_lens[i]] = target_mask(s.plain_roles, s.plain_ids)
    return Batch(kx, pl, np.array([s.k_len for s in samples]), kx_lens, plain_lens, kx_tm, pl_tm)


def encoder_deltas(bank: EncoderBank, subset, batch: Batch) -> dict[int, Tensor]:
    index, valid = batch.inject_index()
    out = {}
    for l in subset:
        enc = encoder_forward(bank, l, batch.kx_ids, key_valid=_key_valid(batch))
        if enc.shape[1] != batch.kx_ids.shape[1]:
            raise AlignmentError(
                f"encoder {l} output length {enc.shape[1]} != |K|+|x| = {batch.kx_ids.shape[1]}")
        with T.scope(f"encoder:{l}"):
            out[l] = T.gather_rows(enc, index, valid)
    return out


def _key_valid(batch: Batch) -> np.ndarray:
    return np.arange(batch.kx_ids.shape[1])[None, :] < batch.kx_lens[:, None]


def _check_subset(bank: EncoderBank, subset) -> tuple:
    subset = tuple(subset)
    missing = [l for l in subset if l not in bank.encoders]
    if missing:
        raise KeyError(f"layers {missing} have no encoder; bank has {bank.layers}")
    return subset


def injected_forward_batch(decoder: DecoderModel, bank: EncoderBank, subset, batch: Batch,
                           capture: bool = False, layer_only: int | None = None):
    """Decoder on the plain run with shifted encoder deltas added after each subset layer.

    Returns ``(logits, hidden)`` like :func:`decoder_forward`.
    """
    subset = _check_subset(bank, subset)
    if layer_only is not None:
        subset = (layer_only,)
    deltas = encoder_deltas(bank, subset, batch)
    return decoder_forward(decoder, batch.plain_ids, capture=capture, injections=deltas)


def injected_forward(decoder: DecoderModel, bank: EncoderBank, subset, tokens_k, tokens_x) -> Tensor:
    """Single-sample form: ``tokens_k`` is the rendered knowledge, ``tokens_x`` the rendered input
    (neither includes BOS). Returns logits over the ``1 + len(tokens_x)`` plain positions."""
    tokens_k = np.asarray(tokens_k, dtype=np.int64)
    tokens_x = np.asarray(tokens_x, dtype=np.int64)
    kx = np.concatenate([[BOS], tokens_k, tokens_x]).astype(np.int64)
    plain = np.concatenate([[BOS], tokens_x]).astype(np.int64)
    n = len(kx)
    batch = Batch(kx[None], plain[None], np.array([len(tokens_k)]), np.array([n]), np.array([len(plain)]),
                  np.zeros((1, n), bool), np.zeros((1, len(plain)), bool))
    logits, _ = injected_forward_batch(decoder, bank, subset, batch)
    return logits


def inject_exact(decoder: DecoderModel, plain_ids, layer: int, delta: np.ndarray):
    """Inject a fixed delta (plain-run coordinates) at a single layer; returns captured states."""
    d = Tensor(np.asarray(delta, dtype=decoder.embed.dtype)[None] if np.ndim(delta) == 2 else delta)
    return decoder_forward(decoder, plain_ids, capture=True, injections={layer: d})
