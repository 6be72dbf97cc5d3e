"""Frozen decoder-only transformer and the bank of per-layer knowledge encoders."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import VOCAB_SIZE
from .tensor import Tensor

MEMIT_LAYERS = (3, 4, 5, 6, 7, 8)


class ConfigError(ValueError):
    pass


class OverlongSequence(ValueError):
    pass


class FrozenDecoderViolated(RuntimeError):
    pass


@dataclass
class DecoderConfig:
    n_layers: int = 9
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    vocab_size: int = VOCAB_SIZE
    max_context: int = 256
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    d_enc: int = 32
    n_heads_enc: int = 2
    d_mlp_enc: int | None = None
    layer_subset: tuple = MEMIT_LAYERS
    causal: bool = True

    def __post_init__(self):
        self.layer_subset = tuple(sorted(int(l) for l in self.layer_subset))
        if len(set(self.layer_subset)) != len(self.layer_subset):
            raise ConfigError(f"duplicate layers in subset {self.layer_subset}")
        if self.d_enc % self.n_heads_enc:
            raise ConfigError(f"d_enc {self.d_enc} not divisible by n_heads_enc {self.n_heads_enc}")

    @property
    def mlp_width(self) -> int:
        """``d_mlp_enc`` when set, else 4 * d_enc."""
        return self.d_mlp_enc or 4 * self.d_enc


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(size=shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def _block_params(rng, prefix: str, d: int, d_mlp: int, dtype, std=0.02, out_std=None) -> dict:
    out_std = std if out_std is None else out_std
    return {
        f"{prefix}.attn_norm": np.ones(d, dtype=dtype),
        f"{prefix}.wq": _trunc_normal(rng, (d, d), std, dtype),
        f"{prefix}.wk": _trunc_normal(rng, (d, d), std, dtype),
        f"{prefix}.wv": _trunc_normal(rng, (d, d), std, dtype),
        f"{prefix}.wo": _trunc_normal(rng, (d, d), out_std, dtype),
        f"{prefix}.mlp_norm": np.ones(d, dtype=dtype),
        f"{prefix}.w_gate": _trunc_normal(rng, (d, d_mlp), std, dtype),
        f"{prefix}.w_up": _trunc_normal(rng, (d, d_mlp), std, dtype),
        f"{prefix}.w_down": _trunc_normal(rng, (d_mlp, d), out_std, dtype),
    }


def _block_forward(p: dict, prefix: str, h: Tensor, n_heads: int, cos, sin,
                   causal: bool = True, key_valid=None) -> Tensor:
    x = T.rms_norm(h, p[f"{prefix}.attn_norm"])
    q = T.rotary(T.split_heads(T.matmul(x, p[f"{prefix}.wq"]), n_heads), cos, sin)
    k = T.rotary(T.split_heads(T.matmul(x, p[f"{prefix}.wk"]), n_heads), cos, sin)
    v = T.split_heads(T.matmul(x, p[f"{prefix}.wv"]), n_heads)
    a = T.causal_attention(q, k, v, causal=causal, key_valid=key_valid)
    h = T.add(h, T.matmul(T.merge_heads(a), p[f"{prefix}.wo"]))
    x = T.rms_norm(h, p[f"{prefix}.mlp_norm"])
    return T.add(h, T.gated_mlp(x, p[f"{prefix}.w_gate"], p[f"{prefix}.w_up"], p[f"{prefix}.w_down"]))


class DecoderModel:
    def __init__(self, cfg: DecoderConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @property
    def embed(self) -> Tensor:
        return self.params["embed"]

    def freeze(self) -> "DecoderModel":
        for p in self.params.values():
            p._drop_grad()
            p.requires_grad = False
        return self

    def unfreeze(self) -> list[Tensor]:
        for p in self.params.values():
            p.requires_grad = True
        return list(self.params.values())

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def param_hash(self) -> str:
        return params_hash({k: v.data for k, v in self.params.items()})


class Encoder:
    def __init__(self, layer: int, cfg: EncoderConfig, params: dict[str, Tensor]):
        self.layer = layer
        self.cfg = cfg
        self.params = params

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


class EncoderBank:
    def __init__(self, cfg: EncoderConfig, embed: Tensor, encoders: dict[int, Encoder], d_model: int,
                 rope_base: float = 10000.0):
        self.cfg = cfg
        self.embed = embed
        self.encoders = encoders
        self.d_model = d_model
        self.rope_base = rope_base

    @property
    def layers(self) -> tuple:
        return tuple(sorted(self.encoders))

    def __getitem__(self, layer: int) -> Encoder:
        try:
            return self.encoders[layer]
        except KeyError:
            raise KeyError(f"no encoder for decoder layer {layer}; bank has {self.layers}") from None

    def parameters(self, layers=None) -> list[Tensor]:
        out = []
        for l in (self.layers if layers is None else layers):
            out.extend(self[l].parameters())
        return out

    def subset(self, layers) -> "EncoderBank":
        return EncoderBank(self.cfg, self.embed, {l: self[l] for l in layers}, self.d_model, self.rope_base)


def params_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def init_decoder(cfg: DecoderConfig, seed: int, dtype=None) -> DecoderModel:
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng([seed, 0xDEC])
    arrays = {"embed": _trunc_normal(rng, (cfg.vocab_size, cfg.d_model), 0.02, dtype)}
    out_std = 0.02 / np.sqrt(2 * cfg.n_layers)
    for l in range(cfg.n_layers):
        arrays.update(_block_params(rng, f"block{l}", cfg.d_model, cfg.d_mlp, dtype, out_std=out_std))
    arrays["final_norm"] = np.ones(cfg.d_model, dtype=dtype)
    with T.scope("decoder"):
        params = {k: Tensor(v, name=k) for k, v in arrays.items()}
    return DecoderModel(cfg, params)


def init_encoder(layer: int, dcfg: DecoderConfig, ecfg: EncoderConfig, seed: int, dtype=None) -> Encoder:
    """Encoder for one decoder layer; initialisation depends only on (seed, layer)."""
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng([seed, 0xE4C, layer])
    arrays = {"down": _trunc_normal(rng, (dcfg.d_model, ecfg.d_enc), 0.02, dtype)}
    for b in range(ecfg.n_blocks):
        arrays.update(_block_params(rng, f"block{b}", ecfg.d_enc, ecfg.mlp_width, dtype))
    arrays["final_norm"] = np.ones(ecfg.d_enc, dtype=dtype)
    arrays["up"] = np.zeros((ecfg.d_enc, dcfg.d_model), dtype=dtype)
    with T.scope(f"encoder:{layer}"):
        params = {k: Tensor(v, requires_grad=True, name=f"encoder{layer}.{k}") for k, v in arrays.items()}
    return Encoder(layer, ecfg, params)


def init_bank(decoder: DecoderModel, ecfg: EncoderConfig, seed: int) -> EncoderBank:
    bad = [l for l in ecfg.layer_subset if not 0 <= l < decoder.cfg.n_layers]
    if bad:
        raise ConfigError(f"layers {bad} outside decoder range 0..{decoder.cfg.n_layers - 1}")
    dtype = decoder.embed.dtype
    encs = {l: init_encoder(l, decoder.cfg, ecfg, seed, dtype) for l in ecfg.layer_subset}
    return EncoderBank(ecfg, decoder.embed, encs, decoder.cfg.d_model, decoder.cfg.rope_base)


def init_models(dcfg: DecoderConfig, ecfg: EncoderConfig, seed: int, dtype=None):
    decoder = init_decoder(dcfg, seed, dtype).freeze()
    return decoder, init_bank(decoder, ecfg, seed)


def encoder_param_count(d_model: int, d_enc: int, n_blocks: int = 4, d_mlp_enc: int | None = None) -> int:
    d_mlp_enc = d_mlp_enc or 4 * d_enc
    per_block = 4 * d_enc * d_enc + 3 * d_enc * d_mlp_enc + 2 * d_enc
    return 2 * d_model * d_enc + n_blocks * per_block + d_enc


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens[None, :] if tokens.ndim == 1 else tokens


def decoder_forward(model: DecoderModel, tokens, capture: bool = False,
                    injections: dict[int, Tensor] | None = None, stop_after: int | None = None):
    """Run the decoder on (B, T) or (T,) token ids.

    Returns ``(logits, hidden)`` where ``hidden[l]`` is the residual stream leaving block
    ``l`` (after any injection at ``l``) when ``capture`` is set, else ``None``.
    """
    cfg = model.cfg
    tokens = _as_batch(tokens)
    B, L = tokens.shape
    if L > cfg.max_context:
        raise OverlongSequence(f"sequence length {L} exceeds max_context {cfg.max_context}")
    injections = injections or {}
    p = model.params
    hidden = [] if capture else None
    with T.scope("decoder"):
        cos, sin = T.rotary_tables(L, cfg.d_model // cfg.n_heads, cfg.rope_base, dtype=model.embed.dtype)
        h = T.embedding(p["embed"], tokens)
        for l in range(cfg.n_layers):
            with T.scope(f"decoder:{l}"):
                h = _block_forward(p, f"block{l}", h, cfg.n_heads, cos, sin)
                if l in injections:
                    delta = injections[l]
                    if delta.shape != h.shape:
                        raise T.ShapeError(f"injection at layer {l}: delta {delta.shape} vs hidden {h.shape}")
                    with T.scope(f"encoder:{l}"):  # injection cost belongs to the encoder
                        h = T.add(h, delta)
            if capture:
                hidden.append(h)
            if stop_after is not None and l == stop_after:
                return None, hidden
        h = T.rms_norm(h, p["final_norm"])
        logits = T.matmul(h, T.transpose(p["embed"], (1, 0)))
    return logits, hidden


def encoder_forward(bank: EncoderBank, layer: int, tokens_kx, key_valid=None) -> Tensor:
    """Per-position deltas in decoder hidden space for the rendered knowledge+input sequence."""
    enc = bank[layer]
    cfg = enc.cfg
    tokens = _as_batch(tokens_kx)
    L = tokens.shape[1]
    p = enc.params
    with T.scope(f"encoder:{layer}"):
        dh = cfg.d_enc // cfg.n_heads_enc
        cos, sin = T.rotary_tables(L, dh, bank.rope_base, dtype=bank.embed.dtype)
        h = T.matmul(T.embedding(bank.embed, tokens), p["down"])
        for b in range(cfg.n_blocks):
            h = _block_forward(p, f"block{b}", h, cfg.n_heads_enc, cos, sin,
                               causal=cfg.causal, key_valid=key_valid)
        h = T.rms_norm(h, p["final_norm"])
        return T.matmul(h, p["up"])


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

MAGIC = b"KINJCKPT"
VERSION = 1


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, decoder: DecoderModel, bank: EncoderBank | None = None,
                    optimizer_state: dict | None = None, meta: dict | None = None) -> None:
    """Write config + manifest header followed by little-endian raw payloads.

    ``optimizer_state`` maps a name to ``AdamState``-like objects (step, m, v lists)
    aligned with the corresponding encoder's ``parameters()``.
    """
    arrays: dict[str, np.ndarray] = {f"decoder/{k}": v.data for k, v in decoder.params.items()}
    if bank is not None:
        for l in bank.layers:
            for k, v in bank[l].params.items():
                arrays[f"encoder/{l}/{k}"] = v.data
    opt_steps = {}
    for name, st in (optimizer_state or {}).items():
        opt_steps[name] = st.step
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays[f"optim/{name}/m/{i:04d}"] = m
            arrays[f"optim/{name}/v/{i:04d}"] = v
    manifest = []
    offset = 0
    for name in sorted(arrays):
        a = _le(arrays[name])
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                         "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = {
        "version": VERSION,
        "decoder_config": asdict(decoder.cfg),
        "encoder_config": asdict(bank.cfg) if bank is not None else None,
        "bank_layers": list(bank.layers) if bank is not None else [],
        "decoder_hash": decoder.param_hash(),
        "optimizer_steps": opt_steps,
        "meta": meta or {},
        "manifest": manifest,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hb)))
        fh.write(hb)
        for entry in manifest:
            fh.write(_le(arrays[entry["name"]]).tobytes())


@dataclass
class Checkpoint:
    decoder: DecoderModel
    bank: EncoderBank | None
    optimizer_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        _, hlen = struct.unpack("<IQ", fh.read(12))
        return json.loads(fh.read(hlen))


def load_checkpoint(path) -> Checkpoint:
    from .optim import AdamState

    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    _, hlen = struct.unpack("<IQ", raw[len(MAGIC):len(MAGIC) + 12])
    start = len(MAGIC) + 12
    header = json.loads(raw[start:start + hlen])
    base = start + hlen
    arrays = {}
    for e in header["manifest"]:
        a = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=base + e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(a.dtype.newbyteorder("="))
    dcfg = DecoderConfig(**header["decoder_config"])
    dec_arrays = {k[len("decoder/"):]: v for k, v in arrays.items() if k.startswith("decoder/")}
    if params_hash(dec_arrays) != header["decoder_hash"]:
        raise FrozenDecoderViolated(f"{path}: frozen decoder violated (parameter hash mismatch)")
    with T.scope("decoder"):
        decoder = DecoderModel(dcfg, {k: Tensor(v, name=k) for k, v in dec_arrays.items()})
    bank = None
    if header["encoder_config"] is not None:
        ecfg = EncoderConfig(**header["encoder_config"])
        encs = {}
        for l in header["bank_layers"]:
            pre = f"encoder/{l}/"
            with T.scope(f"encoder:{l}"):
                params = {k[len(pre):]: Tensor(v, requires_grad=True, name=f"encoder{l}.{k[len(pre):]}")
                          for k, v in arrays.items() if k.startswith(pre)}
            encs[l] = Encoder(l, ecfg, params)
        bank = EncoderBank(ecfg, decoder.embed, encs, dcfg.d_model, dcfg.rope_base)
    opt = {}
    for name, step in header["optimizer_steps"].items():
        pre = f"optim/{name}/"
        ms = [arrays[k] for k in sorted(arrays) if k.startswith(pre + "m/")]
        vs = [arrays[k] for k in sorted(arrays) if k.startswith(pre + "v/")]
        opt[name] = AdamState(step=step, m=ms, v=vs)
    return Checkpoint(decoder, bank, opt, header["meta"])
