"""Desk-scale experiment configuration and the stage functions shared by the CLI and scripts."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .bench import flop_profile, grad_memory_profile, inference_tasks, synthetic_sample, timing_report
from .data import (KnowledgeSample, counterfact_edits, gen_counterfact_world, gen_kv_dataset,
                   gen_rules_dataset, load_edit_jsonl, load_jsonl, write_edit_jsonl, write_jsonl)
from .evaluate import MetricsReport, edit_metrics, fingerprint, icr_accuracy, perplexity
from .model import (Checkpoint, DecoderConfig, EncoderBank, EncoderConfig, MEMIT_LAYERS, init_bank,
                    init_decoder, load_checkpoint, save_checkpoint)
from .training import (CaptureCache, TrainConfig, capture_pass, edit, finetune, lm_sequences,
                       pretrain_bank, pretrain_decoder)

EDIT_STOP_LOSS = 0.05

log = logging.getLogger(__name__)


@dataclass
class DataConfig:
    kv_entities: int = 1500
    kv_distractors: int = 0
    corpus_kv_entities: int = 4000
    corpus_plain_fraction: float = 0.3
    cf_subjects: int = 60
    fact_repeats: int = 4
    n_edits: int = 20
    rules_train: int = 600
    rules_test: int = 300
    corpus_rules: int = 600


def _train(mode: str, **kw) -> TrainConfig:
    return TrainConfig(mode=mode, **kw)


@dataclass
class PipelineConfig:
    seed: int = 0
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(max_context=512))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    decoder_train: TrainConfig = field(default_factory=lambda: _train(
        "decoder", lr_start=3e-4, lr_peak=3e-3, lr_end=3e-4, warmup_steps=100, max_steps=1500,
        batch_size=16, weight_decay=0.0))
    pretrain: TrainConfig = field(default_factory=lambda: _train(
        "pretrain", lr_start=1e-4, lr_peak=3e-3, lr_end=1e-4, warmup_steps=100, max_steps=2000,
        batch_size=16, patience=300))
    finetune: TrainConfig = field(default_factory=lambda: _train(
        "finetune", lr_start=1e-4, lr_peak=1e-3, lr_end=1e-4, warmup_steps=50, max_steps=400,
        batch_size=16, eval_every=50))
    edit: TrainConfig = field(default_factory=lambda: _train(
        "edit", lr_start=1e-4, lr_peak=3e-3, lr_end=1e-4, warmup_steps=20, max_steps=600,
        batch_size=20, eval_every=25))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


def to_dict(obj) -> dict:
    d = asdict(obj)
    return json.loads(json.dumps(d))


def _merge(dc, values: dict, where: str):
    names = {f.name: f for f in fields(dc)}
    for k, v in values.items():
        if k not in names:
            raise ValueError(f"unknown config key {where}.{k}")
        cur = getattr(dc, k)
        if is_dataclass(cur):
            if not isinstance(v, dict):
                raise ValueError(f"config section {where}.{k} must be a table")
            _merge(cur, v, f"{where}.{k}")
        else:
            setattr(dc, k, tuple(v) if isinstance(v, list) else v)
    if hasattr(dc, "__post_init__"):
        dc.__post_init__()
    return dc


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the TOML file, then ``overrides`` (same nesting)."""
    cfg = PipelineConfig()
    if path is not None:
        with open(path, "rb") as fh:
            _merge(cfg, tomllib.load(fh), "config")
    if overrides:
        _merge(cfg, overrides, "override")
    return cfg


def parse_layers(spec: str, n_layers: int, divergent=()) -> tuple:
    """``"3-8"``, ``"3,5,7"``, ``"memit"``, ``"all"`` or ``"conv"`` (all minus ``divergent``)."""
    spec = spec.strip()
    if spec == "all":
        return tuple(range(n_layers))
    if spec == "memit":
        return MEMIT_LAYERS
    if spec == "conv":
        return tuple(l for l in range(n_layers) if l not in set(divergent))
    out: set[int] = set()
    for part in spec.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            lo, hi = int(a), int(b)
            if lo > hi:
                raise ValueError(f"empty layer range {part!r}")
            out.update(range(lo, hi + 1))
        else:
            out.add(int(part))
    bad = sorted(l for l in out if not 0 <= l < n_layers)
    if bad:
        raise ValueError(f"layers {bad} outside 0..{n_layers - 1}")
    return tuple(sorted(out))


@dataclass
class Datasets:
    kv_train: list
    kv_val: list
    kv_test: list
    corpus: list
    edits: list
    cf_facts: list
    rules_train: list
    rules_test: list


def make_datasets(cfg: PipelineConfig) -> Datasets:
    """Every synthetic split used by the pipeline, deterministic in ``cfg.seed``."""
    d, s = cfg.data, cfg.seed
    kv_train, kv_val, kv_test = gen_kv_dataset(d.kv_entities, d.kv_distractors, s)
    # decoder corpus keys come from an independent draw; overlap with eval keys is harmless
    # because values are re-drawn per sample
    corpus_kv = gen_kv_dataset(d.corpus_kv_entities, d.kv_distractors, s + 1, split=(1.0, 0.0, 0.0))[0]
    world = gen_counterfact_world(d.cf_subjects, s)
    edits = counterfact_edits(world, d.n_edits, s)
    facts = world.fact_samples()
    rules = gen_rules_dataset(d.rules_train + d.rules_test, s)
    corpus_rules = gen_rules_dataset(d.corpus_rules, s + 1)
    corpus: list[KnowledgeSample] = corpus_kv + facts * d.fact_repeats + corpus_rules
    return Datasets(kv_train, kv_val, kv_test, corpus, edits, facts,
                    rules[:d.rules_train], rules[d.rules_train:])


# ---------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------

class SubsetMismatch(ValueError):
    pass


def blob_hash(path) -> str:
    """Content hash in git's blob format, so ``git hash-object`` agrees."""
    raw = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def _tree_hash(path) -> str:
    p = Path(path)
    if p.is_file():
        return blob_hash(p)
    h = hashlib.sha1()
    for f in sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"):
        h.update(f"{f.relative_to(p).as_posix()} {blob_hash(f)}\n".encode())
    return h.hexdigest()


def write_stage_manifest(out_dir, stage: str, cfg: PipelineConfig, inputs: dict, outputs, extra=None) -> dict:
    """JSON manifest: stage, full config, seed, content hashes of every input and output."""
    out_dir = Path(out_dir)
    manifest = {
        "stage": stage,
        "seed": cfg.seed,
        "config": to_dict(cfg),
        "inputs": {k: {"path": str(v), "hash": _tree_hash(v)} for k, v in sorted(inputs.items())},
        "outputs": {name: _tree_hash(out_dir / name) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------
# stages (file in, file out)
# ---------------------------------------------------------------------

DATA_FILES = ("kv_train", "kv_val", "kv_test", "corpus", "rules_train", "rules_test", "edits")


def _seeded(tc: TrainConfig, cfg: PipelineConfig, **kw) -> TrainConfig:
    return replace(tc, seed=cfg.seed, **kw)


def stage_gen_data(cfg: PipelineConfig, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_datasets(cfg)
    for name in DATA_FILES:
        if name == "edits":
            write_edit_jsonl(out / "edits.jsonl", ds.edits)
        else:
            write_jsonl(out / f"{name}.jsonl", getattr(ds, name))
    return write_stage_manifest(out, "gen-data", cfg, {}, [f"{n}.jsonl" for n in DATA_FILES])


def _load_samples(path) -> list:
    rep = load_jsonl(path, strict=True)
    return rep.samples


def stage_pretrain_decoder(cfg: PipelineConfig, data_dir, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = Path(data_dir) / "corpus.jsonl"
    decoder = init_decoder(cfg.decoder, cfg.seed)
    seqs = lm_sequences(_load_samples(corpus_path), cfg.data.corpus_plain_fraction, cfg.seed,
                        cfg.decoder.max_context, targets_only=True)
    tlog = pretrain_decoder(decoder, seqs, _seeded(cfg.decoder_train, cfg))
    save_checkpoint(out / "decoder.ckpt", decoder, meta={"stage": "pretrain-decoder"})
    tlog.write_jsonl(out / "log.jsonl", "w")
    return write_stage_manifest(out, "pretrain-decoder", cfg, {"corpus": corpus_path},
                                ["decoder.ckpt", "log.jsonl"], {"decoder_hash": decoder.param_hash()})


def stage_capture(cfg: PipelineConfig, checkpoint, data_file, layers, out) -> dict:
    out = Path(out)
    ck = load_checkpoint(checkpoint)
    cache = capture_pass(ck.decoder, _load_samples(data_file), layers=layers)
    cache.save(out)
    return write_stage_manifest(out, "capture", cfg, {"checkpoint": checkpoint, "data": data_file},
                                [f"layer_{l:02d}.f32" for l in layers] + ["index.jsonl"],
                                {"layers": list(layers), "skipped": cache.skipped})


def divergent_layers(log_path) -> list[int]:
    """Layers whose end event in a pretrain log carries ``diverged: true``."""
    out = []
    for line in Path(log_path).read_text().splitlines():
        e = json.loads(line)
        if e.get("event") == "end" and e.get("diverged") and e["job"].startswith("pretrain:"):
            out.append(int(e["job"].split(":")[1]))
    return sorted(out)


def check_subset(bank_layers, requested) -> None:
    if tuple(sorted(bank_layers)) != tuple(sorted(requested)):
        raise SubsetMismatch(f"--layers selects {sorted(requested)} but the checkpoint's encoders cover "
                             f"{sorted(bank_layers)}")


def stage_pretrain(cfg: PipelineConfig, checkpoint, cache_dir, layers, out, jobs: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    cache = CaptureCache.load(cache_dir, layers)
    bank = init_bank(ck.decoder, replace(cfg.encoder, layer_subset=tuple(layers)), cfg.seed)
    logs = pretrain_bank(bank, layers, cache, _seeded(cfg.pretrain, cfg, layers=tuple(layers)), jobs, cache_dir)
    (out / "log.jsonl").write_text("")
    for l in layers:
        logs[l].write_jsonl(out / "log.jsonl")
    divergent = sorted(l for l, t in logs.items() if t.diverged)
    save_checkpoint(out / "bank.ckpt", ck.decoder, bank, meta={"stage": "pretrain", "divergent": divergent})
    summary = {str(l): {"baseline": t.baseline, "final_loss": t.final_loss, "diverged": t.diverged}
               for l, t in logs.items()}
    return write_stage_manifest(out, "pretrain", cfg, {"checkpoint": checkpoint, "cache": cache_dir},
                                ["bank.ckpt", "log.jsonl"], {"layers": list(layers), "encoders": summary})


def _bank_for(ck: Checkpoint, cfg: PipelineConfig, layers, fresh: bool) -> EncoderBank:
    if fresh:
        return init_bank(ck.decoder, replace(cfg.encoder, layer_subset=tuple(layers)), cfg.seed)
    if ck.bank is None:
        raise SubsetMismatch(f"--layers selects {sorted(layers)} but the checkpoint has no encoders")
    check_subset(ck.bank.layers, layers)
    return ck.bank


def stage_finetune(cfg: PipelineConfig, checkpoint, data_dir, layers, out, no_pretrain: bool = False) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    bank = _bank_for(ck, cfg, layers, no_pretrain)
    train_p, val_p = Path(data_dir) / "kv_train.jsonl", Path(data_dir) / "kv_val.jsonl"
    tlog = finetune(ck.decoder, bank, layers, _load_samples(train_p), _seeded(cfg.finetune, cfg),
                    val=_load_samples(val_p))
    save_checkpoint(out / "bank.ckpt", ck.decoder, bank, meta={"stage": "finetune", "pretrained": not no_pretrain})
    tlog.write_jsonl(out / "log.jsonl", "w")
    return write_stage_manifest(out, "finetune", cfg, {"checkpoint": checkpoint, "train": train_p, "val": val_p},
                                ["bank.ckpt", "log.jsonl"],
                                {"layers": list(layers), "no_pretrain": no_pretrain, "final_loss": tlog.final_loss,
                                 "val": tlog.val})


def stage_edit(cfg: PipelineConfig, checkpoint, edits_file, layers, out, no_pretrain: bool = False) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    bank = _bank_for(ck, cfg, layers, no_pretrain)
    edits = load_edit_jsonl(edits_file)
    pre = edit_metrics(ck.decoder, None, (), edits)
    tlog = edit(ck.decoder, bank, layers, edits, _seeded(cfg.edit, cfg), stop_loss=EDIT_STOP_LOSS)
    post = edit_metrics(ck.decoder, bank, layers, edits)
    report = MetricsReport(fingerprint=fingerprint(ck.decoder, bank, layers))
    report.add_edit("pre", pre)
    report.add_edit("post", post)
    report.counts = {"edits": len(edits), "train_ce": tlog.final_loss}
    save_checkpoint(out / "bank.ckpt", ck.decoder, bank, meta={"stage": "edit"})
    tlog.write_jsonl(out / "log.jsonl", "w")
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.to_table() + "\n")
    return write_stage_manifest(out, "edit", cfg, {"checkpoint": checkpoint, "edits": edits_file},
                                ["bank.ckpt", "log.jsonl", "metrics.json", "metrics.txt"], {"layers": list(layers)})


def evaluate_all(decoder, bank, layers, data: dict, modes) -> MetricsReport:
    """Perplexity on kv splits, rule accuracy, and edit metrics, for each requested mode."""
    report = MetricsReport(fingerprint=fingerprint(decoder, bank, layers if bank is not None else ()))
    for mode in modes:
        sub = layers if mode == "injected" else ()
        for name in ("kv_test", "rules_test"):
            if name in data:
                report.perplexity.setdefault(name, {})[mode] = perplexity(decoder, bank, sub, data[name], mode)
        if "rules_test" in data:
            report.accuracy.setdefault("rules_test", {})[mode] = icr_accuracy(decoder, bank, sub, data["rules_test"], mode)
    if "edits" in data:
        report.add_edit("plain", edit_metrics(decoder, None, (), data["edits"]))
        if "injected" in modes and bank is not None:
            report.add_edit("injected", edit_metrics(decoder, bank, layers, data["edits"]))
    report.counts = {k: len(v) for k, v in data.items()}
    return report


def stage_eval(cfg: PipelineConfig, checkpoint, data_dir, layers, modes, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    bank = None
    if "injected" in modes:
        bank = _bank_for(ck, cfg, layers, fresh=False)
    paths = {n: Path(data_dir) / f"{n}.jsonl" for n in ("kv_test", "rules_test", "edits")}
    paths = {n: p for n, p in paths.items() if p.exists()}
    data = {n: (load_edit_jsonl(p) if n == "edits" else _load_samples(p)) for n, p in paths.items()}
    report = evaluate_all(ck.decoder, bank, layers, data, modes)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "metrics.txt").write_text(report.to_table() + "\n")
    return write_stage_manifest(out, "eval", cfg, {"checkpoint": checkpoint, **paths}, ["metrics.json", "metrics.txt"],
                                {"layers": list(layers), "modes": list(modes)})


BENCH_K_LENS = (64, 128, 256)
BENCH_X_LEN = 32


def stage_bench(cfg: PipelineConfig, checkpoint, layers, out, repetitions: int = 5) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ck = load_checkpoint(checkpoint)
    bank = ck.bank if ck.bank is not None else init_bank(ck.decoder, replace(cfg.encoder, layer_subset=tuple(layers)),
                                                         cfg.seed)
    check_subset(bank.layers, layers)
    files = []
    for mode in ("plain", "concat", "injected"):
        t = flop_profile(ck.decoder, bank, layers, mode, BENCH_K_LENS, BENCH_X_LEN)
        (out / f"flops_{mode}.json").write_text(t.to_json() + "\n")
        (out / f"flops_{mode}.csv").write_text(t.to_csv())
        files += [f"flops_{mode}.json", f"flops_{mode}.csv"]
    samples = [synthetic_sample(BENCH_K_LENS[0], BENCH_X_LEN, seed=i) for i in range(4)]
    mem = grad_memory_profile(ck.decoder, bank, layers, samples)
    (out / "memory.json").write_text(mem.to_json() + "\n")
    files.append("memory.json")
    tasks = {}
    for k in BENCH_K_LENS:
        tasks.update(inference_tasks(ck.decoder, bank, layers, k, BENCH_X_LEN))
    # wall-clock is reported, never hashed: it is not reproducible
    timing = timing_report(tasks, repetitions)
    (out / "timing.txt").write_text(timing.to_text() + "\n")
    return write_stage_manifest(out, "bench", cfg, {"checkpoint": checkpoint}, files, {"layers": list(layers)})
