#!/usr/bin/env python3
"""Held-out kv perplexity after fine-tuning encoders on different injection subsets.

Uses a decoder checkpoint from the pretrain-decoder stage; every subset starts from
fresh encoders and gets the same fine-tuning budget.

    python3 scripts/layer_subsets.py runs/desk/decoder/decoder.ckpt memit all 0-2 [--steps 200]
"""
import argparse
from dataclasses import replace

from kinject.evaluate import perplexity
from kinject.model import init_bank, load_checkpoint
from kinject.pipeline import load_config, make_datasets, parse_layers
from kinject.training import finetune


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("checkpoint")
    ap.add_argument("subsets", nargs="+")
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int, default=200)
    a = ap.parse_args()
    cfg = load_config(a.config)
    ds = make_datasets(cfg)
    decoder = load_checkpoint(a.checkpoint).decoder
    print(f"plain: {perplexity(decoder, None, (), ds.kv_test, 'plain'):.3f}")
    for spec in a.subsets:
        layers = parse_layers(spec, cfg.decoder.n_layers)
        bank = init_bank(decoder, replace(cfg.encoder, layer_subset=layers), cfg.seed)
        finetune(decoder, bank, layers, ds.kv_train, replace(cfg.finetune, max_steps=a.steps, seed=cfg.seed))
        print(f"{spec} {list(layers)}: {perplexity(decoder, bank, layers, ds.kv_test, 'injected'):.3f}")


if __name__ == "__main__":
    main()
