#!/usr/bin/env python3
"""Run every CLI stage on the desk config, in order, under one output root.

    python3 scripts/run_desk_pipeline.py runs/desk [--config cfg.toml] [--seed 0]
"""
import argparse
import sys
import time
from pathlib import Path

from kinject.cli import dispatch


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", type=Path)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    r = a.root
    c = (["--config", str(a.config)] if a.config else []) + ["--seed", str(a.seed)]
    plan = [
        ["gen-data", "--out", r / "data"],
        ["pretrain-decoder", "--data", r / "data", "--out", r / "decoder"],
        ["capture", "--checkpoint", r / "decoder/decoder.ckpt", "--data-file", r / "data/kv_train.jsonl",
         "--out", r / "cache"],
        ["pretrain", "--checkpoint", r / "decoder/decoder.ckpt", "--cache", r / "cache", "--out", r / "pretrain"],
        ["finetune", "--checkpoint", r / "pretrain/bank.ckpt", "--data", r / "data", "--out", r / "finetune"],
        ["finetune", "--checkpoint", r / "decoder/decoder.ckpt", "--data", r / "data", "--no-pretrain",
         "--out", r / "finetune-scratch"],
        ["edit", "--checkpoint", r / "pretrain/bank.ckpt", "--edits", r / "data/edits.jsonl", "--out", r / "edit"],
        ["eval", "--checkpoint", r / "finetune/bank.ckpt", "--data", r / "data", "--out", r / "eval"],
        ["bench", "--checkpoint", r / "finetune/bank.ckpt", "--out", r / "bench"],
    ]
    for step in plan:
        argv = [step[0], *c, *map(str, step[1:])]
        t0 = time.perf_counter()
        code = dispatch(argv)
        print(f"# {step[0]}: exit {code} in {time.perf_counter() - t0:.0f}s", file=sys.stderr)
        if code:
            return code
    print((r / "eval/metrics.txt").read_text())
    print((r / "edit/metrics.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
