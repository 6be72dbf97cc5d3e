#!/usr/bin/env python3
"""Validation curves of fine-tuning from pretrained vs freshly initialised encoders.

Reads the log.jsonl files of two finetune stage outputs and prints them side by side,
with the first step at which each arm reaches the scratch arm's final validation loss.

    python3 scripts/ablation_pretraining.py runs/desk/finetune runs/desk/finetune-scratch
"""
import json
import sys
from pathlib import Path


def val_curve(stage_dir: Path) -> dict[int, float]:
    out = {}
    for line in (stage_dir / "log.jsonl").read_text().splitlines():
        e = json.loads(line)
        if "val_loss" in e:
            out[e["step"]] = e["val_loss"]
    return out


def main(pre_dir: str, scratch_dir: str) -> None:
    pre, scratch = val_curve(Path(pre_dir)), val_curve(Path(scratch_dir))
    level = scratch[max(scratch)]
    print(f"{'step':>6} {'pretrained':>11} {'scratch':>9}")
    for s in sorted(set(pre) | set(scratch)):
        print(f"{s:>6} {pre.get(s, float('nan')):>11.4f} {scratch.get(s, float('nan')):>9.4f}")
    for name, curve in (("pretrained", pre), ("scratch", scratch)):
        hit = next((s for s in sorted(curve) if curve[s] <= level), None)
        print(f"{name}: reaches {level:.4f} at step {hit}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])
