"""Command-line driver: ``kinject <stage> [flags]``. Exit 0 ok, 1 usage error, 2 runtime failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .model import read_checkpoint_header

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


STAGES = ("gen-data", "pretrain-decoder", "capture", "pretrain", "finetune", "edit", "eval", "bench")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--layers", help='"3-8", "3,5,7", "all", "memit" or "conv"; default: config subset')
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--pretrain-log", type=Path, help='pretrain log.jsonl used to resolve --layers conv')
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="kinject", description=__doc__)
    sub = parser.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic datasets")
    p = sub.add_parser("pretrain-decoder", parents=[common], help="train the small frozen decoder")
    p.add_argument("--data", type=Path, required=True)
    p = sub.add_parser("capture", parents=[common], help="record hidden-state difference targets")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-file", type=Path, required=True)
    p = sub.add_parser("pretrain", parents=[common], help="regress encoders onto captured targets")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)
    for name, hlp in (("finetune", "train encoders through the frozen decoder"),
                      ("edit", "fit encoders to counterfactual objects")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data" if name == "finetune" else "--edits", type=Path, required=True)
        p.add_argument("--no-pretrain", action="store_true", help="start from freshly initialised encoders")
    p = sub.add_parser("eval", parents=[common], help="perplexity, rule accuracy, edit metrics")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", choices=("plain", "concat", "injected", "all"), default="all")
    p = sub.add_parser("bench", parents=[common], help="FLOP, gradient-memory and timing tables")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--repetitions", type=int, default=5)
    return parser


def _divergent(args) -> list[int]:
    if args.pretrain_log is not None:
        return P.divergent_layers(args.pretrain_log)
    ck = getattr(args, "checkpoint", None)
    if ck is not None:
        meta = read_checkpoint_header(ck)["meta"]
        if "divergent" in meta:
            return meta["divergent"]
    raise UsageError("--layers conv needs --pretrain-log or a checkpoint written by the pretrain stage")


def resolve(args) -> tuple[P.PipelineConfig, tuple]:
    overrides = {"seed": args.seed} if args.seed is not None else None
    cfg = P.load_config(args.config, overrides)
    if args.layers is None:
        return cfg, cfg.encoder.layer_subset
    divergent = _divergent(args) if args.layers.strip() == "conv" else ()
    try:
        layers = P.parse_layers(args.layers, cfg.decoder.n_layers, divergent)
    except ValueError as exc:
        raise UsageError(f"--layers {args.layers!r}: {exc}") from exc
    if not layers:
        raise UsageError(f"--layers {args.layers!r} selects no layers")
    return cfg, layers


def run(args) -> dict:
    cfg, layers = resolve(args)
    s = args.stage
    if s == "gen-data":
        return P.stage_gen_data(cfg, args.out)
    if s == "pretrain-decoder":
        return P.stage_pretrain_decoder(cfg, args.data, args.out)
    if s == "capture":
        return P.stage_capture(cfg, args.checkpoint, args.data_file, layers, args.out)
    if s == "pretrain":
        return P.stage_pretrain(cfg, args.checkpoint, args.cache, layers, args.out, args.jobs)
    if s == "finetune":
        return P.stage_finetune(cfg, args.checkpoint, args.data, layers, args.out, args.no_pretrain)
    if s == "edit":
        return P.stage_edit(cfg, args.checkpoint, args.edits, layers, args.out, args.no_pretrain)
    if s == "eval":
        modes = ("plain", "concat", "injected") if args.mode == "all" else (args.mode,)
        return P.stage_eval(cfg, args.checkpoint, args.data, layers, modes, args.out)
    return P.stage_bench(cfg, args.checkpoint, layers, args.out, args.repetitions)


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        manifest = run(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # every runtime failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"stage": manifest["stage"], "outputs": manifest["outputs"]}, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
