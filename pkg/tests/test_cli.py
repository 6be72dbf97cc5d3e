import json

import pytest

from kinject.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, dispatch
from kinject.model import load_checkpoint
from kinject.pipeline import blob_hash, load_config, parse_layers

TINY_TOML = """
seed = 0
[decoder]
n_layers = 3
d_model = 16
n_heads = 2
d_mlp = 32
max_context = 256
[encoder]
n_blocks = 1
d_enc = 8
n_heads_enc = 2
layer_subset = [1, 2]
[data]
kv_entities = 40
corpus_kv_entities = 40
cf_subjects = 30
n_edits = 4
rules_train = 12
rules_test = 12
corpus_rules = 12
fact_repeats = 1
[decoder_train]
max_steps = 12
warmup_steps = 2
batch_size = 4
[pretrain]
max_steps = 12
warmup_steps = 2
batch_size = 4
[finetune]
max_steps = 6
warmup_steps = 2
batch_size = 4
eval_every = 3
[edit]
max_steps = 6
warmup_steps = 2
batch_size = 4
eval_every = 3
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """Every stage once, through the CLI, on the tiny config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY_TOML)
    c = ["--config", str(cfg)]
    steps = [
        ["gen-data", *c, "--out", str(root / "data")],
        ["pretrain-decoder", *c, "--data", str(root / "data"), "--out", str(root / "dec")],
        ["capture", *c, "--checkpoint", str(root / "dec/decoder.ckpt"), "--data-file",
         str(root / "data/kv_train.jsonl"), "--out", str(root / "cache")],
        ["pretrain", *c, "--checkpoint", str(root / "dec/decoder.ckpt"), "--cache", str(root / "cache"),
         "--out", str(root / "pre")],
        ["finetune", *c, "--checkpoint", str(root / "pre/bank.ckpt"), "--data", str(root / "data"),
         "--out", str(root / "ft")],
        ["finetune", *c, "--checkpoint", str(root / "dec/decoder.ckpt"), "--data", str(root / "data"),
         "--no-pretrain", "--out", str(root / "ft-scratch")],
        ["edit", *c, "--checkpoint", str(root / "pre/bank.ckpt"), "--edits", str(root / "data/edits.jsonl"),
         "--out", str(root / "edit")],
        ["eval", *c, "--checkpoint", str(root / "ft/bank.ckpt"), "--data", str(root / "data"),
         "--layers", "1-2", "--out", str(root / "eval")],
        ["bench", *c, "--checkpoint", str(root / "ft/bank.ckpt"), "--repetitions", "3", "--out",
         str(root / "bench")],
    ]
    for argv in steps:
        assert dispatch(argv) == EXIT_OK, argv
    return root


def test_every_stage_writes_a_manifest(run_dir):
    for d in ("data", "dec", "cache", "pre", "ft", "ft-scratch", "edit", "eval", "bench"):
        m = json.loads((run_dir / d / "manifest.json").read_text())
        assert m["seed"] == 0
        assert m["config"]["decoder"]["d_model"] == 16
        for name, h in m["outputs"].items():
            if (run_dir / d / name).is_file():
                assert blob_hash(run_dir / d / name) == h


def test_manifest_input_hashes_chain_stages(run_dir):
    dec = json.loads((run_dir / "dec/manifest.json").read_text())
    pre = json.loads((run_dir / "pre/manifest.json").read_text())
    assert pre["inputs"]["checkpoint"]["hash"] == dec["outputs"]["decoder.ckpt"]


def test_decoder_is_unchanged_by_every_training_stage(run_dir):
    ref = load_checkpoint(run_dir / "dec/decoder.ckpt").decoder.param_hash()
    for d in ("pre", "ft", "ft-scratch", "edit"):
        assert load_checkpoint(run_dir / d / "bank.ckpt").decoder.param_hash() == ref


def test_no_pretrain_starts_from_fresh_encoders(run_dir):
    scratch = json.loads((run_dir / "ft-scratch/manifest.json").read_text())
    assert scratch["no_pretrain"] is True
    assert json.loads((run_dir / "ft/manifest.json").read_text())["no_pretrain"] is False


def test_eval_report_shape(run_dir):
    report = json.loads((run_dir / "eval/metrics.json").read_text())
    assert set(report["perplexity"]["kv_test"]) == {"plain", "concat", "injected"}
    assert set(report["edit"]) == {"plain", "injected"}
    assert (run_dir / "eval/metrics.txt").read_text().startswith("section")


def test_rerun_reproduces_manifest_and_metrics(run_dir):
    c = ["--config", str(run_dir / "tiny.toml")]
    first = (run_dir / "eval/manifest.json").read_bytes(), (run_dir / "eval/metrics.json").read_bytes()
    assert dispatch(["eval", *c, "--checkpoint", str(run_dir / "ft/bank.ckpt"), "--data", str(run_dir / "data"),
                     "--layers", "1-2", "--out", str(run_dir / "eval")]) == EXIT_OK
    assert ((run_dir / "eval/manifest.json").read_bytes(), (run_dir / "eval/metrics.json").read_bytes()) == first
    first_dec = (run_dir / "dec/manifest.json").read_bytes()
    assert dispatch(["pretrain-decoder", *c, "--data", str(run_dir / "data"), "--out", str(run_dir / "dec")]) == 0
    assert (run_dir / "dec/manifest.json").read_bytes() == first_dec


def test_subset_mismatch_lists_both_sets(run_dir, capsys):
    c = ["--config", str(run_dir / "tiny.toml")]
    code = dispatch(["eval", *c, "--checkpoint", str(run_dir / "ft/bank.ckpt"), "--data", str(run_dir / "data"),
                     "--mode", "injected", "--layers", "all", "--out", str(run_dir / "eval-bad")])
    assert code == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "[0, 1, 2]" in err and "[1, 2]" in err


def test_conv_alias_reads_divergence_flags(run_dir):
    log = run_dir / "pre/log.jsonl"
    events = [json.loads(l) for l in log.read_text().splitlines()]
    flagged = sorted(int(e["job"].split(":")[1]) for e in events if e.get("event") == "end" and e["diverged"])
    assert parse_layers("conv", 3, flagged) == tuple(l for l in range(3) if l not in flagged)
    assert parse_layers("conv", 9, [1]) == (0, 2, 3, 4, 5, 6, 7, 8)


def test_unknown_flag_is_a_usage_error(capsys):
    assert dispatch(["gen-data", "--out", "x", "--frobnicate"]) == EXIT_USAGE
    assert "--frobnicate" in capsys.readouterr().err
    assert dispatch(["launch"]) == EXIT_USAGE


def test_bad_layer_spec_is_a_usage_error(tmp_path):
    assert dispatch(["gen-data", "--layers", "5-2", "--out", str(tmp_path)]) == EXIT_USAGE
    assert dispatch(["gen-data", "--layers", "3-12", "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_input_is_a_runtime_failure(tmp_path):
    assert dispatch(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_layer_ranges():
    assert parse_layers("3-8", 9) == (3, 4, 5, 6, 7, 8)
    assert parse_layers("memit", 9) == (3, 4, 5, 6, 7, 8)
    assert parse_layers("all", 4) == (0, 1, 2, 3)
    assert parse_layers("1,3-4", 9) == (1, 3, 4)


def test_config_precedence(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("seed = 4\n[encoder]\nd_enc = 8\n")
    cfg = load_config(p, {"seed": 9})
    assert cfg.seed == 9 and cfg.encoder.d_enc == 8 and cfg.encoder.mlp_width == 32
    p.write_text("[encoder]\nwidth = 3\n")
    with pytest.raises(ValueError, match="encoder.width"):
        load_config(p)
