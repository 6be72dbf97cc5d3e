import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinject import tensor as T
from kinject.data import gen_counterfact_dataset, gen_kv_dataset
from kinject.evaluate import edit_metrics
from kinject.training import (CaptureCache, _batch_order, FrozenDecoderError, TrainConfig, batch_loss, capture_pass, edit,
                              encoder_eval_mse, finetune, lr_at, pretrain_bank, pretrain_encoder, render_all)

from conftest import SAMPLES, randomize, tiny_models

DEFAULTS = TrainConfig()


def test_schedule_endpoints_use_default_rates():
    assert lr_at(0, DEFAULTS) == pytest.approx(1e-5)
    assert lr_at(DEFAULTS.warmup_steps, DEFAULTS) == pytest.approx(1e-4)
    assert lr_at(DEFAULTS.max_steps, DEFAULTS) == pytest.approx(1e-5)


@given(st.integers(1, 50), st.integers(1, 300))
def test_schedule_is_warmup_then_decay(warmup, extra):
    cfg = TrainConfig(warmup_steps=warmup, max_steps=warmup + extra)
    lrs = [lr_at(s, cfg) for s in range(cfg.max_steps + 1)]
    up, down = lrs[:warmup + 1], lrs[warmup:]
    assert all(b >= a for a, b in zip(up, up[1:]))
    assert all(b <= a + 1e-18 for a, b in zip(down, down[1:]))


def test_invalid_schedule_rejected():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=10, max_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-3, lr_peak=1e-4)


def _kv(n=24, seed=0):
    return gen_kv_dataset(n, 0, seed, split=(1.0, 0.0, 0.0))[0]


def test_capture_counts_skips_and_allocates_no_gradients(tiny):
    dec, _ = tiny
    data = _kv(10)
    from kinject.data import KnowledgeSample
    data.append(KnowledgeSample(["x" * 200], "q", "a", "too-long"))
    with T.measure() as c:
        cache = capture_pass(dec, data, layers=(1, 2))
    assert len(cache) == len(data) - cache.skipped
    assert cache.skipped == 1
    assert c.grad_allocations == 0


def test_capture_is_byte_identical_on_rerun(tmp_path, tiny):
    dec, _ = tiny
    capture_pass(dec, _kv(12), layers=(1, 2)).save(tmp_path / "a")
    capture_pass(dec, _kv(12), layers=(1, 2)).save(tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    loaded = CaptureCache.load(tmp_path / "a", [2])
    assert sorted(loaded.layers) == [2]
    fresh = capture_pass(dec, _kv(12), layers=(2,))
    assert loaded.layers[2].tobytes() == fresh.layers[2].tobytes()


def test_zero_predictor_matches_baseline(tiny):
    dec, bank = tiny
    cache = capture_pass(dec, _kv(12), layers=(1, 2))
    for l in (1, 2):
        assert encoder_eval_mse(bank, l, cache) == pytest.approx(cache.zero_baseline(l), rel=1e-6)
        assert cache.zero_baseline(l) > 0


def _pretrain_cfg(**kw):
    base = dict(mode="pretrain", lr_start=1e-4, lr_peak=3e-3, lr_end=1e-4, warmup_steps=5, max_steps=30,
                batch_size=4, log_every=1)
    return TrainConfig(**{**base, **kw})


def test_pretraining_allocates_no_decoder_gradients(tiny):
    dec, bank = tiny
    cache = capture_pass(dec, _kv(12), layers=(1, 2))
    with T.measure() as c:
        tlog = pretrain_encoder(bank, 1, cache, _pretrain_cfg())
    dec_bytes = sum(v for k, v in c.grad_bytes_by_scope.items() if k.startswith("decoder"))
    enc_bytes = sum(v for k, v in c.grad_bytes_by_scope.items() if k.startswith("encoder:1"))
    assert dec_bytes == 0
    assert enc_bytes > 0
    # step 0: zero up-projection, so the first batch loss is that batch's mean squared target
    _, tg, mask = cache.layer_targets(1, list(_batch_order(len(cache), _pretrain_cfg())[0]))
    assert tlog.losses[0] == pytest.approx(float((tg[mask].astype(np.float64) ** 2).mean()), rel=1e-5)


def test_layer_training_is_independent_of_companions(tiny):
    dec, _ = tiny
    cache = capture_pass(dec, _kv(12), layers=(1, 2))
    cfg = _pretrain_cfg()
    _, alone = tiny_models()
    pretrain_bank(alone, (1,), cache, cfg)
    _, joint = tiny_models()
    pretrain_bank(joint, (1, 2), cache, cfg)
    for p, q in zip(alone[1].parameters(), joint[1].parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_pretraining_reduces_loss(tiny):
    dec, bank = tiny
    cache = capture_pass(dec, _kv(16), layers=(2,))
    tlog = pretrain_encoder(bank, 2, cache, _pretrain_cfg(max_steps=150))
    assert tlog.final_loss < 0.5 * tlog.baseline
    assert not tlog.diverged


def test_divergence_is_flagged_not_retried(tiny):
    dec, bank = tiny
    cache = capture_pass(dec, _kv(12), layers=(1,))
    tlog = pretrain_encoder(bank, 1, cache, _pretrain_cfg(lr_start=0.0, lr_peak=0.0, lr_end=0.0, patience=10))
    assert tlog.diverged
    assert tlog.steps[-1] < 29


def _ft_cfg(**kw):
    base = dict(mode="finetune", lr_start=1e-3, lr_peak=1e-2, lr_end=1e-3, warmup_steps=10, max_steps=100,
                batch_size=8, eval_every=10)
    return TrainConfig(**{**base, **kw})


def test_zero_learning_rate_step_leaves_encoders(tiny):
    dec, bank = tiny
    randomize(bank)
    before = [p.data.copy() for p in bank.parameters()]
    finetune(dec, bank, (1, 2), _kv(8), _ft_cfg(lr_start=0.0, lr_peak=0.0, lr_end=0.0, warmup_steps=0, max_steps=1))
    assert all((p.data == b).all() for p, b in zip(bank.parameters(), before))


def test_finetune_keeps_decoder_frozen(tiny):
    dec, bank = tiny
    h0 = dec.param_hash()
    finetune(dec, bank, (1, 2), _kv(8), _ft_cfg())
    assert dec.param_hash() == h0
    dec.unfreeze()
    with pytest.raises(FrozenDecoderError):
        finetune(dec, bank, (1, 2), _kv(8), _ft_cfg(max_steps=2, warmup_steps=1))


def expressive_tiny():
    """Tiny models whose tied embedding is large enough for confident logits (init std 0.02 caps them
    near 0.3 after the final norm; at 50x the margin between random embedding
    directions still floors CE near 0.12)."""
    dec, bank = tiny_models()
    dec.embed.data *= 150
    return dec, bank


def test_sixteen_samples_can_be_overfit():
    dec, bank = expressive_tiny()
    data = _kv(16, seed=3)
    tlog = finetune(dec, bank, (1, 2), data, _ft_cfg(max_steps=3000, warmup_steps=50, batch_size=16,
                                                     eval_every=50), stop_loss=0.05)
    assert tlog.final_loss < 0.05


def _edit_cfg(**kw):
    base = dict(mode="edit", lr_start=1e-3, lr_peak=1e-2, lr_end=1e-3, warmup_steps=10, max_steps=1500,
                batch_size=4, eval_every=10)
    return TrainConfig(**{**base, **kw})


def test_edits_converge_and_repeat_edit_is_a_no_op():
    dec, bank = expressive_tiny()
    edits = gen_counterfact_dataset(4, 0)
    h0 = dec.param_hash()
    tlog = edit(dec, bank, (1, 2), edits, _edit_cfg(), stop_loss=0.05)
    assert tlog.final_loss < 0.05
    assert edit_metrics(dec, bank, (1, 2), edits).es == 1.0
    # counter objects are now the greedy output: re-editing moves nothing
    before = [p.data.copy() for p in bank.parameters()]
    edit(dec, bank, (1, 2), edits, _edit_cfg(), stop_loss=0.05)
    same = math.sqrt(sum(((p.data - b) ** 2).sum() for p, b in zip(bank.parameters(), before)))
    # contrasting edit back to the true objects takes a normal step
    flipped = [type(e)(**{**e.__dict__, "counter_object": e.true_object}) for e in edits]
    edit(dec, bank, (1, 2), flipped, _edit_cfg(max_steps=11), stop_loss=0.05)
    normal = math.sqrt(sum(((p.data - b) ** 2).sum() for p, b in zip(bank.parameters(), before)))
    assert normal > 0
    assert same < 1e-3 * normal
    assert dec.param_hash() == h0


def test_render_all_skips_overlong():
    from kinject.data import KnowledgeSample
    out, skipped = render_all([SAMPLES[0], KnowledgeSample(["y" * 100], "q", "a")], 64)
    assert len(out) == 1 and skipped == 1


def test_batch_loss_of_fresh_bank_equals_plain_loss(tiny):
    from kinject.data import render
    from kinject.evaluate import perplexity
    dec, bank = tiny
    data = _kv(8)
    ce = batch_loss(dec, bank, (1, 2), [render(s) for s in data])
    assert math.exp(ce) == pytest.approx(perplexity(dec, None, (), data, "plain"), rel=1e-5)
