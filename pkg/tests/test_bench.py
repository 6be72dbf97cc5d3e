import pytest

from kinject import tensor as T
from kinject.bench import (flop_profile, forward_flops, grad_memory_profile, inference_tasks, synthetic_sample,
                           timing_report)
from kinject.model import DecoderConfig, EncoderConfig, init_models

from conftest import TINY_DEC, TINY_ENC

K_LENS = (0, 16, 64, 128, 256)
X_LEN = 32


@pytest.fixture(scope="module")
def models():
    dcfg = DecoderConfig(**{**TINY_DEC, "max_context": 300})
    return init_models(dcfg, EncoderConfig(**TINY_ENC), 0)


def attention_flops(n_layers, heads, d_model, t):
    """Analytic count: QK^T and PV matmuls (2 * 2 * T^2 * dh per head) plus softmax per score."""
    dh = d_model // heads
    return n_layers * heads * (4 * t * t * dh + T.SOFTMAX_FLOPS * t * t)


def test_injected_decoder_cost_ignores_knowledge_length(models):
    dec, bank = models
    table = flop_profile(dec, bank, bank.layers, "injected", K_LENS, X_LEN)
    assert len({r["decoder_flops"] for r in table.rows}) == 1
    assert {r["decoder_context"] for r in table.rows} == {1 + X_LEN}
    enc = [r["encoder_flops"] for r in table.rows]
    assert all(b > a for a, b in zip(enc, enc[1:]))


def test_concat_attention_matches_quadratic_oracle(models):
    dec, bank = models
    table = flop_profile(dec, bank, bank.layers, "concat", K_LENS, X_LEN)
    for r in table.rows:
        t = 1 + r["k_len"] + X_LEN
        assert r["decoder_context"] == t
        assert r["attention_flops_decoder"] == attention_flops(3, 2, 16, t)
    by_k = {r["k_len"]: r["attention_flops_decoder"] for r in table.rows}
    linear = (1 + 256 + X_LEN) / (1 + 64 + X_LEN)
    assert by_k[256] / by_k[64] > linear


def test_concat_costs_more_than_injected_whenever_knowledge_present(models):
    dec, bank = models
    conc = flop_profile(dec, bank, bank.layers, "concat", K_LENS, X_LEN).rows
    inj = flop_profile(dec, bank, bank.layers, "injected", K_LENS, X_LEN).rows
    for c, i in zip(conc, inj):
        if c["k_len"] == 0:
            assert c["decoder_flops"] == i["decoder_flops"]
        else:
            assert i["decoder_flops"] < c["decoder_flops"]


def test_flop_counts_are_reproducible(models):
    dec, bank = models
    s = synthetic_sample(64, X_LEN)
    assert forward_flops(dec, bank, bank.layers, s, "injected") == forward_flops(dec, bank, bank.layers, s, "injected")


def test_overlong_concat_is_marked(models):
    dec, bank = models
    row = flop_profile(dec, bank, bank.layers, "concat", (400,), X_LEN).rows[0]
    assert row["decoder_flops"] == "OOC"


def test_memory_profile_directions(models):
    dec, bank = models
    samples = [synthetic_sample(64, X_LEN, seed=i) for i in range(4)]
    pre, fine = grad_memory_profile(dec, bank, bank.layers, samples).rows
    assert pre["decoder_grad_bytes"] == 0
    assert pre["encoder_grad_bytes"] > 0
    # the first delta is added after block min(layers); only blocks above it see trainable inputs
    assert fine["decoder_layers_in_graph"] == 3 - 1 - min(bank.layers)
    assert fine["decoder_graph_nodes"] > 0
    assert pre["peak_live_bytes"] < fine["peak_live_bytes"]


def test_memory_profile_is_deterministic(models):
    dec, bank = models
    samples = [synthetic_sample(16, X_LEN, seed=i) for i in range(2)]
    a = grad_memory_profile(dec, bank, bank.layers, samples).rows
    b = grad_memory_profile(dec, bank, bank.layers, samples).rows
    assert a == b


def test_timing_needs_three_repetitions(models):
    dec, bank = models
    tasks = inference_tasks(dec, bank, bank.layers, 16, X_LEN)
    with pytest.raises(ValueError):
        timing_report(tasks, 2)
    table = timing_report(tasks, 3)
    assert [r["task"] for r in table.rows] == ["plain_k16", "concat_k16", "injected_k16"]
    assert all(r["median_s"] > 0 for r in table.rows)
    assert "median_s" in table.to_csv().splitlines()[0]


def test_synthetic_sample_layout():
    s = synthetic_sample(10, 8)
    assert s.k_len == 10 and len(s.ids) == 1 + 10 + 8 and s.x_len == 9
    with pytest.raises(ValueError):
        synthetic_sample(3, 2)


def test_overlong_concat_is_left_out_of_timing(models):
    dec, bank = models
    tasks = inference_tasks(dec, bank, bank.layers, 400, X_LEN)
    assert list(tasks) == ["plain_k400", "injected_k400"]
