import json
import math

import pytest

from kinject.data import (EditSample, KnowledgeSample, gen_counterfact_world, counterfact_edits,
                          gen_kv_dataset, gen_rules_dataset, render)
from kinject.evaluate import (EditMetrics, EvalError, MetricsReport, edit_metrics, icr_accuracy, perplexity)

from conftest import tiny_models
from oracles import HashedRandomLogits, PrefixMemorizer, uniform_logits


def test_uniform_stub_perplexity_is_vocab_size():
    data = gen_kv_dataset(20, 1, 0)[0]
    assert perplexity(uniform_logits, None, (), data, "plain") == pytest.approx(261, rel=1e-9)
    assert perplexity(uniform_logits, None, (), data, "concat") == pytest.approx(261, rel=1e-9)


def test_copying_oracle_reaches_perplexity_near_one_in_concat_mode():
    data = gen_kv_dataset(30, 2, 1)[2]
    oracle = PrefixMemorizer([render(s).ids for s in data])
    assert perplexity(oracle, None, (), data, "concat") < 1.001
    assert perplexity(oracle, None, (), data, "plain") > 100


def test_zero_bank_injected_perplexity_equals_plain():
    dec, bank = tiny_models()
    data = gen_kv_dataset(10, 1, 0)[0]
    assert perplexity(dec, bank, bank.layers, data, "injected") == perplexity(dec, None, (), data, "plain")


def _world_oracle(world, edits, flip_subjects=()):
    """Prefers each fact's true object, or the counter object for subjects in ``flip_subjects``."""
    seqs = []
    for s in world.fact_samples():
        seqs.append(render(s).ids)
    for e in edits:
        if e.subject in flip_subjects:
            for p in [e.prompt] + e.paraphrases:
                seqs.append(render(KnowledgeSample([], p, e.counter_object)).ids)
    return PrefixMemorizer(seqs)


def test_true_object_consistent_model_has_high_ns_low_es():
    world = gen_counterfact_world(60, 0)
    edits = counterfact_edits(world, 20, 0)
    m = edit_metrics(_world_oracle(world, edits), None, (), edits)
    assert m.es == 0.0 and m.ps == 0.0
    assert m.ns == 1.0


def test_three_of_four_flips_give_efficacy_three_quarters():
    world = gen_counterfact_world(60, 1)
    edits = counterfact_edits(world, 4, 1)
    oracle = _world_oracle(world, edits, flip_subjects={e.subject for e in edits[:3]})
    m = edit_metrics(oracle, None, (), edits)
    assert m.es == 0.75
    assert m.es_flips == 3


def test_ties_fail_efficacy_and_pass_neighbourhood():
    edits = counterfact_edits(gen_counterfact_world(60, 2), 5, 2)
    m = edit_metrics(uniform_logits, None, (), edits)
    assert (m.es, m.ps, m.ns) == (0.0, 0.0, 1.0)


def test_flip_fraction_and_keep_fraction_partition():
    edits = counterfact_edits(gen_counterfact_world(60, 3), 12, 3)
    # neighbourhood = the edit prompt itself, so every prompt is counted once as flip, once as keep
    mirrored = [EditSample(**{**e.__dict__, "neighborhood": [e.prompt]}) for e in edits]
    m = edit_metrics(HashedRandomLogits(seed=4), None, (), mirrored)
    assert 0.0 < m.es < 1.0
    assert m.es + m.ns == pytest.approx(1.0, abs=1e-12)
    assert m.ps_per_edit == pytest.approx(m.ps)  # equal paraphrase counts per edit


def test_edit_metrics_are_deterministic():
    edits = counterfact_edits(gen_counterfact_world(60, 3), 6, 3)
    stub = HashedRandomLogits(seed=9)
    assert edit_metrics(stub, None, (), edits) == edit_metrics(stub, None, (), edits)


def test_empty_paraphrase_list_is_an_error():
    e = EditSample("A", "speaks", "Greek", "Dutch", "A speaks", [], ["B speaks"])
    with pytest.raises(EvalError, match="paraphrase"):
        edit_metrics(uniform_logits, None, (), [e])


def test_random_scorer_is_at_chance():
    data = gen_rules_dataset(300, 0)
    acc = icr_accuracy(HashedRandomLogits(seed=1), None, (), data, "plain")
    half_width = 3 * math.sqrt((1 / 3) * (2 / 3) / len(data))
    assert abs(acc - 1 / 3) < half_width


def test_overfit_reader_gets_rules_right_in_concat_mode():
    data = gen_rules_dataset(60, 5)
    oracle = PrefixMemorizer([render(s).ids for s in data])
    assert icr_accuracy(oracle, None, (), data, "concat") == 1.0


def test_unknown_label_rejected():
    with pytest.raises(EvalError):
        icr_accuracy(uniform_logits, None, (), [KnowledgeSample([], "x", "Maybe")], "plain")


def test_unknown_mode_rejected():
    with pytest.raises(EvalError):
        perplexity(uniform_logits, None, (), gen_kv_dataset(5, 0, 0)[0], "sideways")


def test_report_json_is_stable_and_validated():
    r = MetricsReport(perplexity={"kv": {"plain": 3.0}}, accuracy={"rules": {"plain": 0.5}})
    r.add_edit("post", EditMetrics(1.0, 0.5, 0.25, 0.5, 0.25, 4, 8, 8, 4))
    text = r.to_json()
    assert text == r.to_json()
    keys = list(json.loads(text))
    assert keys == sorted(keys)
    assert "perplexity" in r.to_table()
    r.accuracy["rules"]["plain"] = 1.5
    with pytest.raises(EvalError):
        r.validate()
