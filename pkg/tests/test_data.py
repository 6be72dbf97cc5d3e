import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinject.data import (BOS, LABELS, SEP, SYS, USR, KnowledgeSample, OverlongError, detokenize,
                          gen_counterfact_dataset, gen_kv_dataset, gen_rules_dataset, load_edit_jsonl,
                          load_jsonl, read_manifest, render, rules_label, target_mask, tokenize,
                          write_edit_jsonl, write_jsonl, write_manifest)
from kinject.injection import shift_left


@settings(max_examples=200)
@given(st.binary(max_size=64))
def test_tokenizer_round_trips_bytes(raw):
    text = raw.decode("utf-8", errors="surrogateescape")
    assert detokenize(tokenize(text)) == text


@given(st.text(max_size=40))
def test_tokenizer_round_trips_text(text):
    assert detokenize(tokenize(text)) == text


def test_special_markers_map_to_single_ids():
    assert tokenize("a[SEP]b") == [ord("a"), SEP, ord("b")]


def test_empty_knowledge_renders_without_wrapper():
    r = render(KnowledgeSample([], "q", "a"))
    assert r.k_len == 0
    assert list(r.ids[:2]) == [BOS, USR]


def test_two_knowledge_strings_have_one_separator():
    r = render(KnowledgeSample(["x is A", "y is B"], "what is x?", "A"))
    know = r.ids[1:1 + r.k_len]
    assert int((know == SEP).sum()) == 1
    assert detokenize(know).startswith("Imagine that {")


def test_loss_mask_covers_exactly_the_tokens_after_sys():
    r = render(KnowledgeSample(["k"], "src", "tgt!"))
    m = target_mask(r.roles, r.ids)
    sys_pos = int(np.flatnonzero(r.ids == SYS)[0])
    assert m.sum() == 4
    assert np.flatnonzero(m).tolist() == list(range(sys_pos + 1, len(r.ids)))


def test_render_is_deterministic_and_shift_lands_on_usr():
    for s in gen_kv_dataset(30, 2, 3)[0]:
        a, b = render(s), render(s)
        np.testing.assert_array_equal(a.ids, b.ids)
        assert shift_left(a.ids[1:], a.k_len)[0] == USR


def test_overlong_is_reported():
    with pytest.raises(OverlongError):
        render(KnowledgeSample(["x" * 100], "q", "a"), max_context=50)


def test_jsonl_line_errors_do_not_stop_loading(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join([
        json.dumps({"knowledge": [], "source": "q", "target": "a"}),
        json.dumps({"knowledge": [], "source": "q"}),
        "{not json",
        json.dumps({"knowledge": ["k"], "source": "q2", "target": "b"}),
    ]) + "\n")
    rep = load_jsonl(p)
    assert [s.source for s in rep.samples] == ["q", "q2"]
    assert [e[0] for e in rep.errors] == [2, 3]
    assert "target" in rep.errors[0][1]
    assert render(rep.samples[0]).k_len == 0
    with pytest.raises(ValueError):
        load_jsonl(p, strict=True)


def test_jsonl_round_trip(tmp_path):
    samples = gen_kv_dataset(10, 1, 0)[0] + gen_rules_dataset(6, 0)
    write_jsonl(tmp_path / "s.jsonl", samples)
    assert load_jsonl(tmp_path / "s.jsonl").samples == samples
    edits = gen_counterfact_dataset(5, 0)
    write_edit_jsonl(tmp_path / "e.jsonl", edits)
    assert load_edit_jsonl(tmp_path / "e.jsonl") == edits


def test_sidecar_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.txt", {"seed": 3, "n": 10})
    assert read_manifest(tmp_path / "m.txt") == {"n": "10", "seed": "3"}


def test_kv_generator_contract():
    train, val, test = gen_kv_dataset(200, 0, 7)
    for s in train + val + test:
        assert len(s.knowledge) == 1
        assert s.target in s.knowledge[0]
    key = lambda s: s.source
    assert not ({key(s) for s in train} & {key(s) for s in val})
    assert not ({key(s) for s in train} & {key(s) for s in test})
    assert not ({key(s) for s in val} & {key(s) for s in test})
    for s in gen_kv_dataset(50, 3, 1)[0]:
        assert len(s.knowledge) == 4
        assert any(s.target in k and s.source[8:-1] in k for k in s.knowledge)
    assert gen_kv_dataset(40, 2, 5) == gen_kv_dataset(40, 2, 5)


def test_counterfact_generator_contract():
    edits = gen_counterfact_dataset(20, 0)
    assert len(edits) == 20
    for e in edits:
        assert e.counter_object != e.true_object
        assert all([e.subject, e.relation, e.true_object, e.counter_object, e.prompt, e.paraphrases,
                    e.neighborhood])
        assert all(e.subject not in p for p in e.neighborhood)
        assert all(e.subject in p for p in e.paraphrases)
    pools = {}
    for e in edits:
        pools.setdefault(e.relation, set()).update([e.true_object, e.counter_object])
    for objs in pools.values():
        assert len(objs) <= 6


def test_rules_generator_labels_and_balance():
    data = gen_rules_dataset(900, 0)
    counts = Counter(s.target for s in data)
    for lab in LABELS:
        assert abs(counts[lab] / len(data) - 1 / 3) < 0.05
    assert all(rules_label(s) == s.target for s in data)


def test_rules_labeller_edge_cases():
    s = KnowledgeSample(["the cat is red", "if something is red then it is big"], "the cat is red", "?")
    assert rules_label(s) == "True"
    s = KnowledgeSample(["the cat is red"], "the owl is red", "?")
    assert rules_label(s) == "Unknown"
