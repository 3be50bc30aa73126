from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from entityfocus.corpus import Entity, Passage, QueryExample, corpus_lookup
from entityfocus.evaluation import (
    ablate_entity_sources,
    evaluate_run,
    format_table,
    hard_subset,
    is_hard,
    mrr_at_k,
    oracle_entity_recall_at_k,
    p_at_k,
    paired_bootstrap,
    parse_sources,
    reports_json,
    split_half,
)

CORPUS = corpus_lookup(
    [Passage("g1", "the answer is apple"), Passage("g2", "apple pie"), Passage("n1", "pear"),
     Passage("n2", "plum"), Passage("n3", "fig"), Passage("n4", "kiwi")]
)
Q = {"q": QueryExample("q", "which fruit", ("apple",)), "r": QueryExample("r", "which", ("pear",))}


def test_mrr_and_precision_basics():
    assert mrr_at_k({"q": ["n1", "n2", "g1"]}, Q, CORPUS) == pytest.approx(1 / 3)
    assert mrr_at_k({"q": ["n1", "n2", "n3", "n4", "n1", "g1"]}, Q, CORPUS, k=5) == 0.0
    assert mrr_at_k({"q": ["g1"], "r": ["g1", "n1"]}, Q, CORPUS) == pytest.approx(0.75)
    assert p_at_k({"q": ["g1", "n1", "g2", "n2", "n3"]}, Q, CORPUS) == pytest.approx(0.4)
    assert p_at_k({"q": ["g1", "g2"]}, Q, CORPUS, k=2) == 1.0
    assert p_at_k({"q": []}, Q, CORPUS) == 0.0
    with pytest.raises(KeyError):
        mrr_at_k({"zzz": ["g1"]}, Q, CORPUS)
    with pytest.raises(ValueError):
        p_at_k({"q": ["g1"]}, Q, CORPUS, k=0)


def test_all_permutations_of_two_gold_lists():
    items = ["g1", "g2", "n1", "n2", "n3"]
    for perm in itertools.permutations(items):
        gold_ranks = [i + 1 for i, pid in enumerate(perm) if pid.startswith("g")]
        run = {"q": list(perm)}
        assert mrr_at_k(run, Q, CORPUS) == pytest.approx(1 / min(gold_ranks), abs=1e-12)
        assert p_at_k(run, Q, CORPUS) == pytest.approx(2 / 5, abs=1e-12)
        k3 = sum(r <= 3 for r in gold_ranks)
        assert p_at_k(run, Q, CORPUS, k=3) == pytest.approx(k3 / 3, abs=1e-12)
        for k in range(1, 5):
            assert mrr_at_k(run, Q, CORPUS, k=k + 1) >= mrr_at_k(run, Q, CORPUS, k=k)


def test_oracle_entity_recall():
    corpus = corpus_lookup([Passage("a", "teddy bear on a sofa"), Passage("b", "a red ball")])
    run = {"q1": ["a", "b"], "q2": ["b"]}
    assert oracle_entity_recall_at_k(run, {"q1": ["teddy bear", "ball"]}, corpus) == 1.0
    assert oracle_entity_recall_at_k(run, {"q1": ["teddy bear"], "q2": ["sofa", "lamp"]}, corpus) == pytest.approx(1 / 3)
    assert oracle_entity_recall_at_k(run, {"q1": [], "q2": []}, corpus) == 0.0
    rep = evaluate_run(run, {"q1": QueryExample("q1", "x", ("bear",)), "q2": QueryExample("q2", "x", ("ball",))},
                       corpus, oracle_entities={"q1": [], "q2": []})
    assert rep.oracle_entity_recall_at_k == 0.0 and not rep.oracle_recall_defined


def test_evaluate_run_aggregates_rows():
    run = {"q": ["n1", "g1", "g2"], "r": ["n1"]}
    rep = evaluate_run(run, Q, CORPUS, k=5, oracle_entities={"q": ["apple", "banana"], "r": ["pear"]}, name="x")
    assert rep.mrr_at_k == pytest.approx(np.mean([r["rr"] for r in rep.rows]))
    assert rep.mrr_at_k == pytest.approx((0.5 + 1.0) / 2)
    assert rep.p_at_k == pytest.approx((2 / 5 + 1 / 5) / 2)
    assert rep.oracle_entity_recall_at_k == pytest.approx(2 / 3)
    assert rep.oracle_entity_recall_macro == pytest.approx((0.5 + 1.0) / 2)
    table = format_table([rep])
    assert "MRR@5" in table and "0.7500" in table
    data = json.loads(reports_json([rep], with_rows=False))
    assert data[0]["name"] == "x" and "rows" not in data[0]


def fixture_query():
    ents = (Entity("dog", "tag"), Entity("cat", "tag"), Entity("milk", "candidate"), Entity("pet", "question"))
    return QueryExample("q", "what drinks this", ("milk",), "a cat", ents)


def test_ablate_entity_sources():
    q = fixture_query()
    assert ablate_entity_sources([q], parse_sources("full")) == [q]
    assert ablate_entity_sources([q], set())[0].entities == ()
    kept = ablate_entity_sources([QueryExample("q", "x", ("a",), "", q.entities[:3])], parse_sources("image"))
    assert [e.text for e in kept[0].entities] == ["dog", "cat"]
    assert [e.source for e in ablate_entity_sources([q], parse_sources("question"))[0].entities] == ["candidate", "question"]
    assert parse_sources("tag, caption") == {"tag", "caption"}
    with pytest.raises(ValueError):
        ablate_entity_sources([q], {"ocr"})
    with pytest.raises(ValueError):
        parse_sources("tag,ocr")


def test_hard_subset():
    q = fixture_query()
    assert not is_hard(q)
    easy_via_normalization = QueryExample("e", "x", ("The Milk",), "", (Entity("milk", "candidate"),))
    assert not is_hard(easy_via_normalization)
    hard = QueryExample("h", "x", ("water",), "", q.entities)
    assert is_hard(hard)
    assert is_hard(QueryExample("n", "x", ("a b",)))
    assert [x.id for x in hard_subset([q, hard])] == ["h"]


def test_split_half():
    items = list(range(11))
    val, test = split_half(items, seed=3)
    assert len(val) == 5 and len(test) == 6
    assert sorted(val + test) == items
    assert split_half(items, seed=3) == (val, test)
    assert split_half(items, seed=4) != (val, test)


def test_paired_bootstrap():
    rng = np.random.default_rng(0)
    b = rng.random(200)
    assert paired_bootstrap(b + 0.2, b) == 0.0
    assert paired_bootstrap(b - 0.2, b) == 1.0
    p = paired_bootstrap(b + rng.normal(0, 0.1, 200), b, seed=1)
    assert 0.0 < p < 1.0
    with pytest.raises(ValueError):
        paired_bootstrap([1.0], [1.0, 2.0])
