from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from entityfocus.corpus import Entity, Passage, QueryExample, contains_answer, corpus_lookup
from entityfocus.mining import (
    entity_gain,
    mine_query,
    mine_training_set,
    pair_up,
    read_training_set,
    score_entities,
    srr,
    write_training_set,
)
from entityfocus.sparse import SparseHit, build_index

GOLD = Passage("g", "the answer is here")
MISS = Passage("m", "nothing useful")
CORPUS = {"g": GOLD, "m": MISS, "g2": Passage("g2", "answer again"), "m2": Passage("m2", "still nothing")}


def ranked(ids):
    return [SparseHit(pid, 1.0, r) for r, pid in enumerate(ids, start=1)]


def test_srr_hand_values():
    assert srr(ranked(["m", "m2"]), {"answer"}, CORPUS) == 0.0
    assert srr(ranked(["g", "m", "g2", "m2"]), {"answer"}, CORPUS) == pytest.approx(1 + 1 / 3, abs=1e-12)
    five = {f"g{i}": Passage(f"g{i}", "an answer") for i in range(5)}
    assert srr(ranked(list(five)), {"answer"}, five) == pytest.approx(2.283333333333333, abs=1e-9)


@given(st.lists(st.booleans(), min_size=1, max_size=8), st.data())
def test_srr_improves_when_gold_moves_up(flags, data):
    # swap a gold hit with the non-gold hit directly above it
    ids = [("g" if f else "m") + str(i) for i, f in enumerate(flags)]
    corpus = {pid: Passage(pid, "answer" if pid[0] == "g" else "none") for pid in ids}
    swaps = [i for i in range(1, len(ids)) if ids[i][0] == "g" and ids[i - 1][0] == "m"]
    base = srr(ranked(ids), {"answer"}, corpus)
    assert 0.0 <= base <= sum(1 / i for i in range(1, len(ids) + 1)) + 1e-12
    if swaps:
        i = data.draw(st.sampled_from(swaps))
        ids[i - 1], ids[i] = ids[i], ids[i - 1]
        assert srr(ranked(ids), {"answer"}, corpus) >= base


def test_helpful_entity_gain_is_one(helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    s = entity_gain(index, passages, q, q.entities[0], k=5, theta=0.8)
    assert s.gain == pytest.approx(1.0, abs=1e-12)
    assert s.is_oracle


def test_unmatched_entity_gain_is_zero(helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    s = entity_gain(index, passages, q, q.entities[1])
    assert s.gain == 0.0 and not s.is_oracle


def test_distractor_gain_is_minus_half(distractor_entity_fixture):
    index, passages, q = distractor_entity_fixture
    s = entity_gain(index, passages, q, q.entities[0])
    assert s.gain == pytest.approx(1 / 2 - 1, abs=1e-12)
    assert not s.is_oracle


def test_gain_threshold_is_strict(helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    assert not entity_gain(index, passages, q, q.entities[0], theta=1.0).is_oracle
    with pytest.raises(ValueError):
        entity_gain(index, passages, q, q.entities[0], k=0)


def test_pair_up_cycles_shorter_list():
    rng = np.random.default_rng(0)
    pairs = pair_up(["p"], ["n1", "n2"], rng)
    assert len(pairs) == 2
    assert {p for p, _ in pairs} == {"p"}
    assert sorted(n for _, n in pairs) == ["n1", "n2"]
    pairs = pair_up(["p1", "p2", "p3"], ["n1", "n2", "n3", "n4", "n5"], np.random.default_rng(1))
    assert len(pairs) == 5
    assert sorted(n for _, n in pairs) == ["n1", "n2", "n3", "n4", "n5"]
    assert {p for p, _ in pairs} == {"p1", "p2", "p3"}
    assert pair_up([], ["n"], rng) == []


def test_mine_helpful_fixture(helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    m = mine_query(index, passages, q, n_neg=2)
    # no answer among the question's own hits; the joint passage is the only positive
    assert [p.id for p in m.positives] == ["a1"]
    assert [p.id for p in m.negatives] == ["n1", "n4"]
    assert len(m.instances) == 2
    assert {i.positive.id for i in m.instances} == {"a1"}
    labels = {e.text: e.oracle_label for e in m.instances[0].entities}
    assert labels == {"bell pepper": True, "zebra crossing": False}


def test_theta_extremes(helpful_entity_fixture, distractor_entity_fixture):
    index, passages, q = helpful_entity_fixture
    m = mine_query(index, passages, q, theta=math.inf)
    assert not any(s.is_oracle for s in m.scores)
    assert m.positives == [] and m.instances == []
    m = mine_query(index, passages, q, theta=-math.inf)
    assert all(s.is_oracle for s in m.scores)
    assert [p.id for p in m.positives] == ["a1"]

    index, passages, q = distractor_entity_fixture
    m = mine_query(index, passages, q, theta=math.inf)
    assert [p.id for p in m.positives] == ["a1"]


def test_joint_positive_not_duplicated(distractor_entity_fixture):
    index, passages, _ = distractor_entity_fixture
    q = QueryExample("q", "what is shown here", ("capsicum",), "", (Entity("pot", "tag"),))
    m = mine_query(index, passages, q, theta=-math.inf)
    assert [p.id for p in m.positives] == ["a1"]


def test_mined_instances_respect_containment():
    from entityfocus.synth import generate

    ds = generate(n_queries=30, n_filler=100, seed=3)
    passages = corpus_lookup(ds.passages)
    index = build_index(ds.passages)
    instances = mine_training_set(index, passages, ds.train_queries, n_neg=10)
    assert instances
    qmap = {q.id: q for q in ds.train_queries}
    for inst in instances:
        answers = qmap[inst.query_id].answers
        assert contains_answer(inst.positive, answers)
        assert not contains_answer(inst.negative, answers)
        assert inst.positive.id != inst.negative.id
        assert all(e.oracle_label is not None for e in inst.entities)
    again = mine_training_set(index, passages, ds.train_queries, n_neg=10, threads=3)
    assert [i.record() for i in again] == [i.record() for i in instances]


def test_query_without_answers_in_hits_is_dropped(caplog):
    passages = [Passage("a", "red car"), Passage("b", "blue car")]
    q = QueryExample("q", "car", ("green",))
    idx = build_index(passages)
    details = []
    with caplog.at_level("INFO"):
        assert mine_training_set(idx, corpus_lookup(passages), [q], details=details) == []
    assert "dropped 1 of 1" in caplog.text
    assert details[0].instances == []
    with pytest.raises(ValueError):
        mine_training_set(idx, corpus_lookup(passages), [])


def test_empty_entity_set_still_yields_instances():
    passages = [Passage("a", "red car"), Passage("b", "blue car")]
    q = QueryExample("q", "car", ("red",))
    inst = mine_training_set(build_index(passages), corpus_lookup(passages), [q])
    assert len(inst) == 1 and inst[0].entities == ()


def test_training_set_round_trip(tmp_path, helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    instances = mine_training_set(index, passages, [q])
    path = tmp_path / "train.jsonl"
    write_training_set(instances, path)
    assert read_training_set(path, passages) == instances
    with pytest.raises(ValueError, match="unknown passage id"):
        read_training_set(path, {})


def test_score_entities_shares_baseline(helpful_entity_fixture):
    index, passages, q = helpful_entity_fixture
    gains = [s.gain for s in score_entities(index, passages, q)]
    assert gains == [1.0, 0.0]
