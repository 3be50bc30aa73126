from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

from entityfocus.cli import RunConfig, build_config, main, read_meta
from entityfocus.corpus import Entity, Passage, QueryExample, load_queries, write_corpus, write_queries
from entityfocus.scorer import read_run, write_run


def run(*argv) -> int:
    return main([str(a) for a in argv])


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nlam = 2.5\nseed=4\nstem = yes\nsources = image\n")
    c = build_config(cfg, {"seed": "9", "lam": None})
    assert (c.lam, c.seed, c.stem, c.sources) == (2.5, 9, True, "image")
    assert c.digest() != RunConfig().digest()
    assert build_config(cfg, {}).digest() == build_config(cfg, {}).digest()


@pytest.mark.parametrize(
    "text, needle",
    [("bogus = 1\n", "unknown config key"), ("lam = fast\n", "invalid value"), ("lam\n", "expected 'key = value'"),
     ("optimizer = sgd\n", "unknown optimizer"), ("sources = ocr\n", "unknown entity source"), ("lam = -1\n", "non-negative")],
)
def test_bad_config_exits_2(tmp_path, capsys, text, needle):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(text)
    assert run("index", "--config", cfg) == 2
    assert needle in capsys.readouterr().err


def test_missing_inputs_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert run("index", "--corpus", missing, "--workdir", tmp_path / "w") == 2
    assert str(missing) in capsys.readouterr().err
    assert run("index", "--config", tmp_path / "none.cfg") == 2
    assert run("frobnicate") == 2
    assert run("--help") == 0


def fixture_files(tmp_path: Path) -> Path:
    passages = [
        Passage("n1", "what is shown here"), Passage("n2", "what is shown"), Passage("n3", "shown here today"),
        Passage("n4", "here is what we saw"), Passage("n5", "what a view is shown"),
        Passage("a1", "bell pepper belongs to genus capsicum"), Passage("z1", "a quiet dog"),
    ]
    queries = [
        QueryExample("q1", "what is shown here", ("capsicum",), "", (Entity("bell pepper", "tag"), Entity("zebra crossing", "tag"))),
        QueryExample("q2", "bell pepper", ("capsicum",)),
        QueryExample("q3", "what dog", ("dog",), "", (Entity("quiet", "caption"),)),
    ]
    write_corpus(passages, tmp_path / "corpus.jsonl")
    write_queries(queries, tmp_path / "queries.jsonl")
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"corpus = {tmp_path / 'corpus.jsonl'}\nqueries = {tmp_path / 'queries.jsonl'}\n"
        f"eval_queries = {tmp_path / 'queries.jsonl'}\nworkdir = {tmp_path / 'work'}\nhash_dim = 256\ndim = 8\n"
    )
    return cfg


def _lines(path):
    return [json.loads(x) for x in Path(path).read_text().splitlines()]


def test_index_and_mine_fixture(tmp_path, capsys):
    cfg = fixture_files(tmp_path)
    work = tmp_path / "work"
    assert run("index", "--config", cfg) == 0
    assert "indexed 7 passages" in capsys.readouterr().out
    first = {n: (work / n).read_bytes() for n in ("sparse.efsi", "dense.efem")}
    assert run("index", "--config", cfg) == 0
    assert {n: (work / n).read_bytes() for n in first} == first
    meta = read_meta(work / "sparse.efsi")
    assert meta["format_version"] == 1 and meta["seed"] == 0 and len(meta["config_hash"]) == 16

    # q1: joint passage a1 is the only positive, 5 negatives -> 5 instances
    # q2: a1 is the only hit, no negative -> dropped
    # q3: z1 is the only positive, n1 n2 n4 n5 are negatives -> 4 instances
    assert run("mine", "--config", cfg) == 0
    train = _lines(work / "train.jsonl")
    assert len(train) == 9
    assert sorted({(r["query_id"], r["positive_id"]) for r in train}) == [("q1", "a1"), ("q3", "z1")]
    gains = {(r["query_id"], r["text"]): r["gain"] for r in _lines(work / "entity_scores.jsonl")}
    assert gains[("q1", "bell pepper")] == 1.0 and gains[("q1", "zebra crossing")] == 0.0

    assert run("mine", "--config", cfg, "--theta", "inf") == 0
    assert not any(r["oracle"] for r in _lines(work / "entity_scores.jsonl"))
    assert {r["query_id"] for r in _lines(work / "train.jsonl")} == {"q3"}
    assert run("mine", "--config", cfg, "--theta=-inf") == 0
    assert all(r["oracle"] for r in _lines(work / "entity_scores.jsonl"))


def test_artifact_version_mismatch(tmp_path, capsys):
    cfg = fixture_files(tmp_path)
    work = tmp_path / "work"
    assert run("index", "--config", cfg) == 0
    assert run("mine", "--config", cfg) == 0
    assert run("train", "--config", cfg, "--epochs", "1") == 0
    # dense index predates the checkpoint
    assert run("retrieve", "--config", cfg) == 2
    assert "rerun 'index'" in capsys.readouterr().err
    assert run("index", "--config", cfg) == 0
    assert run("retrieve", "--config", cfg) == 0
    ck = work / "model.efck"
    data = ck.read_bytes()
    ck.write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    assert run("index", "--config", cfg) == 2
    assert "version 7" in capsys.readouterr().err


@pytest.mark.slow
def test_full_synthetic_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    t0 = time.perf_counter()
    assert run("gen-synth", "--out", data, "--n-queries", 200) == 0
    cfg = data / "run.cfg"
    for cmd in ("index", "mine", "train", "index"):
        assert run(cmd, "--config", cfg, "--threads", 2) == 0, cmd
    work = data / "work"
    assert run("retrieve", "--config", cfg) == 0
    assert run("retrieve", "--config", cfg, "--lam", 0, "--out", work / "lam0.trec") == 0
    assert run("retrieve", "--config", cfg, "--no-rerank", "--out", work / "mips.trec") == 0
    assert run("sweep-lambda", "--config", cfg, "--lambdas", "0,1") == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 300

    assert read_run(work / "lam0.trec") == read_run(work / "mips.trec")
    assert (work / "run.breakdown.jsonl").exists()
    assert read_meta(work / "run.trec")["lam"] == 1.0
    assert (work / "losses.csv").read_text().startswith("step,L_qp,L_qpe,L_ent,lr\n")
    sweep = json.loads((work / "sweep.json").read_text())
    assert [r["name"] for r in sweep] == ["lambda=0", "lambda=1"]

    # a gold-first ordering scores MRR@5 = 1
    queries = load_queries(data / "eval_queries.jsonl")
    corpus = {json.loads(l)["id"]: json.loads(l)["text"] for l in (data / "corpus.jsonl").read_text().splitlines()}
    from entityfocus.corpus import contains_answer

    perfect = {}
    for q in queries:
        gold = [pid for pid, t in sorted(corpus.items()) if contains_answer(t, q.answers)]
        perfect[q.id] = [(pid, float(-i)) for i, pid in enumerate(gold[:5])]
    write_run(perfect, work / "perfect.trec")
    capsys.readouterr()
    assert run("eval", "--config", cfg, work / "perfect.trec", work / "run.trec", work / "lam0.trec") == 0
    report = json.loads((work / "report.json").read_text())
    assert report[0]["mrr_at_k"] == 1.0 and report[0]["p_at_k"] == 1.0
    assert [r["name"] for r in report] == ["perfect.trec", "run.trec", "lam0.trec"]
    assert "perfect.trec" in capsys.readouterr().out
