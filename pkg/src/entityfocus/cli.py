"""Command-line pipeline: gen-synth, index, mine, train, retrieve, eval, sweep-lambda.

Settings come from a flat ``key = value`` file (``--config``) and can be
overridden by flags of the same name (``--rerank-depth 40``); flags win.
Every artifact gets a ``<file>.meta.json`` sidecar recording the config
hash, seed and format version.

Exit codes: 0 success, 1 internal error, 2 usage/config/input error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from . import corpus as corpus_mod
from .corpus import corpus_lookup, load_corpus, load_queries, write_corpus, write_queries
from .encoder import EMBED_VERSION, EncoderModel, read_embeddings, write_embeddings
from .evaluation import ablate_entity_sources, evaluate_run, format_table, parse_sources, reports_json
from .mining import entity_score_records, mine_training_set, read_training_set, score_entities, write_training_set
from .pipeline import as_run, as_scored, encode_corpus, retrieve
from .scorer import DenseIndex, read_run, write_breakdowns, write_run
from .sparse import FORMAT_VERSION as SPARSE_VERSION
from .sparse import InvertedIndex, build_index
from .synth import generate
from .trainer import CKPT_VERSION, TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_csv

log = logging.getLogger("entityfocus")


class UsageError(Exception):
    """Bad configuration, missing inputs, or stale artifacts (exit code 2)."""


@dataclass
class RunConfig:
    # inputs
    corpus: str = "corpus.jsonl"
    queries: str = "train_queries.jsonl"
    eval_queries: str = "eval_queries.jsonl"
    passage_embeddings: str = ""
    # artifacts
    workdir: str = "work"
    # sparse retrieval and mining
    k1: float = 1.1
    b: float = 0.4
    stopwords: bool = False
    stem: bool = False
    theta: float = 0.8
    srr_depth: int = 5
    init_depth: int = 100
    n_pos: int = 5
    n_neg: int = 25
    # model and training
    hash_dim: int = 4096
    dim: int = 64
    optimizer: str = "adaptive"
    learning_rate: float = 1e-3
    epochs: int = 2
    batch_size: int = 16
    warmup: float = 0.1
    w_qp: float = 1.0
    w_qpe: float = 1.0
    w_ent: float = 1.0
    eval_every: int = 0
    # retrieval and evaluation
    lam: float = 1.0
    rerank_depth: int = 80
    metric_k: int = 5
    sources: str = "full"
    lambdas: str = "0,0.25,0.5,1,2,4"
    tag: str = "entityfocus"
    # synthetic data
    n_queries: int = 400
    # misc
    seed: int = 0
    threads: int = 1

    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            warmup_fraction=self.warmup,
            w_qp=self.w_qp,
            w_qpe=self.w_qpe,
            w_ent=self.w_ent,
            seed=self.seed,
            lam=self.lam,
            optimizer=self.optimizer,
        )


ARTIFACTS = {
    "sparse": "sparse.efsi",
    "dense": "dense.efem",
    "entity_scores": "entity_scores.jsonl",
    "training_set": "train.jsonl",
    "checkpoint": "model.efck",
    "losses": "losses.csv",
    "run": "run.trec",
    "breakdown": "run.breakdown.jsonl",
    "report": "report.json",
    "sweep": "sweep.json",
}


def _parse_value(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"invalid value {raw!r} for {field.name} ({kind})") from None
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def build_config(config_path: str | None, overrides: dict[str, str | None]) -> RunConfig:
    by_name = {f.name: f for f in fields(RunConfig)}
    values = {}
    if config_path:
        for key, raw in read_config_file(config_path).items():
            key = key.replace("-", "_")
            if key not in by_name:
                raise UsageError(f"unknown config key {key!r} in {config_path}")
            values[key] = _parse_value(by_name[key], raw)
    for key, raw in overrides.items():
        if raw is not None:
            values[key] = _parse_value(by_name[key], raw)
    cfg = RunConfig(**values)
    if cfg.optimizer not in ("momentless", "adaptive"):
        raise UsageError(f"unknown optimizer {cfg.optimizer!r}")
    if cfg.lam < 0:
        raise UsageError("lam must be non-negative")
    try:
        parse_sources(cfg.sources)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def write_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_meta(path: Path, cfg: RunConfig, kind: str, version: int = 1, **extra) -> None:
    meta = {"artifact": kind, "format_version": version, "config_hash": cfg.digest(), "seed": cfg.seed, **extra}
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_meta(path: Path) -> dict:
    try:
        return json.loads(Path(f"{path}.meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        return {}


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _require(*paths: str | Path) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"input not found: {p}")


def _workdir(cfg: RunConfig) -> Path:
    w = Path(cfg.workdir)
    w.mkdir(parents=True, exist_ok=True)
    return w


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(cfg: RunConfig, out: str) -> int:
    outdir = Path(out)
    outdir.mkdir(parents=True, exist_ok=True)
    ds = generate(n_queries=cfg.n_queries, seed=cfg.seed)
    write_corpus(ds.passages, outdir / "corpus.jsonl")
    write_queries(ds.train_queries, outdir / "train_queries.jsonl")
    write_queries(ds.eval_queries, outdir / "eval_queries.jsonl")
    synth_cfg = dataclasses.replace(
        cfg,
        corpus=str(outdir / "corpus.jsonl"),
        queries=str(outdir / "train_queries.jsonl"),
        eval_queries=str(outdir / "eval_queries.jsonl"),
        workdir=str(outdir / "work"),
    )
    write_config(synth_cfg, outdir / "run.cfg")
    print(
        f"wrote {len(ds.passages)} passages, {len(ds.train_queries)} train and "
        f"{len(ds.eval_queries)} eval queries to {outdir} (config: {outdir / 'run.cfg'})"
    )
    return 0


def _load_model(cfg: RunConfig) -> EncoderModel:
    ckpt = cfg.path(ARTIFACTS["checkpoint"])
    _require(ckpt)
    return load_checkpoint(ckpt)[0]


def _model_source(cfg: RunConfig) -> str:
    if cfg.passage_embeddings:
        return f"embeddings:{file_digest(Path(cfg.passage_embeddings))}"
    ckpt = cfg.path(ARTIFACTS["checkpoint"])
    if ckpt.exists():
        return f"checkpoint:{file_digest(ckpt)}"
    return f"init:{cfg.hash_dim}:{cfg.dim}:{cfg.seed}"


def cmd_index(cfg: RunConfig) -> int:
    _require(cfg.corpus)
    if cfg.passage_embeddings:
        _require(cfg.passage_embeddings)
    work = _workdir(cfg)
    passages = load_corpus(cfg.corpus)
    index = build_index(passages, cfg.k1, cfg.b, cfg.stopwords)
    sparse_path = work / ARTIFACTS["sparse"]
    index.save(sparse_path)
    write_meta(sparse_path, cfg, "sparse_index", SPARSE_VERSION)

    source = _model_source(cfg)
    if cfg.passage_embeddings:
        vectors = read_embeddings(cfg.passage_embeddings)
        missing = {p.id for p in passages} - set(vectors)
        if missing:
            raise UsageError(f"passage embeddings lack {len(missing)} corpus ids, e.g. {sorted(missing)[0]!r}")
        vectors = {p.id: vectors[p.id] for p in sorted(passages, key=lambda p: p.id)}
    else:
        ckpt = cfg.path(ARTIFACTS["checkpoint"])
        model = load_checkpoint(ckpt)[0] if ckpt.exists() else EncoderModel.initialize(cfg.hash_dim, cfg.dim, cfg.seed)
        vectors = encode_corpus(model, passages).as_mapping()
    dense_path = work / ARTIFACTS["dense"]
    write_embeddings(vectors, dense_path)
    write_meta(dense_path, cfg, "dense_index", EMBED_VERSION, source=source)

    print(
        f"indexed {index.doc_count} passages, {len(index.postings)} terms, "
        f"avg length {index.avg_doc_length:.2f}; dense dim {len(next(iter(vectors.values())))} ({source})"
    )
    return 0


def _load_sparse(cfg: RunConfig) -> InvertedIndex:
    path = cfg.path(ARTIFACTS["sparse"])
    _require(path)
    return InvertedIndex.load(path)


def cmd_mine(cfg: RunConfig) -> int:
    _require(cfg.corpus, cfg.queries)
    work = _workdir(cfg)
    passages = corpus_lookup(load_corpus(cfg.corpus))
    queries = load_queries(cfg.queries)
    index = _load_sparse(cfg)
    details: list = []
    instances = mine_training_set(
        index, passages, queries, cfg.init_depth, cfg.n_pos, cfg.n_neg, cfg.theta,
        cfg.srr_depth, cfg.seed, cfg.stem, cfg.threads, details,
    )
    scores_path = work / ARTIFACTS["entity_scores"]
    corpus_mod.write_jsonl(entity_score_records(details), scores_path)
    write_meta(scores_path, cfg, "entity_scores")
    train_path = work / ARTIFACTS["training_set"]
    write_training_set(instances, train_path)
    write_meta(train_path, cfg, "training_set")
    n_oracle = sum(s.is_oracle for m in details for s in m.scores)
    n_ent = sum(len(m.scores) for m in details)
    kept = sum(1 for m in details if m.instances)
    print(f"mined {len(instances)} instances from {kept}/{len(queries)} queries; {n_oracle}/{n_ent} entities are oracle")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg.corpus, cfg.queries)
    work = _workdir(cfg)
    passages = corpus_lookup(load_corpus(cfg.corpus))
    queries = {q.id: q for q in load_queries(cfg.queries)}
    train_path = work / ARTIFACTS["training_set"]
    _require(train_path)
    instances = read_training_set(train_path, passages)
    if not instances:
        raise UsageError(f"{train_path} holds no training instances")
    tc = cfg.train_config()
    model = EncoderModel.initialize(cfg.hash_dim, cfg.dim, cfg.seed)

    hook = None
    if cfg.eval_every > 0:
        _require(cfg.eval_queries)
        from .evaluation import split_half
        from .pipeline import evaluate_model

        val, _ = split_half(load_queries(cfg.eval_queries), cfg.seed)

        def hook(m):
            return evaluate_model(m, val, passages, cfg.lam, cfg.rerank_depth, cfg.metric_k).mrr_at_k

    t0 = time.perf_counter()
    result = train(model, instances, tc, queries, eval_hook=hook, eval_every=cfg.eval_every)
    ckpt = work / ARTIFACTS["checkpoint"]
    save_checkpoint(model, ckpt, tc, {"config_hash": cfg.digest(), "seed": cfg.seed})
    write_meta(ckpt, cfg, "checkpoint", CKPT_VERSION, best_step=result.best_step)
    losses = work / ARTIFACTS["losses"]
    write_loss_csv(result.history, losses)
    write_meta(losses, cfg, "loss_history")
    last = result.history[-1]
    print(
        f"trained {len(result.history)} steps in {time.perf_counter() - t0:.1f}s; "
        f"final loss {last['total']:.4f} (qp {last['l_qp']:.4f}, qpe {last['l_qpe']:.4f}, ent {last['l_ent']:.4f})"
    )
    return 0


def _load_dense(cfg: RunConfig) -> DenseIndex:
    path = cfg.path(ARTIFACTS["dense"])
    _require(path)
    meta = read_meta(path)
    expected = _model_source(cfg)
    if meta.get("source") != expected:
        raise UsageError(f"dense index {path} was built from {meta.get('source')!r}, not {expected!r}; rerun 'index'")
    return DenseIndex.from_mapping(read_embeddings(path))


def _eval_queries(cfg: RunConfig):
    _require(cfg.eval_queries)
    return ablate_entity_sources(load_queries(cfg.eval_queries), parse_sources(cfg.sources))


def _retrieve(cfg: RunConfig, model, dense, queries, lam: float, rerank_: bool = True):
    if not rerank_:
        from .scorer import mips_topk

        return {q.id: [(pid, s) for pid, s in mips_topk(dense, model.encode_query(q), cfg.rerank_depth)] for q in queries}, None
    results = retrieve(model, queries, dense, lam, cfg.rerank_depth)
    return as_scored(results), results


def cmd_retrieve(cfg: RunConfig, out: str | None = None, no_rerank: bool = False) -> int:
    work = _workdir(cfg)
    model = _load_model(cfg)
    dense = _load_dense(cfg)
    queries = _eval_queries(cfg)
    scored, results = _retrieve(cfg, model, dense, queries, cfg.lam, not no_rerank)
    run_path = Path(out) if out else work / ARTIFACTS["run"]
    write_run(scored, run_path, cfg.tag)
    write_meta(run_path, cfg, "run", 1, lam=cfg.lam, rerank=not no_rerank)
    if results is not None:
        side = run_path.with_name(run_path.stem + ".breakdown.jsonl")
        write_breakdowns(results, side)
        write_meta(side, cfg, "score_breakdown", 1, lam=cfg.lam)
    print(f"wrote {sum(len(v) for v in scored.values())} results for {len(scored)} queries to {run_path}")
    return 0


def _oracle_entities(cfg: RunConfig, passages, queries) -> dict[str, list[str]] | None:
    path = cfg.path(ARTIFACTS["sparse"])
    if not path.exists():
        return None
    index = InvertedIndex.load(path)
    out = {}
    for q in queries:
        out[q.id] = [s.entity.text for s in score_entities(index, passages, q, cfg.srr_depth, cfg.theta, cfg.stem) if s.is_oracle]
    return out


def cmd_eval(cfg: RunConfig, runs: Sequence[str]) -> int:
    _require(cfg.corpus, cfg.eval_queries)
    work = _workdir(cfg)
    runs = list(runs) or [str(work / ARTIFACTS["run"])]
    _require(*runs)
    passages = corpus_lookup(load_corpus(cfg.corpus))
    queries = load_queries(cfg.eval_queries)
    qmap = {q.id: q for q in queries}
    oracle = _oracle_entities(cfg, passages, queries)
    reports = [
        evaluate_run(read_run(r), qmap, passages, cfg.metric_k, oracle, name=Path(r).name, stem=cfg.stem) for r in runs
    ]
    report_path = work / ARTIFACTS["report"]
    report_path.write_text(reports_json(reports) + "\n", encoding="utf-8")
    write_meta(report_path, cfg, "metric_report")
    print(format_table(reports))
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    _require(cfg.corpus)
    work = _workdir(cfg)
    model = _load_model(cfg)
    dense = _load_dense(cfg)
    queries = _eval_queries(cfg)
    passages = corpus_lookup(load_corpus(cfg.corpus))
    qmap = {q.id: q for q in queries}
    oracle = _oracle_entities(cfg, passages, queries)
    try:
        lams = [float(x) for x in cfg.lambdas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad lambdas list {cfg.lambdas!r}") from None
    reports = []
    for lam in lams:
        if lam < 0:
            raise UsageError("lambdas must be non-negative")
        run = as_run(retrieve(model, queries, dense, lam, cfg.rerank_depth))
        reports.append(evaluate_run(run, qmap, passages, cfg.metric_k, oracle, name=f"lambda={lam:g}", stem=cfg.stem))
    out = work / ARTIFACTS["sweep"]
    out.write_text(reports_json(reports, with_rows=False) + "\n", encoding="utf-8")
    write_meta(out, cfg, "lambda_sweep")
    print(format_table(reports))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    g = p.add_argument_group("settings (override the config file)")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.name.upper())


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entityfocus", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("index", "build the sparse and dense indexes"),
        ("mine", "score entities and mine training instances"),
        ("train", "train the encoder"),
        ("retrieve", "MIPS + entity rerank, writes a TREC run"),
        ("eval", "compare run files"),
        ("sweep-lambda", "evaluate a range of rerank weights"),
        ("gen-synth", "write the synthetic dataset"),
    ):
        sp_ = sub.add_parser(name, help=help_)
        _add_config_flags(sp_)
        if name == "eval":
            sp_.add_argument("runs", nargs="*", help="TREC run files (default: the workdir run)")
        if name == "retrieve":
            sp_.add_argument("--out", help="run file path")
            sp_.add_argument("--no-rerank", action="store_true", help="write the MIPS order only")
        if name == "gen-synth":
            sp_.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = build_config(args.config, overrides)
        if cfg.threads < 1:
            raise UsageError("threads must be >= 1")
        if args.command == "gen-synth":
            return cmd_gen_synth(cfg, args.out)
        if args.command == "index":
            return cmd_index(cfg)
        if args.command == "mine":
            return cmd_mine(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args.out, args.no_rerank)
        if args.command == "eval":
            return cmd_eval(cfg, args.runs)
        if args.command == "sweep-lambda":
            return cmd_sweep(cfg)
    except (UsageError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
