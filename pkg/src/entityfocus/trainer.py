"""Contrastive training of the encoder with entity supervision.

Every query in a batch is scored against all ``2B`` passages of the batch
(its positive, its own retrieved negative, and every other instance's
positive and negative).  Three losses are combined:

* cross-entropy over the ``s_qp`` scores,
* cross-entropy over the entity-focused ``s_qpe`` scores (same candidates),
* binary cross-entropy on the query-entity scores against oracle labels.

Gradients are derived by hand; :func:`gradient_check` compares them with
central finite differences.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit, logsumexp

from .corpus import QueryExample
from .encoder import (
    HEADS,
    EncoderModel,
    compact_columns,
    entity_tokens,
    feature_matrix,
    layer_norm,
    layer_norm_backward,
    passage_tokens,
    query_tokens,
)
from .mining import TrainingInstance

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"EFCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 8
    batch_size: int = 8
    warmup_fraction: float = 0.1
    w_qp: float = 1.0
    w_qpe: float = 1.0
    w_ent: float = 1.0
    seed: int = 0
    lam: float = 1.0
    optimizer: str = "momentless"  # plain SGD; "adaptive" = AdamW
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("momentless", "adaptive"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# --------------------------------------------------------------------------
# losses


def contrastive_loss(score_pos: float, scores_neg: Sequence[float]) -> float:
    """-log softmax of the positive against the negatives."""
    neg = np.asarray(scores_neg, dtype=np.float64)
    if neg.size == 0:
        raise ValueError("need at least one negative")
    return float(logsumexp(np.concatenate([[score_pos], neg])) - score_pos)


def entity_bce(s_qe: Sequence[float], labels: Sequence[bool]) -> float:
    s = np.asarray(s_qe, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if s.size == 0:
        return 0.0
    return float(np.mean(-(y * log_expit(s) + (1.0 - y) * log_expit(-s))))


# --------------------------------------------------------------------------
# batches


class FeatureCache:
    """Memoized sparse feature rows, keyed by what they encode."""

    def __init__(self, hash_dim: int):
        self.hash_dim = hash_dim
        self._rows: dict[tuple, sp.csr_matrix] = {}

    def _get(self, key: tuple, tokens_fn) -> sp.csr_matrix:
        row = self._rows.get(key)
        if row is None:
            row = feature_matrix([tokens_fn()], self.hash_dim)
            self._rows[key] = row
        return row

    def query(self, q: QueryExample) -> sp.csr_matrix:
        return self._get(("q", q.id), lambda: query_tokens(q))

    def passage(self, p) -> sp.csr_matrix:
        return self._get(("p", p.id), lambda: passage_tokens(p))

    def entity(self, e, q: QueryExample) -> sp.csr_matrix:
        return self._get(("e", q.id, e.source, e.text), lambda: entity_tokens(e, q))


@dataclass
class Batch:
    query_ids: list[str]
    passage_ids: list[str]  # positives then negatives, 2B entries
    Xq: sp.csr_matrix
    Xp: sp.csr_matrix
    Xe: sp.csr_matrix
    owner: np.ndarray  # query row of each entity
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.query_ids)

    @classmethod
    def build(
        cls,
        instances: Sequence[TrainingInstance],
        queries: Mapping[str, QueryExample],
        hash_dim: int,
        cache: FeatureCache | None = None,
    ) -> Batch:
        if not instances:
            raise ValueError("empty batch")
        cache = cache or FeatureCache(hash_dim)
        qrows, prows, nrows, erows, owner, labels = [], [], [], [], [], []
        for i, inst in enumerate(instances):
            try:
                q = queries[inst.query_id]
            except KeyError:
                raise ValueError(f"instance references unknown query id {inst.query_id!r}") from None
            qrows.append(cache.query(q))
            prows.append(cache.passage(inst.positive))
            nrows.append(cache.passage(inst.negative))
            for e in inst.entities:
                erows.append(cache.entity(e, q))
                owner.append(i)
                labels.append(bool(e.oracle_label))
        Xe = sp.vstack(erows, format="csr") if erows else sp.csr_matrix((0, hash_dim))
        return cls(
            query_ids=[inst.query_id for inst in instances],
            passage_ids=[inst.positive.id for inst in instances] + [inst.negative.id for inst in instances],
            Xq=sp.vstack(qrows, format="csr"),
            Xp=sp.vstack(prows + nrows, format="csr"),
            Xe=Xe,
            owner=np.array(owner, dtype=np.int64),
            labels=np.array(labels, dtype=np.float64),
        )


@dataclass
class LossComponents:
    total: float
    l_qp: float
    l_qpe: float
    l_ent: float
    n_candidates: int


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    return np.exp(S - logsumexp(S, axis=1, keepdims=True))


def loss_and_grad(
    model: EncoderModel, batch: Batch, config: TrainConfig, grad: bool = True
) -> tuple[LossComponents, dict[str, np.ndarray] | None]:
    """Batch loss and, optionally, its gradient w.r.t. every parameter."""
    P, eps = model.params, model.eps
    B = batch.size
    n = 2 * B

    compact = {}

    def tower(name, X):
        cols, Xc = compact[name] = compact_columns(X)
        z = Xc @ P[f"{name}.W"][:, cols].T + P[f"{name}.b"]
        return layer_norm(z, eps)

    def head(name, F):
        return layer_norm(F @ P[f"{name}.W"].T + P[f"{name}.b"], eps)

    Fq, iq = tower("query", batch.Xq)
    Fp, ip = tower("passage", batch.Xp)

    # target of query row i is column i (its positive)
    target = np.zeros((B, n))
    target[np.arange(B), np.arange(B)] = 1.0

    Sqp = Fq @ Fp.T
    lqp_rows = logsumexp(Sqp, axis=1) - Sqp[np.arange(B), np.arange(B)]
    l_qp = float(lqp_rows.mean())

    M = batch.owner.size
    use_entities = M > 0 and (config.w_qpe != 0 or config.w_ent != 0)
    l_qpe = l_ent = 0.0
    if use_entities:
        Fe, ie = tower("entity", batch.Xe)
        Gq, jq = head("head_query", Fq)
        Gp, jp = head("head_passage", Fp)
        Ge, je = head("head_entity", Fe)

        own = np.zeros((B, M))
        own[batch.owner, np.arange(M)] = 1.0
        count = own.sum(axis=1)
        has = count > 0
        n_has = int(has.sum())

        s_qe = np.einsum("md,md->m", Gq[batch.owner], Ge)
        sig = expit(s_qe)
        wraw = own * sig
        tot = wraw.sum(axis=1)
        safe_tot = np.where(has, tot, 1.0)
        Wn = wraw / safe_tot[:, None]
        Spe = Gp @ Ge.T
        Sqpe = Wn @ Spe.T
        lqpe_rows = logsumexp(Sqpe, axis=1) - Sqpe[np.arange(B), np.arange(B)]
        l_qpe = float(lqpe_rows[has].sum() / n_has)

        y = batch.labels
        bce = -(y * log_expit(s_qe) + (1.0 - y) * log_expit(-s_qe))
        safe_count = np.where(has, count, 1.0)
        lent_rows = (own @ bce) / safe_count
        l_ent = float(lent_rows[has].sum() / n_has)

    total = config.w_qp * l_qp + config.w_qpe * l_qpe + config.w_ent * l_ent
    comps = LossComponents(total, l_qp, l_qpe, l_ent, n)
    if not grad:
        return comps, None

    g: dict[str, np.ndarray] = {}
    dSqp = config.w_qp / B * (_softmax_rows(Sqp) - target)
    dFq = dSqp @ Fp
    dFp = dSqp.T @ Fq

    if use_entities:
        dSqpe = config.w_qpe / n_has * (_softmax_rows(Sqpe) - target)
        dSqpe[~has] = 0.0
        dWn = dSqpe @ Spe
        dSpe = dSqpe.T @ Wn
        dW = (dWn - (dWn * Wn).sum(axis=1, keepdims=True)) / safe_tot[:, None]
        dsig = (dW * own).sum(axis=0)
        ds_qe = dsig * sig * (1.0 - sig)
        ds_qe += config.w_ent / n_has * (sig - y) / safe_count[batch.owner]

        dGq = np.zeros_like(Gq)
        np.add.at(dGq, batch.owner, ds_qe[:, None] * Ge)
        dGe = ds_qe[:, None] * Gq[batch.owner] + dSpe.T @ Gp
        dGp = dSpe @ Ge

        dFe = np.zeros_like(Fe)
        for name, F, G, jinv, dG in (
            ("head_query", Fq, Gq, jq, dGq),
            ("head_passage", Fp, Gp, jp, dGp),
            ("head_entity", Fe, Ge, je, dGe),
        ):
            dH = layer_norm_backward(dG, G, jinv)
            g[f"{name}.W"] = dH.T @ F
            g[f"{name}.b"] = dH.sum(axis=0)
            dF = dH @ P[f"{name}.W"]
            if name == "head_query":
                dFq = dFq + dF
            elif name == "head_passage":
                dFp = dFp + dF
            else:
                dFe = dF
        towers = (("query", Fq, iq, dFq), ("passage", Fp, ip, dFp), ("entity", Fe, ie, dFe))
    else:
        for name in HEADS + ("entity",):
            g[f"{name}.W"] = np.zeros(P[f"{name}.W"].shape)
            g[f"{name}.b"] = np.zeros(P[f"{name}.b"].shape)
        towers = (("query", Fq, iq, dFq), ("passage", Fp, ip, dFp))

    for name, F, inv, dF in towers:
        dZ = layer_norm_backward(dF, F, inv)
        # only columns hit by some feature get a nonzero gradient
        cols, Xc = compact[name]
        dW = np.zeros(P[f"{name}.W"].shape)
        dW[:, cols] = dZ.T @ Xc
        g[f"{name}.W"] = dW
        g[f"{name}.b"] = dZ.sum(axis=0)
    return comps, g


def batch_loss(model: EncoderModel, batch: Batch, config: TrainConfig) -> LossComponents:
    return loss_and_grad(model, batch, config, grad=False)[0]


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, int]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def active_coordinates(model: EncoderModel, batch: Batch) -> list[tuple[str, int]]:
    """Coordinates whose perturbation can change the loss for ``batch``."""
    coords = []
    for name, X in (("query", batch.Xq), ("passage", batch.Xp), ("entity", batch.Xe)):
        cols = np.unique(X.indices)
        W = model.params[f"{name}.W"]
        for r in range(W.shape[0]):
            coords.extend((f"{name}.W", r * W.shape[1] + int(c)) for c in cols)
        coords.extend((f"{name}.b", i) for i in range(model.dim))
    for name in HEADS:
        coords.extend((f"{name}.W", i) for i in range(model.dim * model.dim))
        coords.extend((f"{name}.b", i) for i in range(model.dim))
    return coords


def gradient_check(
    model: EncoderModel,
    batch: Batch,
    config: TrainConfig,
    h: float = 1e-4,
    n_coords: int = 256,
    seed: int = 0,
    tolerance: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
    coords: Sequence[tuple[str, int]] | None = None,
) -> GradCheckResult:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  ``analytic`` may
    be supplied to check a gradient other than the one computed here.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        analytic = loss_and_grad(model, batch, config)[1]
    if coords is None:
        pool = active_coordinates(model, batch)
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(pool), size=min(n_coords, len(pool)), replace=False)
        coords = [pool[i] for i in sorted(pick)]
    worst, worst_err = ("", -1), 0.0
    for name, idx in coords:
        flat = model.params[name].reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        up = batch_loss(model, batch, config).total
        flat[idx] = old - h
        down = batch_loss(model, batch, config).total
        flat[idx] = old
        num = (up - down) / (2 * h)
        ana = float(analytic[name].reshape(-1)[idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        if err > worst_err or worst[1] < 0:
            worst, worst_err = (name, idx), max(err, worst_err)
    return GradCheckResult(worst_err, len(coords), worst, tolerance)


# --------------------------------------------------------------------------
# optimisation


class Optimizer:
    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.t = 0
        if config.optimizer == "adaptive":
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.config
        self.t += 1
        if lr == 0.0:
            return
        if c.optimizer == "momentless":
            for k, g in grads.items():
                params[k] -= lr * g
            return
        b1, b2 = c.beta1, c.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, g in grads.items():
            p, m, v = params[k], self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            tmp = g * g
            tmp *= 1.0 - b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / math.sqrt(corr2)
            tmp += c.adam_eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / corr1
            p *= 1.0 - lr * c.weight_decay
            p -= tmp


def learning_rate_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then flat."""
    warm = int(config.warmup_fraction * total_steps)
    if warm <= 0 or step >= warm:
        return config.learning_rate
    return config.learning_rate * (step + 1) / warm


@dataclass
class TrainResult:
    model: EncoderModel
    history: list[dict] = field(default_factory=list)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    best_step: int | None = None

    def epoch_means(self, steps_per_epoch: int) -> list[float]:
        totals = [h["total"] for h in self.history]
        return [
            float(np.mean(totals[i : i + steps_per_epoch])) for i in range(0, len(totals), steps_per_epoch)
        ]


def train(
    model: EncoderModel,
    instances: Sequence[TrainingInstance],
    config: TrainConfig,
    queries: Mapping[str, QueryExample],
    eval_hook: Callable[[EncoderModel], float] | None = None,
    eval_every: int = 0,
) -> TrainResult:
    """Train ``model`` in place.

    With ``eval_hook`` set, the model is evaluated every ``eval_every``
    steps and at the end; the parameters with the highest score are kept.
    """
    if not instances:
        raise ValueError("no training instances")
    rng = np.random.default_rng(config.seed)
    cache = FeatureCache(model.hash_dim)
    bs = config.batch_size
    steps_per_epoch = math.ceil(len(instances) / bs)
    total_steps = steps_per_epoch * config.epochs
    opt = Optimizer(model.params, config)
    result = TrainResult(model)
    best_score, best_params = -math.inf, None

    def evaluate(step):
        nonlocal best_score, best_params
        score = eval_hook(model)
        result.evaluations.append((step, score))
        if score > best_score:
            best_score, best_params = score, {k: v.copy() for k, v in model.params.items()}
            result.best_step = step

    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(instances))
        for start in range(0, len(order), bs):
            batch = Batch.build([instances[i] for i in order[start : start + bs]], queries, model.hash_dim, cache)
            comps, grads = loss_and_grad(model, batch, config)
            if not math.isfinite(comps.total):
                raise FloatingPointError(
                    f"non-finite loss at step {step}: qp={comps.l_qp} qpe={comps.l_qpe} ent={comps.l_ent}"
                )
            lr = learning_rate_at(step, total_steps, config)
            opt.step(model.params, grads, lr)
            result.history.append(
                {"step": step, "total": comps.total, "l_qp": comps.l_qp, "l_qpe": comps.l_qpe,
                 "l_ent": comps.l_ent, "lr": lr}
            )
            step += 1
            if eval_hook is not None and eval_every > 0 and step % eval_every == 0:
                evaluate(step)
    if eval_hook is not None:
        if not result.evaluations or result.evaluations[-1][0] != step:
            evaluate(step)
        for k, v in best_params.items():
            model.params[k][...] = v
    return result


# --------------------------------------------------------------------------
# checkpoints and loss logs


def save_checkpoint(model: EncoderModel, path: str | Path, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    echo = {
        "hash_dim": model.hash_dim,
        "dim": model.dim,
        "eps": model.eps,
        "train": asdict(config) if config is not None else None,
        **(extra or {}),
    }
    blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    names = sorted(model.params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[EncoderModel, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", data, 8)
    echo = json.loads(data[12 : 12 + n].decode("utf-8"))
    off = 12 + n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return EncoderModel(echo["hash_dim"], echo["dim"], params, echo["eps"]), echo


def write_loss_csv(history: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_qp", "L_qpe", "L_ent", "lr"])
        for h in history:
            w.writerow([h["step"], repr(h["l_qp"]), repr(h["l_qpe"]), repr(h["l_ent"]), repr(h["lr"])])
