"""Losses, the joint loss combination, sparse Adam, the epoch loop, and
early stopping on validation hits@10.

The triple module is trained with the negative log-likelihood of a sampled
softmax (or a full softmax over all entities); the pair-occurrence module
with binary cross entropy against pair labels. The two losses combine as
loss_total = loss_tri + alpha * loss_bi. Per-batch losses are means over
examples so the learning rate is robust to batch size.

Gradients are row-sparse: each parameter's gradient is a pair of
(row_ids, row_values) and Adam touches only those rows.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from kgforge.data import KGDataset, PairIndex
from kgforge.models import EmbeddingTable, ModelKind, grad_score, init_table, score_vectors, scores_against_all
from kgforge.sampling import NegSpec, NegativeSampler

DEFAULT_FULL_SOFTMAX_BUDGET = 150_000_000


class ConfigError(ValueError):
    """Invalid training configuration."""


class MemoryBudgetError(RuntimeError):
    """Full softmax would exceed the configured score-matrix budget."""


class LossMode(str, Enum):
    SAMPLED = "sampled_softmax"
    FULL = "full_softmax"

    @classmethod
    def parse(cls, name: str) -> "LossMode":
        aliases = {
            "sampled": cls.SAMPLED,
            "sampled_softmax": cls.SAMPLED,
            "full": cls.FULL,
            "full_softmax": cls.FULL,
        }
        try:
            return aliases[name.strip().lower()]
        except KeyError:
            raise ConfigError(f"unknown loss mode {name!r}; use 'sampled' or 'full'") from None


@dataclass
class TrainConfig:
    """Everything a training run needs; serializable as key=value lines."""

    model: ModelKind = ModelKind.COMPLEX
    joint: bool = False
    dim: int = 200
    batch_size: int = 1000
    n_neg: int = 100
    alpha: float = 0.5
    p_bias: float = 0.3
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 500
    eval_every: int = 5
    patience: int = 4
    loss_mode: LossMode = LossMode.SAMPLED
    seed: int = 0
    exclude_gold: bool = False
    alternate_sides: bool = False
    reg_lambda: float = 0.0
    float32: bool = False
    full_softmax_budget: int = DEFAULT_FULL_SOFTMAX_BUDGET
    debug_checks: bool = False

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.p_bias <= 1.0:
            raise ConfigError(f"p_bias must be in [0, 1], got {self.p_bias}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.n_neg < 1:
            raise ConfigError(f"n_neg must be >= 1, got {self.n_neg}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.reg_lambda < 0:
            raise ConfigError(f"reg_lambda must be >= 0, got {self.reg_lambda}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def to_file(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "TrainConfig":
        return cls().merged(values)

    def merged(self, values: dict) -> "TrainConfig":
        """New config with the given keys replaced; values may be strings."""
        known = {f.name: f for f in fields(self)}
        out = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = _coerce_field(known[key], raw)
        return replace(self, **out)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls().merged(parse_kv_file(path))


def parse_kv_file(path) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce_field(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("bool", bool):
            lowered = raw.strip().lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if f.name == "model":
            return ModelKind.parse(raw)
        if f.name == "loss_mode":
            return LossMode.parse(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
    return raw


@dataclass
class AdamState:
    """First and second moment estimates mirroring the parameter tables."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_table(cls, table: EmbeddingTable) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in table.params().items()},
            v={k: np.zeros_like(p) for k, p in table.params().items()},
        )


@dataclass
class BatchLosses:
    loss_tri: float
    loss_bi: float
    loss_total: float


def loss_tri_sampled_softmax(scores: np.ndarray):
    """Softmax NLL of the positive (column 0) against its corruptions.

    Accepts one row (1 + n_neg,) or a batch (b, 1 + n_neg). Returns the
    per-row loss and per-row gradient softmax(scores) - onehot(0); log-sum-
    exp uses max subtraction. A scalar loss is returned for a single row.
    """
    scores = np.asarray(scores, dtype=np.float64)
    single = scores.ndim == 1
    rows = scores[None, :] if single else scores
    bad = ~np.isfinite(rows)
    if bad.any():
        b, k = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite score for triple index ({b}, {k})")
    m = rows.max(axis=-1, keepdims=True)
    z = np.exp(rows - m)
    denom = z.sum(axis=-1, keepdims=True)
    loss = (m[..., 0] + np.log(denom[..., 0])) - rows[..., 0]
    grads = z / denom
    grads[..., 0] -= 1.0
    if single:
        return float(loss[0]), grads[0]
    return loss, grads


def loss_bi_bce(score, label):
    """Binary cross entropy on a raw score: softplus(score) - label * score,
    with gradient sigmoid(score) - label. Elementwise on arrays."""
    s = np.asarray(score, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = np.logaddexp(0.0, s) - y * s
    grad = expit(s) - y
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def loss_joint(loss_tri: float, loss_bi: float, alpha: float) -> float:
    """Weighted sum loss_tri + alpha * loss_bi."""
    return loss_tri + alpha * loss_bi


def _reduce_rows(ids: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum value rows that share an id; returns (unique_ids, summed_rows)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return ids, vals.reshape(0, vals.shape[-1])
    uniq, inv = np.unique(ids, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    starts = np.searchsorted(inv[order], np.arange(uniq.size))
    return uniq, np.add.reduceat(vals[order], starts, axis=0)


def sampled_batch_grads(
    table: EmbeddingTable,
    batch: np.ndarray,
    alpha: float = 0.0,
    pairs: PairIndex | None = None,
    reg_lambda: float = 0.0,
) -> tuple[BatchLosses, dict]:
    """Losses and row-sparse gradients for one contrastive batch.

    batch: (b, 1 + n_neg, 3) with the positive triple in column 0. When
    alpha > 0 the pair module scores the same triples with its own relation
    table against pair-occurrence labels. Gradients are means over the
    batch (the BCE over all scored triples), keyed by parameter name.
    """
    batch = np.asarray(batch, dtype=np.int64)
    b, k, _ = batch.shape
    flat = batch.reshape(-1, 3)
    h_ids, r_ids, t_ids = flat[:, 0], flat[:, 1], flat[:, 2]
    H = table.entity[h_ids]
    T = table.entity[t_ids]
    R = table.relation_tri[r_ids]

    scores = score_vectors(table.kind, H, R, T).reshape(b, k)
    row_losses, softmax_grads = loss_tri_sampled_softmax(scores)
    l_tri = float(np.mean(row_losses))
    w = (softmax_grads / b).reshape(-1, 1)
    gh, gr, gt = grad_score(table.kind, H, R, T)

    ent_ids = [h_ids, t_ids]
    ent_vals = [w * gh, w * gt]
    rel_ids = [r_ids]
    rel_vals = [w * gr]
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    l_bi = 0.0
    if alpha > 0:
        if table.relation_bi is None:
            raise ValueError("alpha > 0 needs a joint table with a pair-module relation table")
        if pairs is None:
            raise ValueError("alpha > 0 needs the pair-occurrence index for labels")
        table.bi_score_calls += 1
        Rb = table.relation_bi[r_ids]
        s_bi = score_vectors(table.kind, H, Rb, T)
        y = pairs.label_batch(flat).astype(np.float64)
        bce, bce_grad = loss_bi_bce(s_bi, y)
        l_bi = float(bce.mean())
        wb = (bce_grad * (alpha / s_bi.size)).reshape(-1, 1)
        bh, br, bt = grad_score(table.kind, H, Rb, T)
        ent_ids += [h_ids, t_ids]
        ent_vals += [wb * bh, wb * bt]
        grads["relation_bi"] = _reduce_rows(r_ids, wb * br)

    reg_term = 0.0
    if reg_lambda > 0:
        pos = batch[:, 0, :]
        coef = 2.0 * reg_lambda / b
        Hp = table.entity[pos[:, 0]]
        Tp = table.entity[pos[:, 2]]
        Rp = table.relation_tri[pos[:, 1]]
        reg_term = reg_lambda * float(((Hp * Hp).sum() + (Tp * Tp).sum() + (Rp * Rp).sum()) / b)
        ent_ids += [pos[:, 0], pos[:, 2]]
        ent_vals += [coef * Hp, coef * Tp]
        rel_ids.append(pos[:, 1])
        rel_vals.append(coef * Rp)

    grads["entity"] = _reduce_rows(np.concatenate(ent_ids), np.concatenate(ent_vals))
    grads["relation_tri"] = _reduce_rows(np.concatenate(rel_ids), np.concatenate(rel_vals))
    l_total = loss_joint(l_tri, l_bi, alpha) + reg_term
    return BatchLosses(l_tri, l_bi, l_total), grads


def full_softmax_direction(table: EmbeddingTable, positives: np.ndarray, side: str, which: str = "tri"):
    """Softmax NLL of the gold entity against all entities on one side.

    Returns (nll per positive, softmax-minus-onehot weights, query vectors).
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    scores, q = scores_against_all(table, positives, side, which, return_queries=True)
    bad = ~np.isfinite(scores)
    if bad.any():
        i, _ = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite candidate score for triple index {i}")
    gold = positives[:, 0] if side == "head" else positives[:, 2]
    rows = np.arange(scores.shape[0])
    m = scores.max(axis=1, keepdims=True)
    z = np.exp(scores - m)
    denom = z.sum(axis=1, keepdims=True)
    nll = (m[:, 0] + np.log(denom[:, 0])) - scores[rows, gold]
    weights = z / denom
    weights[rows, gold] -= 1.0
    return nll, weights, q


def full_softmax_batch_grads(
    table: EmbeddingTable,
    positives: np.ndarray,
    alpha: float = 0.0,
    pairs: PairIndex | None = None,
    budget: int = DEFAULT_FULL_SOFTMAX_BUDGET,
) -> tuple[BatchLosses, dict]:
    """Full-softmax losses and gradients for a batch of positive triples.

    Each positive contributes the NLL of its tail against every entity and,
    symmetrically, of its head; the two directions are averaged. With
    alpha > 0 the pair module scores the same all-entity candidates with
    BCE against pair labels. Refuses batches whose score matrix would
    exceed `budget` elements.
    """
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    b = positives.shape[0]
    n_e = table.n_entities
    if b * n_e > budget:
        raise MemoryBudgetError(
            f"full softmax needs a {b} x {n_e} score matrix "
            f"({b * n_e} elements > budget {budget}); lower the batch size "
            "or switch to sampled softmax"
        )

    r_ids = positives[:, 1]
    entity_grad = np.zeros((n_e, table.entity.shape[1]), dtype=np.float64)
    row_ids: list[np.ndarray] = []
    row_vals: list[np.ndarray] = []
    rel_vals: list[np.ndarray] = []
    nll_both = np.zeros(b, dtype=np.float64)

    for side in ("tail", "head"):
        nll, weights, q = full_softmax_direction(table, positives, side)
        nll_both += nll
        weights *= 1.0 / (2.0 * b)
        entity_grad += weights.T @ q
        pseudo = weights @ table.entity
        R = table.relation_tri[r_ids]
        if side == "tail":
            gh, gr, _ = grad_score(table.kind, table.entity[positives[:, 0]], R, pseudo)
            row_ids.append(positives[:, 0])
            row_vals.append(gh)
        else:
            _, gr, gt = grad_score(table.kind, pseudo, R, table.entity[positives[:, 2]])
            row_ids.append(positives[:, 2])
            row_vals.append(gt)
        rel_vals.append(gr)
    l_tri = float(nll_both.mean() / 2.0)

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    l_bi = 0.0
    if alpha > 0:
        if table.relation_bi is None:
            raise ValueError("alpha > 0 needs a joint table with a pair-module relation table")
        if pairs is None:
            raise ValueError("alpha > 0 needs the pair-occurrence index for labels")
        rel_bi_vals = []
        bce_sum = 0.0
        scale = alpha / (2.0 * b * n_e)
        for side in ("tail", "head"):
            s_bi, q_bi = scores_against_all(table, positives, side, "bi", return_queries=True)
            if side == "tail":
                flags = pairs.has_head_batch(r_ids, positives[:, 0])
                masks = np.stack([pairs.tail_mask(int(r)) for r in r_ids])
            else:
                flags = pairs.has_tail_batch(r_ids, positives[:, 2])
                masks = np.stack([pairs.head_mask(int(r)) for r in r_ids])
            y = (flags[:, None] & masks).astype(np.float64)
            bce, bce_grad = loss_bi_bce(s_bi, y)
            bce_sum += float(bce.sum())
            wb = bce_grad * scale
            entity_grad += wb.T @ q_bi
            pseudo = wb @ table.entity
            Rb = table.relation_bi[r_ids]
            if side == "tail":
                gh, gr, _ = grad_score(table.kind, table.entity[positives[:, 0]], Rb, pseudo)
                row_ids.append(positives[:, 0])
                row_vals.append(gh)
            else:
                _, gr, gt = grad_score(table.kind, pseudo, Rb, table.entity[positives[:, 2]])
                row_ids.append(positives[:, 2])
                row_vals.append(gt)
            rel_bi_vals.append(gr)
        l_bi = bce_sum / (2.0 * b * n_e)
        grads["relation_bi"] = _reduce_rows(
            np.concatenate([r_ids, r_ids]), np.concatenate(rel_bi_vals)
        )

    sparse_ids, sparse_vals = _reduce_rows(np.concatenate(row_ids), np.concatenate(row_vals))
    entity_grad[sparse_ids] += sparse_vals
    grads["entity"] = (np.arange(n_e, dtype=np.int64), entity_grad)
    grads["relation_tri"] = _reduce_rows(
        np.concatenate([r_ids, r_ids]), np.concatenate(rel_vals)
    )
    return BatchLosses(l_tri, l_bi, loss_joint(l_tri, l_bi, alpha)), grads


def loss_full_softmax(table: EmbeddingTable, positives: np.ndarray, budget: int = DEFAULT_FULL_SOFTMAX_BUDGET):
    """Full-softmax NLL of a batch of positives and its gradients, including
    the dense gradient over all candidate entities."""
    losses, grads = full_softmax_batch_grads(table, positives, 0.0, None, budget)
    return losses.loss_tri, grads


def adam_step(
    table: EmbeddingTable,
    state: AdamState,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step applied sparsely.

    Only rows named in `grads` have their moments and parameters updated;
    the global step t increments once per call.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    params = table.params()
    for name, (ids, g) in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter table {name!r}")
        m = state.m[name]
        v = state.v[name]
        m_rows = beta1 * m[ids] + (1.0 - beta1) * g
        v_rows = beta2 * v[ids] + (1.0 - beta2) * (g * g)
        m[ids] = m_rows
        v[ids] = v_rows
        update = lr * (m_rows / bc1) / (np.sqrt(v_rows / bc2) + eps)
        if not np.all(np.isfinite(update)):
            raise FloatingPointError(
                f"non-finite Adam update for {name!r} at step {state.t} "
                f"(max |grad| = {np.abs(g).max():.3e})"
            )
        param = params[name]
        param[ids] = (param[ids] - update).astype(param.dtype, copy=False)


@dataclass
class EpochStats:
    epoch: int
    loss_tri: float
    loss_bi: float
    loss_total: float
    seconds: float
    val_hits10: float | None = None
    val_improved: bool | None = None


@dataclass
class TrainLog:
    """Per-epoch losses and the validation metric trail."""

    epochs: list[EpochStats] = field(default_factory=list)

    TSV_HEADER = "epoch\tloss_tri\tloss_bi\tloss_total\tseconds\tval_hits10"

    @staticmethod
    def tsv_row(entry: EpochStats) -> str:
        val = "" if entry.val_hits10 is None else f"{entry.val_hits10:.6f}"
        return (
            f"{entry.epoch}\t{entry.loss_tri:.6f}\t{entry.loss_bi:.6f}"
            f"\t{entry.loss_total:.6f}\t{entry.seconds:.3f}\t{val}"
        )

    def to_tsv(self) -> str:
        return "\n".join([self.TSV_HEADER] + [self.tsv_row(e) for e in self.epochs]) + "\n"


def train_epoch(
    ds: KGDataset,
    table: EmbeddingTable,
    config: TrainConfig,
    sampler: NegativeSampler,
    state: AdamState,
    shuffle_rng: np.random.Generator,
    epoch: int,
) -> EpochStats:
    """One pass over a random permutation of the training triples.

    Per batch: sample corruptions, score the triple module, and when joint
    score the same positives and corruptions with the pair module; combine
    losses and take one sparse Adam step. The last partial batch is kept.
    """
    t0 = time.perf_counter()
    n = ds.train.n
    perm = shuffle_rng.permutation(n)
    alpha = config.alpha if config.joint else 0.0
    sum_tri = sum_bi = sum_total = 0.0
    for start in range(0, n, config.batch_size):
        positives = ds.train.triples[perm[start : start + config.batch_size]]
        if config.loss_mode is LossMode.SAMPLED:
            corr = sampler.batch(positives)
            batch = np.concatenate([positives[:, None, :], corr.negatives], axis=1)
            losses, grads = sampled_batch_grads(table, batch, alpha, ds.pairs, config.reg_lambda)
        else:
            losses, grads = full_softmax_batch_grads(
                table, positives, alpha, ds.pairs, config.full_softmax_budget
            )
        adam_step(table, state, grads, config.lr, config.beta1, config.beta2, config.eps)
        if config.debug_checks:
            table.check_finite()
        b = positives.shape[0]
        sum_tri += losses.loss_tri * b
        sum_bi += losses.loss_bi * b
        sum_total += losses.loss_total * b
    return EpochStats(
        epoch=epoch,
        loss_tri=sum_tri / n,
        loss_bi=sum_bi / n,
        loss_total=sum_total / n,
        seconds=time.perf_counter() - t0,
    )


def fit(ds: KGDataset, config: TrainConfig, log_stream=None) -> tuple[EmbeddingTable, TrainLog]:
    """Train up to max_epochs with early stopping.

    Every eval_every epochs the triple module alone is evaluated with
    filtered ranking on the validation split; the best checkpoint by
    hits@10 is kept, and training stops after `patience` consecutive
    non-improving evaluations. Returns the best table (the final one if no
    evaluation ever ran) and the log.
    """
    from kgforge.evaluation import RankMode, TiePolicy, evaluate

    config.validate()
    will_eval = config.max_epochs >= config.eval_every
    if will_eval and ds.valid.n == 0:
        raise ValueError("validation split is empty; early stopping needs validation triples")

    dtype = np.float32 if config.float32 else np.float64
    table = init_table(
        config.model,
        ds.vocab.n_entities,
        ds.vocab.n_relations,
        config.dim,
        config.seed,
        joint=config.joint,
        dtype=dtype,
    )
    state = AdamState.for_table(table)
    spec = NegSpec(
        n_neg=config.n_neg,
        p_bias=config.p_bias,
        seed=config.seed,
        exclude_gold=config.exclude_gold,
        alternate_sides=config.alternate_sides,
    )
    sampler = NegativeSampler(spec, ds.pairs, worker_id=0)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    log = TrainLog()
    if log_stream is not None:
        log_stream.write(TrainLog.TSV_HEADER + "\n")
        log_stream.flush()

    best_table: EmbeddingTable | None = None
    best_hits10 = -np.inf
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        entry = train_epoch(ds, table, config, sampler, state, shuffle_rng, epoch)
        stop = False
        if epoch % config.eval_every == 0:
            report = evaluate(
                ds.valid, table, ds.filter_set, mode=RankMode.BOTH, tie=TiePolicy.MEAN
            )
            entry.val_hits10 = report.metrics["hits10"]
            entry.val_improved = entry.val_hits10 > best_hits10
            if entry.val_improved:
                best_hits10 = entry.val_hits10
                best_table = table.copy()
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    stop = True
        log.epochs.append(entry)
        if log_stream is not None:
            log_stream.write(TrainLog.tsv_row(entry) + "\n")
            log_stream.flush()
        if stop:
            break
    if best_table is None:
        best_table = table
    return best_table, log
