"""Filtered ranking evaluation: hits@k, mean reciprocal rank, head/tail
breakdowns, per-relation diagnostics, and checkpoint comparison.

For each evaluated triple the gold entity is ranked against every entity
substituted into one side, after removing candidates that form a known
triple in any split (the gold itself is never removed). Only the triple
module's relation table is used. Candidate scoring streams over blocks of
evaluated triples so memory stays bounded; results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from kgforge.data import FilterSet, TripleStore, Vocab
from kgforge.models import EmbeddingTable, scores_against_all


class TiePolicy(str, Enum):
    OPTIMISTIC = "optimistic"
    PESSIMISTIC = "pessimistic"
    MEAN = "mean"

    @classmethod
    def parse(cls, name: str) -> "TiePolicy":
        aliases = {"opt": cls.OPTIMISTIC, "pess": cls.PESSIMISTIC, "mean": cls.MEAN}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown tie policy {name!r}; use opt, pess or mean") from None


class RankMode(str, Enum):
    BOTH = "both"
    TAIL_ONLY = "tail_only"

    @classmethod
    def parse(cls, name: str) -> "RankMode":
        key = name.strip().lower().replace("-", "_")
        if key in ("both", "both_sides"):
            return cls.BOTH
        if key in ("tail_only", "tail"):
            return cls.TAIL_ONLY
        raise ValueError(f"unknown rank mode {name!r}; use both or tail-only")


def _tie_adjust(ties: np.ndarray, tie: TiePolicy) -> np.ndarray:
    if tie is TiePolicy.OPTIMISTIC:
        return np.zeros_like(ties, dtype=np.float64)
    if tie is TiePolicy.PESSIMISTIC:
        return ties.astype(np.float64)
    return ties / 2.0


def _ranks_for_side(
    table: EmbeddingTable,
    triples: np.ndarray,
    side: str,
    filter_set: FilterSet,
    tie: TiePolicy,
    block_elems: int,
) -> np.ndarray:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    n_e = table.n_entities
    block = max(1, block_elems // max(1, n_e))
    out = np.empty(triples.shape[0], dtype=np.float64)
    for start in range(0, triples.shape[0], block):
        chunk = triples[start : start + block]
        scores = scores_against_all(table, chunk, side, "tri")
        rows = np.arange(chunk.shape[0])
        gold = chunk[:, 0] if side == "head" else chunk[:, 2]
        gold_scores = scores[rows, gold].copy()
        for i, (h, r, t) in enumerate(chunk):
            known = filter_set.heads_for(r, t) if side == "head" else filter_set.tails_for(h, r)
            scores[i, known] = -np.inf
        scores[rows, gold] = gold_scores
        greater = (scores > gold_scores[:, None]).sum(axis=1)
        ties = (scores == gold_scores[:, None]).sum(axis=1) - 1
        out[start : start + chunk.shape[0]] = 1.0 + greater + _tie_adjust(ties, tie)
    return out


def rank_triple(
    triple,
    side: str,
    table: EmbeddingTable,
    filter_set: FilterSet,
    tie: TiePolicy = TiePolicy.MEAN,
) -> float:
    """Filtered rank of the gold entity on one side of one triple.

    rank = 1 + #{strictly better candidates} + tie adjustment, where the
    adjustment is 0 (optimistic), #ties (pessimistic) or #ties / 2 (mean).
    """
    triple = np.asarray(triple, dtype=np.int64).reshape(1, 3)
    return float(_ranks_for_side(table, triple, side, filter_set, tie, block_elems=1 << 24)[0])


def metrics_from_ranks(ranks: np.ndarray) -> dict[str, float]:
    """hits@{1,3,10} and MRR of an array of ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    return {
        "hits1": float((ranks <= 1.0).mean()),
        "hits3": float((ranks <= 3.0).mean()),
        "hits10": float((ranks <= 10.0).mean()),
        "mrr": float((1.0 / ranks).mean()),
    }


@dataclass
class RelationStats:
    relation: int
    name: str
    count: int
    hits1_head: float | None
    hits1_tail: float


@dataclass
class EvalReport:
    """Metrics plus the raw per-triple ranks they were computed from."""

    mode: RankMode
    tie: TiePolicy
    n_triples: int
    metrics: dict[str, float]
    head: dict[str, float] | None
    tail: dict[str, float]
    relations: list[RelationStats]
    head_ranks: np.ndarray | None
    tail_ranks: np.ndarray

    def format_text(self) -> str:
        lines = [
            f"{'triples':<12}{self.n_triples}",
            f"{'mode':<12}{self.mode.value}",
            f"{'tie policy':<12}{self.tie.value}",
        ]
        for k in ("hits1", "hits3", "hits10", "mrr"):
            lines.append(f"{k:<12}{self.metrics[k]:.4f}")
        if self.head is not None:
            head = "  ".join(f"{k}={v:.4f}" for k, v in self.head.items())
            tail = "  ".join(f"{k}={v:.4f}" for k, v in self.tail.items())
            lines.append(f"{'head':<12}{head}")
            lines.append(f"{'tail':<12}{tail}")
        return "\n".join(lines)

    def metric_rows(self) -> list[tuple[str, float]]:
        rows = [(k, v) for k, v in self.metrics.items()]
        if self.head is not None:
            rows += [(f"head_{k}", v) for k, v in self.head.items()]
        rows += [(f"tail_{k}", v) for k, v in self.tail.items()]
        rows.append(("n_triples", float(self.n_triples)))
        return rows

    def relation_rows(self) -> list[tuple]:
        return [
            (s.relation, s.name, s.count, s.hits1_head, s.hits1_tail)
            for s in self.relations
        ]


def evaluate(
    store: TripleStore,
    table: EmbeddingTable,
    filter_set: FilterSet,
    mode: RankMode = RankMode.BOTH,
    tie: TiePolicy = TiePolicy.MEAN,
    vocab: Vocab | None = None,
    block_elems: int = 1 << 24,
) -> EvalReport:
    """Filtered ranking metrics over a split.

    In `both` mode every triple is ranked twice (head and tail side) and
    metrics average over 2n ranks; `tail_only` ranks tails alone.
    """
    if store.n == 0:
        raise ValueError(f"empty evaluation split: {store.split!r}")
    triples = store.triples
    tail_ranks = _ranks_for_side(table, triples, "tail", filter_set, tie, block_elems)
    head_ranks = None
    if mode is RankMode.BOTH:
        head_ranks = _ranks_for_side(table, triples, "head", filter_set, tie, block_elems)
        all_ranks = np.concatenate([head_ranks, tail_ranks])
    else:
        all_ranks = tail_ranks

    relations = []
    rel_col = triples[:, 1]
    for r in np.unique(rel_col):
        sel = rel_col == r
        relations.append(
            RelationStats(
                relation=int(r),
                name=vocab.relation_names[int(r)] if vocab else str(int(r)),
                count=int(sel.sum()),
                hits1_head=float((head_ranks[sel] <= 1.0).mean()) if head_ranks is not None else None,
                hits1_tail=float((tail_ranks[sel] <= 1.0).mean()),
            )
        )

    return EvalReport(
        mode=mode,
        tie=tie,
        n_triples=store.n,
        metrics=metrics_from_ranks(all_ranks),
        head=metrics_from_ranks(head_ranks) if head_ranks is not None else None,
        tail=metrics_from_ranks(tail_ranks),
        relations=relations,
        head_ranks=head_ranks,
        tail_ranks=tail_ranks,
    )


def per_relation_report(
    store: TripleStore,
    table: EmbeddingTable,
    filter_set: FilterSet,
    vocab: Vocab | None = None,
    tie: TiePolicy = TiePolicy.MEAN,
) -> list[RelationStats]:
    """hits@1 per relation, split by prediction direction."""
    return evaluate(store, table, filter_set, mode=RankMode.BOTH, tie=tie, vocab=vocab).relations


@dataclass
class RelationGain:
    relation: int
    name: str
    count: int
    correct_a: int
    correct_b: int
    gain: int


@dataclass
class Comparison:
    """Per-relation hits@1 movement between two evaluated checkpoints and
    the triples the second checkpoint newly ranks first."""

    gains: list[RelationGain]
    newly_first: list[tuple[str, int, int, int]]  # (side, h, r, t)

    def gain_rows(self) -> list[tuple]:
        return [(g.relation, g.name, g.count, g.correct_a, g.correct_b, g.gain) for g in self.gains]


def compare(
    store: TripleStore,
    report_a: EvalReport,
    report_b: EvalReport,
    vocab: Vocab | None = None,
) -> Comparison:
    """Diff two reports computed on the same split with the same settings."""
    if report_a.mode is not report_b.mode or report_a.tie is not report_b.tie:
        raise ValueError("reports were produced with different evaluation settings")
    if report_a.n_triples != store.n or report_b.n_triples != store.n:
        raise ValueError("reports do not match the given split")

    sides = [("tail", report_a.tail_ranks, report_b.tail_ranks)]
    if report_a.head_ranks is not None and report_b.head_ranks is not None:
        sides.append(("head", report_a.head_ranks, report_b.head_ranks))

    newly = []
    for side, ra, rb in sides:
        for i in np.nonzero((rb <= 1.0) & (ra > 1.0))[0]:
            h, r, t = (int(x) for x in store.triples[i])
            newly.append((side, h, r, t))

    gains = []
    rel_col = store.triples[:, 1]
    for r in np.unique(rel_col):
        sel = rel_col == r
        correct_a = sum(int((ra[sel] <= 1.0).sum()) for _, ra, _ in sides)
        correct_b = sum(int((rb[sel] <= 1.0).sum()) for _, _, rb in sides)
        gains.append(
            RelationGain(
                relation=int(r),
                name=vocab.relation_names[int(r)] if vocab else str(int(r)),
                count=int(sel.sum()),
                correct_a=correct_a,
                correct_b=correct_b,
                gain=correct_b - correct_a,
            )
        )
    gains.sort(key=lambda g: (-g.gain, -g.count, g.relation))
    return Comparison(gains=gains, newly_first=newly)
