"""Negative-example generation: uniform corruption and the biased sampler
driven by the pair-occurrence index.

With probability p_bias the replacement entity is drawn uniformly from the
entities observed in the corrupted slot with the triple's relation during
training; otherwise uniformly from the whole vocabulary. The relation is
never corrupted. The gold entity is not excluded from the pool by default;
set exclude_gold to resample accidental hits.

All draw sequences have fixed shape regardless of p_bias, so runs with
different bias probabilities consume identical rng streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kgforge.data import PairIndex

HEAD, TAIL = 0, 1
_SIDE_CODES = {"head": HEAD, "tail": TAIL}


@dataclass(frozen=True)
class NegSpec:
    """Negative-sampling configuration for one training run."""

    n_neg: int
    p_bias: float = 0.3
    seed: int = 0
    exclude_gold: bool = False
    alternate_sides: bool = False

    def __post_init__(self):
        if self.n_neg < 1:
            raise ValueError(f"n_neg must be >= 1, got {self.n_neg}")
        if not 0.0 <= self.p_bias <= 1.0:
            raise ValueError(f"p_bias must be in [0, 1], got {self.p_bias}")


@dataclass
class CorruptedBatch:
    """Per positive triple, n_neg corruptions plus which slot was resampled.

    negatives: (b, n_neg, 3) int64; sides: (b, n_neg) with 0 = head, 1 = tail.
    Exactly one entity slot per corruption is resampled (it may land on the
    original entity unless exclude_gold is set); relations are copied.
    """

    negatives: np.ndarray
    sides: np.ndarray


def _side_code(side: str) -> int:
    try:
        return _SIDE_CODES[side]
    except KeyError:
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}") from None


def _pick_sorted(flat: np.ndarray, off: np.ndarray, counts: np.ndarray, rel, u):
    """Index the per-relation candidate slices by a uniform draw u in [0, 1)."""
    if flat.size == 0:
        return np.zeros(np.shape(u), dtype=np.int64)
    pos = off[rel] + np.minimum((u * counts[rel]).astype(np.int64), np.maximum(counts[rel] - 1, 0))
    return flat[np.minimum(pos, flat.size - 1)]


def _mixture_replacements(
    rel: np.ndarray,
    sides: np.ndarray,
    coins: np.ndarray,
    uniform_draw: np.ndarray,
    bias_draw: np.ndarray,
    index: PairIndex,
    p_bias: float,
) -> np.ndarray:
    """Combine pre-drawn randomness into replacement entities.

    coins < p_bias selects the biased branch; an empty candidate set falls
    back to the uniform branch.
    """
    head_pick = _pick_sorted(index.heads_flat, index.heads_off, index.head_counts, rel, bias_draw)
    tail_pick = _pick_sorted(index.tails_flat, index.tails_off, index.tail_counts, rel, bias_draw)
    is_head = sides == HEAD
    candidate = np.where(is_head, head_pick, tail_pick)
    pool = np.where(is_head, index.head_counts[rel], index.tail_counts[rel])
    biased = (coins < p_bias) & (pool > 0)
    return np.where(biased, candidate, uniform_draw)


def sample_replacements(
    triple,
    side: str,
    index: PairIndex,
    p_bias: float,
    rng: np.random.Generator,
    n: int = 1,
) -> np.ndarray:
    """n replacement entities for corrupting `side` of `triple` under the
    mixture p_bias * U(candidates) + (1 - p_bias) * U(all entities)."""
    _h, r, _t = (int(x) for x in triple)
    code = _side_code(side)
    coins = rng.random(n)
    uniform_draw = rng.integers(0, index.n_entities, n)
    bias_draw = rng.random(n)
    rel = np.full(n, r, dtype=np.int64)
    sides = np.full(n, code, dtype=np.int64)
    return _mixture_replacements(rel, sides, coins, uniform_draw, bias_draw, index, p_bias)


def corrupt_uniform(triple, side: str, n_entities: int, rng: np.random.Generator):
    """Replace one slot with an entity drawn uniformly from the vocabulary."""
    h, r, t = (int(x) for x in triple)
    e = int(rng.integers(0, n_entities))
    return (e, r, t) if _side_code(side) == HEAD else (h, r, e)


def corrupt_biased(triple, side: str, index: PairIndex, spec: NegSpec, rng: np.random.Generator):
    """Replace one slot via the biased/uniform mixture of `spec.p_bias`."""
    h, r, t = (int(x) for x in triple)
    e = int(sample_replacements(triple, side, index, spec.p_bias, rng, n=1)[0])
    return (e, r, t) if _side_code(side) == HEAD else (h, r, e)


def make_batch_negatives(
    positives: np.ndarray,
    spec: NegSpec,
    index: PairIndex,
    rng: np.random.Generator,
) -> CorruptedBatch:
    """n_neg corruptions per positive; the corrupted side is chosen head or
    tail with probability 1/2 independently per negative (or alternated when
    spec.alternate_sides is set). Deterministic for a fixed rng state."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    b = positives.shape[0]
    shape = (b, spec.n_neg)
    if spec.alternate_sides:
        sides = np.broadcast_to(np.arange(spec.n_neg, dtype=np.int64) % 2, shape).copy()
    else:
        sides = rng.integers(0, 2, shape)
    coins = rng.random(shape)
    uniform_draw = rng.integers(0, index.n_entities, shape)
    bias_draw = rng.random(shape)

    rel = np.broadcast_to(positives[:, 1:2], shape)
    repl = _mixture_replacements(rel, sides, coins, uniform_draw, bias_draw, index, spec.p_bias)

    if spec.exclude_gold and index.n_entities > 1:
        gold = np.where(sides == HEAD, positives[:, 0:1], positives[:, 2:3])
        # bounded resampling; a biased pool of exactly the gold entity can
        # still escape through the uniform branch of a redraw
        for _ in range(100):
            clash = repl == gold
            if not clash.any():
                break
            k = int(clash.sum())
            repl[clash] = _mixture_replacements(
                rel[clash],
                sides[clash],
                rng.random(k),
                rng.integers(0, index.n_entities, k),
                rng.random(k),
                index,
                spec.p_bias,
            )

    negatives = np.repeat(positives[:, None, :], spec.n_neg, axis=1)
    is_head = sides == HEAD
    negatives[..., 0] = np.where(is_head, repl, negatives[..., 0])
    negatives[..., 2] = np.where(~is_head, repl, negatives[..., 2])
    return CorruptedBatch(negatives=negatives, sides=sides)


class NegativeSampler:
    """Owns one worker's rng stream; the pair index is shared read-only.

    Worker streams are seeded spec.seed + worker_id, so results are
    reproducible for a fixed worker count.
    """

    def __init__(self, spec: NegSpec, index: PairIndex, worker_id: int = 0):
        self.spec = spec
        self.index = index
        self.rng = np.random.default_rng(spec.seed + worker_id)

    def batch(self, positives: np.ndarray) -> CorruptedBatch:
        return make_batch_negatives(positives, self.spec, self.index, self.rng)
