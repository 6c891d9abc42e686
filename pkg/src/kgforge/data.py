"""Dataset ingestion: vocabularies, encoded triple stores, the relation
pair-occurrence index, and the known-triple filter used by ranking.

Input files are UTF-8 text named train.txt / valid.txt / test.txt, one
triple per line as head<TAB>relation<TAB>tail. LF and CRLF line endings are
both accepted. All structures here are immutable after construction and
safe for concurrent reads.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

_SPLIT_FILES = (("train", "train.txt"), ("valid", "valid.txt"), ("test", "test.txt"))


class DatasetError(Exception):
    """Malformed dataset content."""


class DatasetNotFoundError(DatasetError):
    """Missing dataset directory or split file."""


class Vocab:
    """Dense integer ids for entity and relation names.

    Ids are assigned in first-seen order while scanning train, then valid,
    then test, so every split is representable and ids are stable for a
    fixed directory. Names are opaque strings; no normalization happens
    unless the loader's lowercase flag is set.
    """

    __slots__ = ("entity_names", "relation_names", "entity_ids", "relation_ids")

    def __init__(self, entity_names, relation_names):
        self.entity_names = list(entity_names)
        self.relation_names = list(relation_names)
        self.entity_ids = {name: i for i, name in enumerate(self.entity_names)}
        self.relation_ids = {name: i for i, name in enumerate(self.relation_names)}
        if len(self.entity_ids) != len(self.entity_names):
            raise DatasetError("duplicate entity names in vocabulary")
        if len(self.relation_ids) != len(self.relation_names):
            raise DatasetError("duplicate relation names in vocabulary")

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def encode(self, head: str, relation: str, tail: str) -> tuple[int, int, int]:
        return (
            self.entity_ids[head],
            self.relation_ids[relation],
            self.entity_ids[tail],
        )

    def decode(self, h: int, r: int, t: int) -> tuple[str, str, str]:
        return (self.entity_names[h], self.relation_names[r], self.entity_names[t])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocab)
            and self.entity_names == other.entity_names
            and self.relation_names == other.relation_names
        )

    def __repr__(self) -> str:
        return f"Vocab({self.n_entities} entities, {self.n_relations} relations)"


class TripleStore:
    """Integer-encoded triples of one split, shape (n, 3): head, relation, tail."""

    __slots__ = ("triples", "split")

    def __init__(self, triples: np.ndarray, split: str):
        self.triples = np.ascontiguousarray(triples, dtype=np.int64).reshape(-1, 3)
        self.triples.setflags(write=False)
        self.split = split

    @property
    def n(self) -> int:
        return self.triples.shape[0]

    def __len__(self) -> int:
        return self.n

    def decode(self, vocab: Vocab) -> list[tuple[str, str, str]]:
        return [vocab.decode(h, r, t) for h, r, t in self.triples]

    def __repr__(self) -> str:
        return f"TripleStore({self.split}, {self.n} triples)"


def _member(keys: np.ndarray, query) -> np.ndarray:
    """Vectorized membership of `query` in the sorted int64 array `keys`."""
    query = np.asarray(query, dtype=np.int64)
    if keys.size == 0:
        return np.zeros(query.shape, dtype=bool)
    pos = np.searchsorted(keys, query)
    clipped = np.minimum(pos, keys.size - 1)
    return (pos < keys.size) & (keys[clipped] == query)


class PairIndex:
    """Per relation, the sets of entities observed as head and as tail.

    Built from the training split only. Sets are stored as sorted arrays
    concatenated per relation, which gives O(log n) membership tests and
    O(1) uniform sampling by index. A composite key array (relation *
    n_entities + entity) backs vectorized membership queries.
    """

    __slots__ = (
        "n_entities",
        "n_relations",
        "head_keys",
        "heads_flat",
        "heads_off",
        "head_counts",
        "tail_keys",
        "tails_flat",
        "tails_off",
        "tail_counts",
        "_mask_cache",
    )

    def __init__(self, train_triples: np.ndarray, n_entities: int, n_relations: int):
        triples = np.asarray(train_triples, dtype=np.int64).reshape(-1, 3)
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        bounds = np.arange(self.n_relations + 1, dtype=np.int64) * self.n_entities

        self.head_keys = np.unique(triples[:, 1] * self.n_entities + triples[:, 0])
        self.heads_off = np.searchsorted(self.head_keys, bounds)
        self.heads_flat = self.head_keys % self.n_entities
        self.head_counts = np.diff(self.heads_off)

        self.tail_keys = np.unique(triples[:, 1] * self.n_entities + triples[:, 2])
        self.tails_off = np.searchsorted(self.tail_keys, bounds)
        self.tails_flat = self.tail_keys % self.n_entities
        self.tail_counts = np.diff(self.tails_off)

        self._mask_cache: dict[tuple[str, int], np.ndarray] = {}

    def heads_of(self, r: int) -> np.ndarray:
        """Sorted entity ids observed as head of relation r in training."""
        return self.heads_flat[self.heads_off[r] : self.heads_off[r + 1]]

    def tails_of(self, r: int) -> np.ndarray:
        """Sorted entity ids observed as tail of relation r in training."""
        return self.tails_flat[self.tails_off[r] : self.tails_off[r + 1]]

    def has_head(self, r: int, e: int) -> bool:
        return bool(_member(self.head_keys, np.int64(r) * self.n_entities + e))

    def has_tail(self, r: int, e: int) -> bool:
        return bool(_member(self.tail_keys, np.int64(r) * self.n_entities + e))

    def has_head_batch(self, r: np.ndarray, e: np.ndarray) -> np.ndarray:
        return _member(self.head_keys, np.asarray(r, np.int64) * self.n_entities + e)

    def has_tail_batch(self, r: np.ndarray, e: np.ndarray) -> np.ndarray:
        return _member(self.tail_keys, np.asarray(r, np.int64) * self.n_entities + e)

    def label_batch(self, triples: np.ndarray) -> np.ndarray:
        """Pair-occurrence label for each (h, r, t) row: True iff h is a
        training head of r and t is a training tail of r."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        ok_h = self.has_head_batch(triples[:, 1], triples[:, 0])
        ok_t = self.has_tail_batch(triples[:, 1], triples[:, 2])
        return ok_h & ok_t

    def head_mask(self, r: int) -> np.ndarray:
        """Boolean mask over all entities marking training heads of r. Cached."""
        return self._mask(("head", int(r)))

    def tail_mask(self, r: int) -> np.ndarray:
        """Boolean mask over all entities marking training tails of r. Cached."""
        return self._mask(("tail", int(r)))

    def _mask(self, key: tuple[str, int]) -> np.ndarray:
        cached = self._mask_cache.get(key)
        if cached is None:
            side, r = key
            cached = np.zeros(self.n_entities, dtype=bool)
            cached[self.heads_of(r) if side == "head" else self.tails_of(r)] = True
            cached.setflags(write=False)
            self._mask_cache[key] = cached
        return cached


def pair_label(h: int, r: int, t: int, index: PairIndex) -> int:
    """1 iff h occurs as a head of r and t as a tail of r in training data."""
    return int(index.has_head(r, h) and index.has_tail(r, t))


class FilterSet:
    """All distinct triples across train, valid and test.

    Supports exact membership plus the grouped lookups the filtered ranking
    protocol needs: known tails of an (h, r) pair and known heads of an
    (r, t) pair. Backed by two sorted composite-key arrays.
    """

    __slots__ = ("n_entities", "n_relations", "_hrt", "_rth")

    def __init__(self, triples: np.ndarray, n_entities: int, n_relations: int):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)
        h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
        self._hrt = np.unique((h * self.n_relations + r) * self.n_entities + t)
        self._rth = np.unique((r * self.n_entities + t) * self.n_entities + h)

    def __len__(self) -> int:
        return int(self._hrt.size)

    def __contains__(self, triple) -> bool:
        h, r, t = (int(x) for x in triple)
        key = (h * self.n_relations + r) * self.n_entities + t
        return bool(_member(self._hrt, key))

    def contains_batch(self, triples: np.ndarray) -> np.ndarray:
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        keys = (triples[:, 0] * self.n_relations + triples[:, 1]) * self.n_entities + triples[:, 2]
        return _member(self._hrt, keys)

    def tails_for(self, h: int, r: int) -> np.ndarray:
        """Known tail entities t such that (h, r, t) occurs in any split."""
        base = (np.int64(h) * self.n_relations + r) * self.n_entities
        lo, hi = np.searchsorted(self._hrt, [base, base + self.n_entities])
        return self._hrt[lo:hi] - base

    def heads_for(self, r: int, t: int) -> np.ndarray:
        """Known head entities h such that (h, r, t) occurs in any split."""
        base = (np.int64(r) * self.n_entities + t) * self.n_entities
        lo, hi = np.searchsorted(self._rth, [base, base + self.n_entities])
        return self._rth[lo:hi] - base


@dataclass
class KGDataset:
    """A loaded dataset: vocab, the three splits, and derived indexes."""

    vocab: Vocab
    train: TripleStore
    valid: TripleStore
    test: TripleStore
    pairs: PairIndex
    filter_set: FilterSet
    duplicates_dropped: int = 0
    source: str = ""

    @property
    def splits(self) -> dict[str, TripleStore]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _read_triples(path: Path, lowercase: bool) -> list[tuple[str, str, str]]:
    if not path.is_file():
        raise DatasetNotFoundError(f"missing dataset file: {path}")
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            fields = line.split("\t")
            if len(fields) != 3:
                raise DatasetError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            if lowercase:
                fields = [x.lower() for x in fields]
            rows.append((fields[0], fields[1], fields[2]))
    return rows


def load_dataset(dir_path, lowercase: bool = False) -> KGDataset:
    """Load train/valid/test from a directory and build all derived indexes.

    The vocabulary covers all three splits. Duplicate training triples are
    dropped (first occurrence kept) with a logged count; valid and test are
    kept verbatim. The pair-occurrence index is built from train only; the
    filter set covers every split.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset directory not found: {root}")

    raw = {split: _read_triples(root / fname, lowercase) for split, fname in _SPLIT_FILES}
    if not raw["train"]:
        raise DatasetError("empty training split")

    entity_ids: dict[str, int] = {}
    relation_ids: dict[str, int] = {}
    for split, _ in _SPLIT_FILES:
        for h, r, t in raw[split]:
            if h not in entity_ids:
                entity_ids[h] = len(entity_ids)
            if r not in relation_ids:
                relation_ids[r] = len(relation_ids)
            if t not in entity_ids:
                entity_ids[t] = len(entity_ids)
    vocab = Vocab(list(entity_ids), list(relation_ids))

    encoded = {}
    for split, _ in _SPLIT_FILES:
        rows = [vocab.encode(h, r, t) for h, r, t in raw[split]]
        encoded[split] = np.array(rows, dtype=np.int64).reshape(-1, 3)

    train_rows = encoded["train"]
    seen: dict[tuple[int, int, int], None] = dict.fromkeys(map(tuple, train_rows))
    dropped = len(train_rows) - len(seen)
    if dropped:
        log.info("dropped %d duplicate training triples", dropped)
        train_rows = np.array(list(seen), dtype=np.int64)

    train = TripleStore(train_rows, "train")
    valid = TripleStore(encoded["valid"], "valid")
    test = TripleStore(encoded["test"], "test")
    pairs = PairIndex(train.triples, vocab.n_entities, vocab.n_relations)
    all_triples = np.concatenate([train.triples, valid.triples, test.triples])
    filter_set = FilterSet(all_triples, vocab.n_entities, vocab.n_relations)
    return KGDataset(
        vocab=vocab,
        train=train,
        valid=valid,
        test=test,
        pairs=pairs,
        filter_set=filter_set,
        duplicates_dropped=dropped,
        source=str(root),
    )


def dataset_stats(ds: KGDataset) -> dict[str, int]:
    """Counts of entities, relations and per-split triples."""
    return {
        "entities": ds.vocab.n_entities,
        "relations": ds.vocab.n_relations,
        "train": ds.train.n,
        "valid": ds.valid.n,
        "test": ds.test.n,
        "train_duplicates_dropped": ds.duplicates_dropped,
    }


def format_stats(stats: dict[str, int]) -> str:
    """Aligned plain-text rendering of a stats dict."""
    width = max(len(k) for k in stats)
    num = max(len(f"{v:,}") for v in stats.values())
    return "\n".join(f"{k:<{width}}  {v:>{num},}" for k, v in stats.items())


def write_stats_kv(stats: dict[str, int], path) -> None:
    """Machine-readable key=value stats file."""
    with open(path, "w", encoding="utf-8") as f:
        for k, v in stats.items():
            f.write(f"{k}={v}\n")
