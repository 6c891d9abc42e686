"""Embedding storage, bilinear scoring functions, analytic gradients, and
the binary checkpoint format.

Every entity and relation is one stacked real row:

- distmult: width d.
- complex: width 2d, real block then imaginary block.
- simple: width 2d; an entity row holds its two role embeddings, a relation
  row holds the forward block then the inverse block.

Under joint training a second relation table (``relation_bi``) backs the
pair-occurrence module; entity rows are shared between the two modules.
Scoring and gradients are pure reads; only the optimizer mutates tables.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from kgforge.data import Vocab


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint file."""


class ModelKind(str, Enum):
    DISTMULT = "distmult"
    COMPLEX = "complex"
    SIMPLE = "simple"

    @property
    def width_factor(self) -> int:
        return 1 if self is ModelKind.DISTMULT else 2

    def entity_width(self, dim: int) -> int:
        return self.width_factor * dim

    def relation_width(self, dim: int) -> int:
        return self.width_factor * dim

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown model {name!r}; choose one of: {choices}") from None


_KIND_CODES = {ModelKind.DISTMULT: 0, ModelKind.COMPLEX: 1, ModelKind.SIMPLE: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class EmbeddingTable:
    """Dense parameter matrices plus a diagnostic counter of pair-module
    scoring calls (used to assert that evaluation never touches it)."""

    kind: ModelKind
    dim: int
    entity: np.ndarray
    relation_tri: np.ndarray
    relation_bi: np.ndarray | None = None
    bi_score_calls: int = 0

    @property
    def joint(self) -> bool:
        return self.relation_bi is not None

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation_tri.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {"entity": self.entity, "relation_tri": self.relation_tri}
        if self.relation_bi is not None:
            out["relation_bi"] = self.relation_bi
        return out

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(
            kind=self.kind,
            dim=self.dim,
            entity=self.entity.copy(),
            relation_tri=self.relation_tri.copy(),
            relation_bi=None if self.relation_bi is None else self.relation_bi.copy(),
        )

    def check_finite(self) -> None:
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in parameter table {name!r}")


def init_table(
    kind: ModelKind,
    n_entities: int,
    n_relations: int,
    dim: int,
    seed: int,
    joint: bool = False,
    dtype=np.float64,
) -> EmbeddingTable:
    """Uniform initialization on [-sqrt(6/d), +sqrt(6/d)], deterministic in
    the seed. Draw order is entity, relation_tri, relation_bi, so the shared
    prefix is identical between joint and non-joint tables for one seed."""
    if n_entities <= 0 or n_relations <= 0 or dim <= 0:
        raise ValueError("n_entities, n_relations and dim must be positive")
    bound = np.sqrt(6.0 / dim)
    rng = np.random.default_rng(seed)
    ew = kind.entity_width(dim)
    rw = kind.relation_width(dim)
    entity = rng.uniform(-bound, bound, (n_entities, ew)).astype(dtype, copy=False)
    rel_tri = rng.uniform(-bound, bound, (n_relations, rw)).astype(dtype, copy=False)
    rel_bi = None
    if joint:
        rel_bi = rng.uniform(-bound, bound, (n_relations, rw)).astype(dtype, copy=False)
    return EmbeddingTable(kind, dim, entity, rel_tri, rel_bi)


def _halves(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = v.shape[-1] // 2
    return v[..., :d], v[..., d:]


def _check_widths(kind: ModelKind, h, r, t) -> None:
    w = h.shape[-1]
    if r.shape[-1] != w or t.shape[-1] != w:
        raise ValueError(
            f"embedding width mismatch: h={h.shape[-1]}, r={r.shape[-1]}, t={t.shape[-1]}"
        )
    if kind is not ModelKind.DISTMULT and w % 2:
        raise ValueError(f"{kind.value} vectors need an even width, got {w}")


def score_vectors(kind: ModelKind, h: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Score stacked rows; inputs share shape (..., width), output (...).

    Products are grouped (entity * entity) * relation so the distmult score
    is bit-exactly symmetric under swapping h and t.
    """
    h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
    _check_widths(kind, h, r, t)
    if kind is ModelKind.DISTMULT:
        return ((h * t) * r).sum(axis=-1)
    if kind is ModelKind.COMPLEX:
        hR, hI = _halves(h)
        rR, rI = _halves(r)
        tR, tI = _halves(t)
        return ((hR * tR) * rR + (hI * tI) * rR + (hR * tI) * rI - (hI * tR) * rI).sum(axis=-1)
    h1, h2 = _halves(h)
    r1, r2 = _halves(r)
    t1, t2 = _halves(t)
    return 0.5 * ((h1 * t1) * r1 + (h2 * t2) * r2).sum(axis=-1)


def grad_score(
    kind: ModelKind, h: np.ndarray, r: np.ndarray, t: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of the score in each argument slot.

    The score is trilinear, so each partial depends only on the other two
    slots. Shapes mirror the inputs.
    """
    h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
    _check_widths(kind, h, r, t)
    if kind is ModelKind.DISTMULT:
        return r * t, h * t, h * r
    if kind is ModelKind.COMPLEX:
        hR, hI = _halves(h)
        rR, rI = _halves(r)
        tR, tI = _halves(t)
        gh = np.concatenate([rR * tR + rI * tI, rR * tI - rI * tR], axis=-1)
        gr = np.concatenate([hR * tR + hI * tI, hR * tI - hI * tR], axis=-1)
        gt = np.concatenate([hR * rR - hI * rI, hI * rR + hR * rI], axis=-1)
        return gh, gr, gt
    h1, h2 = _halves(h)
    r1, r2 = _halves(r)
    t1, t2 = _halves(t)
    gh = 0.5 * np.concatenate([r1 * t1, r2 * t2], axis=-1)
    gr = 0.5 * np.concatenate([h1 * t1, h2 * t2], axis=-1)
    gt = 0.5 * np.concatenate([r1 * h1, r2 * h2], axis=-1)
    return gh, gr, gt


def score_distmult(h, r, t) -> np.ndarray:
    """Sum_i h_i * r_i * t_i."""
    return score_vectors(ModelKind.DISTMULT, np.asarray(h, float), np.asarray(r, float), np.asarray(t, float))


def score_complex(h, r, t) -> np.ndarray:
    """Re(sum_i h_i * r_i * conj(t_i)) on complex vectors."""
    h = np.asarray(h, dtype=np.complex128)
    r = np.asarray(r, dtype=np.complex128)
    t = np.asarray(t, dtype=np.complex128)
    if h.shape[-1] != r.shape[-1] or r.shape[-1] != t.shape[-1]:
        raise ValueError("embedding width mismatch")
    return np.real((h * r * np.conj(t)).sum(axis=-1))


def score_simple(h1, h2, t1, t2, r, r_inv) -> np.ndarray:
    """0.5 * sum_i h1_i * r_i * t1_i + 0.5 * sum_i t2_i * rinv_i * h2_i."""
    h = np.concatenate([np.asarray(h1, float), np.asarray(h2, float)], axis=-1)
    t = np.concatenate([np.asarray(t1, float), np.asarray(t2, float)], axis=-1)
    rv = np.concatenate([np.asarray(r, float), np.asarray(r_inv, float)], axis=-1)
    return score_vectors(ModelKind.SIMPLE, h, rv, t)


def complex_to_stacked(z: np.ndarray) -> np.ndarray:
    """Complex rows to the stacked real|imag layout used by the tables."""
    z = np.asarray(z, dtype=np.complex128)
    return np.concatenate([z.real, z.imag], axis=-1)


def _relation_table(table: EmbeddingTable, which: str) -> np.ndarray:
    if which == "tri":
        return table.relation_tri
    if which == "bi":
        if table.relation_bi is None:
            raise ValueError("pair-module scores need a joint table")
        table.bi_score_calls += 1
        return table.relation_bi
    raise ValueError(f"unknown module {which!r}; expected 'tri' or 'bi'")


def score_batch(table: EmbeddingTable, triples: np.ndarray, which: str = "tri") -> np.ndarray:
    """Score integer triples of shape (..., 3); output drops the last axis.

    Training batches use the layout (b, 1 + n_neg, 3) with the positive
    triple in column 0.
    """
    rel = _relation_table(table, which)
    triples = np.asarray(triples, dtype=np.int64)
    h = table.entity[triples[..., 0]]
    r = rel[triples[..., 1]]
    t = table.entity[triples[..., 2]]
    return score_vectors(table.kind, h, r, t)


def _tail_query(kind: ModelKind, h: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vector q(h, r) with score(h, r, t) = q . t for any stacked t."""
    if kind is ModelKind.DISTMULT:
        return h * r
    if kind is ModelKind.COMPLEX:
        hR, hI = _halves(h)
        rR, rI = _halves(r)
        return np.concatenate([hR * rR - hI * rI, hI * rR + hR * rI], axis=-1)
    h1, h2 = _halves(h)
    r1, r2 = _halves(r)
    return 0.5 * np.concatenate([r1 * h1, r2 * h2], axis=-1)


def _head_query(kind: ModelKind, t: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vector q(r, t) with score(h, r, t) = q . h for any stacked h."""
    if kind is ModelKind.DISTMULT:
        return r * t
    if kind is ModelKind.COMPLEX:
        rR, rI = _halves(r)
        tR, tI = _halves(t)
        return np.concatenate([rR * tR + rI * tI, rR * tI - rI * tR], axis=-1)
    r1, r2 = _halves(r)
    t1, t2 = _halves(t)
    return 0.5 * np.concatenate([r1 * t1, r2 * t2], axis=-1)


def scores_against_all(
    table: EmbeddingTable,
    triples: np.ndarray,
    side: str,
    which: str = "tri",
    return_queries: bool = False,
):
    """Scores of every entity substituted into `side` of each triple.

    Returns an array of shape (n_triples, n_entities); with return_queries
    also the per-triple query vectors such that scores = queries @ entity.T.
    """
    if side not in ("head", "tail"):
        raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
    rel = _relation_table(table, which)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    r = rel[triples[:, 1]]
    if side == "tail":
        q = _tail_query(table.kind, table.entity[triples[:, 0]], r)
    else:
        q = _head_query(table.kind, table.entity[triples[:, 2]], r)
    scores = q @ table.entity.T
    return (scores, q) if return_queries else scores


_MAGIC = b"KGFG"
_VERSION = 1


def save_checkpoint(path, table: EmbeddingTable, vocab: Vocab) -> None:
    """Write the documented binary layout: magic, version, kind, joint flag,
    shape header, little-endian float64 arrays (entity, relation_tri, then
    relation_bi if joint), then length-prefixed UTF-8 vocab strings."""
    if table.n_entities != vocab.n_entities or table.n_relations != vocab.n_relations:
        raise ValueError("table shape does not match vocabulary")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<BB", _KIND_CODES[table.kind], int(table.joint)))
        f.write(struct.pack("<QQQ", table.n_entities, table.n_relations, table.dim))
        for arr in table.params().values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        for name in vocab.entity_names + vocab.relation_names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def _read_exact(f, n: int) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint file")
    return raw


def load_checkpoint(path) -> tuple[EmbeddingTable, Vocab]:
    """Read a checkpoint written by save_checkpoint. Rejects files with a
    wrong magic or version."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        kind_code, joint = struct.unpack("<BB", _read_exact(f, 2))
        if kind_code not in _CODE_KINDS or joint not in (0, 1):
            raise CheckpointError(f"{path}: corrupt header")
        kind = _CODE_KINDS[kind_code]
        n_entities, n_relations, dim = struct.unpack("<QQQ", _read_exact(f, 24))

        def read_array(rows: int, width: int) -> np.ndarray:
            raw = _read_exact(f, rows * width * 8)
            return np.frombuffer(raw, dtype="<f8").reshape(rows, width).astype(np.float64)

        entity = read_array(n_entities, kind.entity_width(dim))
        rel_tri = read_array(n_relations, kind.relation_width(dim))
        rel_bi = read_array(n_relations, kind.relation_width(dim)) if joint else None

        def read_names(count: int) -> list[str]:
            names = []
            for _ in range(count):
                (length,) = struct.unpack("<I", _read_exact(f, 4))
                names.append(_read_exact(f, length).decode("utf-8"))
            return names

        entity_names = read_names(n_entities)
        relation_names = read_names(n_relations)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    vocab = Vocab(entity_names, relation_names)
    return EmbeddingTable(kind, dim, entity, rel_tri, rel_bi), vocab
