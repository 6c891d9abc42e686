import os
from pathlib import Path

import numpy as np
import pytest

from kgforge.data import load_dataset


def write_split_files(dir_path: Path, train, valid, test) -> Path:
    """Write string triples as the three tab-separated split files."""
    dir_path.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train.txt", train), ("valid.txt", valid), ("test.txt", test)):
        (dir_path / name).write_text(
            "".join(f"{h}\t{r}\t{t}\n" for h, r, t in rows), encoding="utf-8"
        )
    return dir_path


def random_string_triples(rng, n, n_entities, n_relations):
    return [
        (f"e{rng.integers(n_entities)}", f"r{rng.integers(n_relations)}", f"e{rng.integers(n_entities)}")
        for _ in range(n)
    ]


def make_random_dataset(tmp_path, seed=0, n_entities=12, n_relations=3, n_train=40, n_valid=8, n_test=8):
    """A small random dataset written through the real loader."""
    rng = np.random.default_rng(seed)
    root = write_split_files(
        tmp_path / f"kg{seed}",
        random_string_triples(rng, n_train, n_entities, n_relations),
        random_string_triples(rng, n_valid, n_entities, n_relations),
        random_string_triples(rng, n_test, n_entities, n_relations),
    )
    return load_dataset(root)


def make_typed_dataset(tmp_path, seed=0, n_types=3, per_type=8, n_train=120, n_valid=20, n_test=20):
    """A dataset whose relations connect fixed entity types, so the
    pair-occurrence structure carries real signal."""
    rng = np.random.default_rng(seed)
    groups = [[f"t{g}_e{i}" for i in range(per_type)] for g in range(n_types)]
    rels = [(f"rel{g}", groups[g], groups[(g + 1) % n_types]) for g in range(n_types)]

    def sample(n):
        rows = []
        for _ in range(n):
            name, heads, tails = rels[rng.integers(len(rels))]
            rows.append((heads[rng.integers(len(heads))], name, tails[rng.integers(len(tails))]))
        return rows

    root = write_split_files(tmp_path / f"typed{seed}", sample(n_train), sample(n_valid), sample(n_test))
    return load_dataset(root)


@pytest.fixture
def toy_dataset(tmp_path):
    return make_random_dataset(tmp_path, seed=1)


def real_dataset_dir(name: str):
    """Resolve a benchmark dataset directory from KGFORGE_DATA_DIR, if any."""
    root = os.environ.get("KGFORGE_DATA_DIR")
    if not root:
        return None
    candidate = Path(root) / name
    if (candidate / "train.txt").is_file():
        return candidate
    return None
