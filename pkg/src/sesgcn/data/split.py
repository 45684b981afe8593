from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .corpus import MotionSequence, WindowedExample, window_sequences


@dataclass(frozen=True)
class DatasetSplit:
    """Sequence ids per split; subjects never cross splits."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    subjects: dict[str, tuple[str, ...]]

    def ids(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def select(self, seqs: Sequence[MotionSequence], name: str) -> list[MotionSequence]:
        wanted = set(self.ids(name))
        return [s for s in seqs if s.sequence_id in wanted]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
            "subjects": {k: list(v) for k, v in self.subjects.items()},
        }


def split_counts(n_subjects: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3:
        raise ConfigError("fractions must be (train, validation, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    n_val = int(round(fractions[1] * n_subjects))
    n_test = int(round(fractions[2] * n_subjects))
    n_train = n_subjects - n_val - n_test
    counts = (n_train, n_val, n_test)
    if min(counts) < 1:
        raise ConfigError(
            f"{n_subjects} subject(s) cannot fill train/validation/test with fractions {tuple(fractions)}"
        )
    return counts


def make_split(
    corpus: Sequence[MotionSequence],
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> DatasetSplit:
    """Assign whole subjects to train/validation/test with a seeded shuffle."""
    subjects = sorted({s.subject_id for s in corpus})
    n_train, n_val, _ = split_counts(len(subjects), fractions)
    order = [subjects[i] for i in np.random.default_rng(seed).permutation(len(subjects))]
    groups = {
        "train": tuple(sorted(order[:n_train])),
        "validation": tuple(sorted(order[n_train : n_train + n_val])),
        "test": tuple(sorted(order[n_train + n_val :])),
    }
    ids = {}
    for name, subs in groups.items():
        keep = set(subs)
        ids[name] = tuple(s.sequence_id for s in corpus if s.subject_id in keep)
    return DatasetSplit(ids["train"], ids["validation"], ids["test"], seed, groups)


@dataclass
class WindowedDataset:
    """Windowed train/validation/test examples ready for training and evaluation."""

    train: list[WindowedExample]
    validation: list[WindowedExample]
    test: list[WindowedExample]
    T: int
    K: int


def build_dataset(
    corpus: Sequence[MotionSequence],
    split: DatasetSplit,
    T: int = 10,
    K: int = 25,
    stride: int = 10,
    exclude_collisions: bool = True,
) -> WindowedDataset:
    parts = {
        name: window_sequences(split.select(corpus, name), T, K, stride, exclude_collisions)
        for name in ("train", "validation", "test")
    }
    return WindowedDataset(parts["train"], parts["validation"], parts["test"], T, K)
