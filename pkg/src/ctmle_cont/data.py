"""Observation containers, V-fold schemes and the seeded RNG contract."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np


class DataError(ValueError):
    pass


class EmptyDataError(DataError):
    pass


class InvalidFoldCountError(DataError):
    pass


class DegenerateTreatmentError(DataError):
    """Raised when a dataset (or a training fold) holds a single treatment arm."""


@dataclass(frozen=True)
class RngSpec:
    """Seed pair keying an independent, order-free random stream.

    Streams are derived with :class:`numpy.random.SeedSequence` and drive a
    counter-based Philox generator, so the draws depend only on
    ``(master_seed, stream_id)`` and never on the order in which streams are
    consumed.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.master_seed & (2**64 - 1), self.stream_id])
        return np.random.Generator(np.random.Philox(ss))

    def child(self, tag: int) -> "RngSpec":
        """Sub-stream for a purpose tag (fold redraws, oracle shards...)."""
        mixed = np.random.SeedSequence([self.master_seed & (2**64 - 1), self.stream_id, tag])
        return RngSpec(int(mixed.generate_state(1, np.uint64)[0]), tag)


@dataclass(frozen=True)
class Observation:
    w: np.ndarray
    a: int
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable sample ``(W, A, Y)`` stored column-wise.

    ``w`` has shape ``(n, p)``, ``a`` holds 0/1 integers and ``y`` lies in
    [0, 1]. Arrays are copied and made read-only at construction.
    """

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = np.array(self.w, dtype=float, copy=True)
        if w.ndim == 1:
            w = w[:, None]
        a = np.array(self.a, copy=True)
        y = np.array(self.y, dtype=float, copy=True)
        if w.ndim != 2 or a.ndim != 1 or y.ndim != 1:
            raise DataError("expected w of shape (n, p), a and y of shape (n,)")
        n = w.shape[0]
        if n < 1:
            raise EmptyDataError("dataset must hold at least one row")
        if a.shape[0] != n or y.shape[0] != n:
            raise DataError("w, a and y must share the row count")
        if not np.all(np.isfinite(w)):
            raise DataError("covariates must be finite")
        if not np.all((a == 0) | (a == 1)):
            raise DataError("treatment must be binary 0/1")
        if not np.all((y >= 0.0) & (y <= 1.0)):
            raise DataError("outcome must lie in [0, 1]")
        a = a.astype(np.int64)
        for arr in (w, a, y):
            arr.flags.writeable = False
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_observations(cls, observations) -> "Dataset":
        observations = list(observations)
        if not observations:
            raise EmptyDataError("no observations")
        p = {np.asarray(o.w).shape for o in observations}
        if len(p) != 1:
            raise DataError("observations have differing covariate dimension")
        return cls(
            np.stack([np.asarray(o.w, dtype=float) for o in observations]),
            np.array([o.a for o in observations]),
            np.array([o.y for o in observations], dtype=float),
        )

    @property
    def n(self) -> int:
        return self.w.shape[0]

    @property
    def p(self) -> int:
        return self.w.shape[1]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self.row(i)

    def row(self, i: int) -> Observation:
        return Observation(self.w[i], int(self.a[i]), float(self.y[i]))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.w[index], self.a[index], self.y[index])

    def has_both_arms(self) -> bool:
        s = int(self.a.sum())
        return 0 < s < self.n

    def require_both_arms(self) -> None:
        if not self.has_both_arms():
            raise DegenerateTreatmentError("dataset contains a single treatment arm")


@dataclass(frozen=True, eq=False)
class FoldScheme:
    """Fold labels in ``1..v``, one per row."""

    v: int
    assignment: np.ndarray = field(repr=False)

    def __post_init__(self):
        lab = np.array(self.assignment, dtype=np.int64, copy=True)
        lab.flags.writeable = False
        object.__setattr__(self, "assignment", lab)

    @property
    def n(self) -> int:
        return self.assignment.shape[0]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.v + 1)[1:]

    def validation_mask(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.v:
            raise IndexError(f"fold index {k} outside 1..{self.v}")
        return self.assignment == k

    def partition(self) -> frozenset:
        """Fold contents as a set of row-index sets (label-free)."""
        return frozenset(
            frozenset(np.flatnonzero(self.assignment == k).tolist()) for k in range(1, self.v + 1)
        )


def make_folds(dataset: Dataset, v: int, rng: RngSpec) -> FoldScheme:
    n = dataset.n
    if v < 2 or v > n:
        raise InvalidFoldCountError(f"need 2 <= v <= n, got v={v}, n={n}")
    perm = rng.generator().permutation(n)
    labels = np.empty(n, dtype=np.int64)
    labels[perm] = np.arange(n) % v + 1
    return FoldScheme(v, labels)


def split(dataset: Dataset, folds: FoldScheme, k: int) -> tuple[Dataset, Dataset]:
    """Return ``(train, valid)`` where ``valid`` holds the rows labelled ``k``."""
    mask = folds.validation_mask(k)
    return dataset.subset(~mask), dataset.subset(mask)


def empirical_mean(dataset: Dataset, f: Callable[[Observation], float]) -> float:
    if dataset is None or dataset.n == 0:
        raise EmptyDataError("empirical mean of an empty dataset")
    return float(np.mean([f(o) for o in dataset]))


def write_csv(dataset: Dataset, path) -> None:
    """Write ``w1,...,wp,a,y`` with 17 significant digits (exact round-trip)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"w{j + 1}" for j in range(dataset.p)] + ["a", "y"])
        for i in range(dataset.n):
            out.writerow(
                [f"{v:.17g}" for v in dataset.w[i]] + [str(int(dataset.a[i])), f"{dataset.y[i]:.17g}"]
            )


def read_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["a", "y"]:
            raise DataError("CSV header must end with 'a,y'")
        rows = [r for r in reader if r]
    if not rows:
        raise EmptyDataError(f"{path}: no data rows")
    w = np.array([[float(v) for v in r[:-2]] for r in rows], dtype=float).reshape(len(rows), len(header) - 2)
    a = np.array([int(r[-2]) for r in rows])
    y = np.array([float(r[-1]) for r in rows])
    return Dataset(w, a, y)
