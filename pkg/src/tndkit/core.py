"""Data model for test-negative-design samples, folds and estimator output."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DegenerateArm, DimensionMismatch, EmptyDataset, InvalidFoldCount


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TndRecord:
    """One sampled subject: covariates, vaccination ``v`` and case indicator ``y``."""

    covariates: tuple
    v: int
    y: int


@dataclass(frozen=True, eq=False)
class TndDataset:
    """A collection of TND-sampled subjects stored column-wise.

    Every record is sampled (S=1), so only covariates, ``v`` and ``y`` are kept.
    Use :func:`validate_dataset` (or :meth:`from_records`) to obtain a dataset
    whose invariants are guaranteed.
    """

    covariates: np.ndarray
    v: np.ndarray
    y: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(-1, 1)
        object.__setattr__(self, "covariates", _frozen(cov, float))
        object.__setattr__(self, "v", _frozen(np.asarray(self.v).ravel(), np.int8))
        object.__setattr__(self, "y", _frozen(np.asarray(self.y).ravel(), np.int8))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @classmethod
    def from_records(cls, records: Sequence[TndRecord], feature_names: Sequence[str]) -> "TndDataset":
        if len(records) == 0:
            raise EmptyDataset("dataset has no records")
        width = len(feature_names)
        for k, r in enumerate(records):
            if len(r.covariates) != width:
                raise DimensionMismatch(
                    f"record {k} has {len(r.covariates)} covariates, expected {width}"
                )
        cov = np.array([r.covariates for r in records], dtype=float).reshape(len(records), width)
        ds = cls(
            cov,
            np.array([r.v for r in records]),
            np.array([r.y for r in records]),
            tuple(feature_names),
        )
        return validate_dataset(ds)

    def __len__(self):
        return self.v.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def record(self, k: int) -> TndRecord:
        return TndRecord(tuple(self.covariates[k].tolist()), int(self.v[k]), int(self.y[k]))

    @property
    def records(self) -> Iterator[TndRecord]:
        for k in range(len(self)):
            yield self.record(k)

    def subset(self, idx) -> "TndDataset":
        idx = np.asarray(idx)
        return TndDataset(self.covariates[idx], self.v[idx], self.y[idx], self.feature_names)

    def case_fraction(self) -> float:
        return float(self.y.mean())

    def counts(self) -> dict:
        return {
            "n": int(len(self)),
            "cases": int(self.y.sum()),
            "controls": int(len(self) - self.y.sum()),
            "vaccinated": int(self.v.sum()),
            "unvaccinated": int(len(self) - self.v.sum()),
        }


def validate_dataset(raw: TndDataset) -> TndDataset:
    """Return ``raw`` unchanged if every dataset invariant holds, else raise.

    Raises
    ------
    EmptyDataset
        No records.
    DimensionMismatch
        Covariate width differs from the number of feature names.
    DataError
        Non-binary ``v``/``y`` or non-finite covariates.
    DegenerateArm
        No cases, no controls, or a missing vaccination arm.
    """
    from .errors import DataError

    n = raw.v.shape[0]
    if n == 0:
        raise EmptyDataset("dataset has no records")
    if raw.covariates.shape[0] != n or raw.y.shape[0] != n:
        raise DimensionMismatch("covariates, v and y must have the same length")
    if raw.covariates.shape[1] != len(raw.feature_names):
        raise DimensionMismatch(
            f"{raw.covariates.shape[1]} covariate columns but "
            f"{len(raw.feature_names)} feature names"
        )
    if not np.all(np.isin(raw.v, (0, 1))):
        raise DataError("v must be 0/1")
    if not np.all(np.isin(raw.y, (0, 1))):
        raise DataError("y must be 0/1")
    if not np.all(np.isfinite(raw.covariates)):
        bad = int(np.argwhere(~np.isfinite(raw.covariates))[0, 0])
        raise DataError(f"non-finite covariate in record {bad}")
    check_arms(raw.v, raw.y)
    return raw


def check_arms(v, y, where=None):
    if not np.any(y == 1):
        raise DegenerateArm("no cases", where)
    if not np.any(y == 0):
        raise DegenerateArm("no controls", where)
    if not np.any(v == 1):
        raise DegenerateArm("no vaccinated (v=1) records", where)
    if not np.any(v == 0):
        raise DegenerateArm("no unvaccinated (v=0) records", where)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Fold index for each observation. ``j_folds == 1`` means no sample splitting."""

    fold_of: np.ndarray
    j_folds: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", _frozen(self.fold_of, np.int64))

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def fold_indices(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == j)

    def train_indices(self, j: int) -> np.ndarray:
        if self.j_folds == 1:
            return np.arange(self.n)
        return np.flatnonzero(self.fold_of != j)

    def sizes(self) -> list:
        return np.bincount(self.fold_of, minlength=self.j_folds).tolist()

    def __eq__(self, other):
        return (
            isinstance(other, FoldAssignment)
            and self.j_folds == other.j_folds
            and np.array_equal(self.fold_of, other.fold_of)
        )


def split_folds(n: int, j: int, seed: int) -> FoldAssignment:
    """Randomly partition ``range(n)`` into ``j`` folds whose sizes differ by at most one.

    A seeded uniform permutation is cut into contiguous blocks, so the result
    depends only on ``(n, j, seed)``.
    """
    if j < 2 or j > n:
        raise InvalidFoldCount(f"need 2 <= j <= n, got j={j}, n={n}")
    perm = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1))).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, j)):
        fold_of[block] = k
    return FoldAssignment(fold_of, j)


def no_split(n: int) -> FoldAssignment:
    """Single-fold assignment: nuisances are fit and predicted on the full sample."""
    return FoldAssignment(np.zeros(n, dtype=np.int64), 1)


@dataclass(frozen=True, eq=False)
class EstimatorOutput:
    """Point estimates, log-scale inference and per-observation contributions.

    ``influence_v1``/``influence_v0`` are the per-observation summands whose
    means are ``psi_v1``/``psi_v0``.
    """

    psi_v1: float
    psi_v0: float
    psi_mrr: float
    ve: float
    se_log_mrr: float
    ci_mrr: tuple
    influence_v1: np.ndarray
    influence_v0: np.ndarray
    method: str
    alpha: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "influence_v1", _frozen(self.influence_v1, float))
        object.__setattr__(self, "influence_v0", _frozen(self.influence_v0, float))

    @property
    def has_ci(self) -> bool:
        return bool(np.all(np.isfinite(self.ci_mrr)))

    def covers(self, value: float) -> bool:
        lo, hi = self.ci_mrr
        return bool(lo <= value <= hi)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "psi_v1": self.psi_v1,
            "psi_v0": self.psi_v0,
            "psi_mrr": self.psi_mrr,
            "ve": self.ve,
            "se_log_mrr": self.se_log_mrr,
            "ci_lower": self.ci_mrr[0],
            "ci_upper": self.ci_mrr[1],
            "alpha": self.alpha,
        }
