"""Pearson correlation over flattened models.

Uses the two-pass covariance form with float64 accumulation: the one-pass
summation form loses precision at the ~1e5 dimensions of a flattened model.
Results are clamped to [-1, 1] against rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .aggregation import ModelUpdate

log = logging.getLogger(__name__)


class ZeroVarianceError(ValueError):
    """One of the inputs is constant, so the correlation is undefined."""


@dataclass(frozen=True)
class PccMatrix:
    """Symmetric pairwise correlation matrix over n model vectors."""

    n: int
    entries: np.ndarray

    def __post_init__(self) -> None:
        if self.entries.shape != (self.n, self.n):
            raise ValueError(f"entries must be {self.n}x{self.n}, got {self.entries.shape}")


def pearson(a: np.ndarray, b: np.ndarray, *, strict: bool = False) -> float:
    """Correlation coefficient of two equal-length vectors, in [-1, 1].

    A constant input raises ZeroVarianceError when ``strict`` is set and
    otherwise yields 0.0 with a logged warning, so a degenerate model vector
    cannot abort a whole aggregation round.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("correlation needs at least 2 elements")
    da = a - a.mean()
    db = b - b.mean()
    ss_a = float(da @ da)
    ss_b = float(db @ db)
    if ss_a == 0.0 or ss_b == 0.0:
        if strict:
            raise ZeroVarianceError("zero-variance input")
        log.warning("zero-variance vector in correlation; treating as uncorrelated")
        return 0.0
    # single square root of the product keeps exactly collinear inputs at +-1
    rho = float(da @ db) / math.sqrt(ss_a * ss_b)
    return min(1.0, max(-1.0, rho))


def pcc_matrix(updates: Sequence["ModelUpdate"], *, strict: bool = False) -> PccMatrix:
    """Pairwise correlations of the updates' flattened parameters.

    Each unordered pair is computed once and mirrored, so the result is
    exactly symmetric with a unit diagonal.
    """
    n = len(updates)
    if n < 2:
        raise ValueError("need at least 2 updates")
    flats = [np.asarray(u.params.values, dtype=np.float64) for u in updates]
    length = flats[0].shape[0]
    for u, f in zip(updates, flats):
        if f.shape[0] != length:
            raise ValueError(
                f"node {u.node_id}: vector length {f.shape[0]} differs from {length}"
            )
    entries = np.eye(n, dtype=np.float64)
    for j in range(n):
        for k in range(j + 1, n):
            try:
                rho = pearson(flats[j], flats[k], strict=strict)
            except ZeroVarianceError as exc:
                raise ZeroVarianceError(
                    f"constant model vector between nodes "
                    f"{updates[j].node_id} and {updates[k].node_id}"
                ) from exc
            entries[j, k] = rho
            entries[k, j] = rho
    return PccMatrix(n, entries)
