"""Spectral clustering of model vectors from their correlation matrix.

Pipeline: map correlations to a nonnegative similarity, build the
symmetrically normalized graph Laplacian, take the eigenvectors of its k
smallest eigenvalues (cyclic Jacobi solver; the matrices are tiny), row
normalize the embedding, and k-means the rows. Everything is deterministic
for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import StreamKey, stream
from .stats import PccMatrix


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster label per input row; clusters may be empty in degenerate cases."""

    num_clusters: int
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.labels.ndim != 1:
            raise ValueError("labels must be one-dimensional")
        if self.labels.size and (
            int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_clusters
        ):
            raise ValueError("labels out of range")

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def non_empty_clusters(self) -> list[int]:
        return [c for c in range(self.num_clusters) if self.members(c).size > 0]


def similarity_from_pcc(pcc: PccMatrix) -> np.ndarray:
    """Affine map of correlations onto [0, 1] with a zero diagonal.

    (rho + 1) / 2 keeps negatively correlated models maximally dissimilar
    while preserving the ordering that max(rho, 0) would throw away.
    """
    sim = (pcc.entries + 1.0) / 2.0
    np.fill_diagonal(sim, 0.0)
    return sim


def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.

    Cyclic Jacobi rotations; fine for the small, dense matrices used here.
    Eigenvector signs are fixed so the largest-magnitude component is positive.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0.0):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (n * n):
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    eigenvalues = np.diag(a).copy()
    order = np.argsort(eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vectors = v[:, order]
    for j in range(n):
        pivot = int(np.argmax(np.abs(vectors[:, j])))
        if vectors[pivot, j] < 0:
            vectors[:, j] = -vectors[:, j]
    return eigenvalues, vectors


def kmeans(
    rows: np.ndarray, k: int, seed: StreamKey | tuple[StreamKey, ...], max_iter: int = 100
) -> np.ndarray:
    """Cluster row vectors with seeded k-means++ init and Lloyd iterations.

    Assignment ties go to the lowest center index. An empty cluster is
    repaired by reseeding its center to the point farthest from its current
    center; if every point coincides, the empty cluster is left empty.
    """
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    scope = seed if isinstance(seed, tuple) else (seed,)
    rng = stream(*scope, "kmeans")

    centers = np.empty((k, rows.shape[1]))
    centers[0] = rows[int(rng.integers(n))]
    for j in range(1, k):
        d2 = np.min(
            ((rows[:, None, :] - centers[None, :j, :]) ** 2).sum(axis=2), axis=1
        )
        total = float(d2.sum())
        if total == 0.0:
            centers[j] = rows[int(rng.integers(n))]
        else:
            centers[j] = rows[int(rng.choice(n, p=d2 / total))]

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((rows[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dists, axis=1)
        repaired = False
        for j in range(k):
            if np.any(new_labels == j):
                continue
            own = dists[np.arange(n), new_labels]
            far = int(np.argmax(own))
            if own[far] == 0.0:
                continue  # all points coincide with their centers; accept empty cluster
            centers[j] = rows[far]
            new_labels[far] = j
            repaired = True
        if not repaired and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                centers[j] = rows[mask].mean(axis=0)
    return labels


def spectral_cluster(
    similarity: np.ndarray, k: int, seed: StreamKey | tuple[StreamKey, ...]
) -> ClusterAssignment:
    """Normalized-Laplacian spectral clustering of a similarity matrix."""
    s = np.asarray(similarity, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n):
        raise ValueError("similarity matrix must be square")
    if np.abs(s - s.T).max(initial=0.0) > 1e-12:
        raise ValueError("similarity matrix must be symmetric")
    if s.min(initial=0.0) < 0.0:
        raise ValueError("similarity entries must be nonnegative")
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    degrees = s.sum(axis=1)
    laplacian = np.diag(degrees) - s
    inv_sqrt = np.where(degrees > 0.0, 1.0 / np.sqrt(np.where(degrees > 0.0, degrees, 1.0)), 0.0)
    normalized = inv_sqrt[:, None] * laplacian * inv_sqrt[None, :]
    normalized = (normalized + normalized.T) / 2.0  # guard rounding asymmetry

    _, vectors = jacobi_eigh(normalized)
    embedding = vectors[:, :k]
    norms = np.sqrt((embedding**2).sum(axis=1))
    safe = np.where(norms > 0.0, norms, 1.0)
    embedding = embedding / safe[:, None]

    labels = kmeans(embedding, k, seed)
    return ClusterAssignment(k, labels)
