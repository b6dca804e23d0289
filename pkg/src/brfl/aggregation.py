"""Aggregation rules that turn local model updates into a global model.

PSA is the precision-based spectral rule: correlate updates pairwise, cluster
them spectrally, average each cluster, have every aggregation node score each
cluster average on its own held-out data, and promote the cluster(s) with the
highest mean score. Krum, coordinate-wise median, mean, and clipped
clustering are the comparison baselines.

Elementwise reductions accumulate in float64 and are cast back to the input
parameter dtype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nn import ParamVector
from .rng import StreamKey
from .spectral import ClusterAssignment, similarity_from_pcc, spectral_cluster
from .stats import PccMatrix, pcc_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelUpdate:
    """One node's trained parameters for one round."""

    node_id: int
    round_index: int
    params: ParamVector


@dataclass(frozen=True)
class GlobalModel:
    """Aggregated parameters for one round, tagged with who aggregated them."""

    round_index: int
    aggregator_ids: tuple[int, ...]
    params: ParamVector


@dataclass(frozen=True)
class ClusterMean:
    cluster_index: int
    params: ParamVector
    member_ids: tuple[int, ...]


@dataclass(frozen=True)
class AccuracyRecord:
    """Validation scores one cluster average earned from the aggregation nodes."""

    cluster_index: int
    member_ids: tuple[int, ...]
    accuracies: dict[int, float]
    mean_accuracy: float


@dataclass(frozen=True)
class ClusterValidator:
    """An aggregation node's scoring hook: params -> accuracy on its own data."""

    node_id: int
    evaluate: Callable[[ParamVector], float]


@dataclass(frozen=True)
class PsaResult:
    global_model: GlobalModel
    records: tuple[AccuracyRecord, ...]
    winning_member_ids: tuple[int, ...]
    winning_clusters: tuple[int, ...]
    pcc: PccMatrix
    assignment: ClusterAssignment


def _mean_of(vectors: list[np.ndarray], dtype: np.dtype) -> np.ndarray:
    acc = np.zeros(vectors[0].shape, dtype=np.float64)
    for v in vectors:
        acc += v
    return (acc / len(vectors)).astype(dtype)


def cluster_means(
    updates: Sequence[ModelUpdate], assignment: ClusterAssignment
) -> list[ClusterMean]:
    """Elementwise average of each non-empty cluster's member parameters."""
    if len(updates) != assignment.labels.shape[0]:
        raise ValueError("assignment does not cover the updates")
    shapes = updates[0].params.shapes
    dtype = updates[0].params.values.dtype
    out: list[ClusterMean] = []
    for cluster in range(assignment.num_clusters):
        member_idx = assignment.members(cluster)
        if member_idx.size == 0:
            log.debug("cluster %d is empty; omitted", cluster)
            continue
        vectors = [np.asarray(updates[i].params.values, dtype=np.float64) for i in member_idx]
        params = ParamVector(_mean_of(vectors, dtype), shapes)
        member_ids = tuple(sorted(int(updates[i].node_id) for i in member_idx))
        out.append(ClusterMean(cluster, params, member_ids))
    if not out:
        raise ValueError("all clusters empty")
    return out


def psa_aggregate(
    updates: Sequence[ModelUpdate],
    validators: Sequence[ClusterValidator],
    num_clusters: int = 2,
    seed: StreamKey | tuple[StreamKey, ...] = 0,
) -> PsaResult:
    """Full PSA round: correlate, cluster, average, validate, promote the best.

    Every cluster that ties for the highest mean validation accuracy wins; the
    global model is the average of the winning cluster means, and the winners'
    member ids are reported so they can earn stake.
    """
    if len(updates) < 2:
        raise ValueError("PSA needs at least 2 updates")
    if not validators:
        raise ValueError("PSA needs at least 1 validator")
    validators = sorted(validators, key=lambda v: v.node_id)

    pcc = pcc_matrix(updates)
    assignment = spectral_cluster(similarity_from_pcc(pcc), num_clusters, seed)
    means = cluster_means(updates, assignment)

    records: list[AccuracyRecord] = []
    for cm in means:
        accs = {v.node_id: float(v.evaluate(cm.params)) for v in validators}
        for node_id, acc in accs.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"validator {node_id} returned accuracy {acc}")
        mean_acc = float(np.mean(list(accs.values()), dtype=np.float64))
        records.append(AccuracyRecord(cm.cluster_index, cm.member_ids, accs, mean_acc))

    best = max(r.mean_accuracy for r in records)
    winners = [r for r in records if r.mean_accuracy == best]
    winning_clusters = tuple(r.cluster_index for r in winners)
    winning_vectors = [
        np.asarray(cm.params.values, dtype=np.float64)
        for cm in means
        if cm.cluster_index in winning_clusters
    ]
    dtype = updates[0].params.values.dtype
    global_params = ParamVector(_mean_of(winning_vectors, dtype), updates[0].params.shapes)
    member_ids = tuple(sorted({nid for r in winners for nid in r.member_ids}))

    gm = GlobalModel(
        round_index=updates[0].round_index,
        aggregator_ids=tuple(v.node_id for v in validators),
        params=global_params,
    )
    return PsaResult(gm, tuple(records), member_ids, winning_clusters, pcc, assignment)


def krum(updates: Sequence[ModelUpdate], num_byzantine: int | None = None) -> ParamVector:
    """Return the update closest to its n-f-2 nearest neighbours.

    Scores are sums of squared Euclidean distances; ties go to the lowest
    node id. ``num_byzantine`` defaults to floor((n-3)/2), the largest value
    the rule tolerates.
    """
    n = len(updates)
    f = (n - 3) // 2 if num_byzantine is None else num_byzantine
    if f < 0 or n < f + 3:
        raise ValueError(f"krum needs n >= f+3, got n={n}, f={f}")
    flats = [np.asarray(u.params.values, dtype=np.float64) for u in updates]
    dist2 = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            d = flats[j] - flats[k]
            dist2[j, k] = dist2[k, j] = float(d @ d)
    keep = n - f - 2
    best: tuple[float, int, int] | None = None
    for j in range(n):
        others = np.sort(np.delete(dist2[j], j))
        score = float(others[:keep].sum())
        key = (score, int(updates[j].node_id), j)
        if best is None or key < best:
            best = key
    return updates[best[2]].params


def median(updates: Sequence[ModelUpdate]) -> ParamVector:
    """Coordinate-wise median; even counts average the two middle values."""
    if not updates:
        raise ValueError("need at least 1 update")
    stacked = np.stack([u.params.values for u in updates])
    return ParamVector(np.median(stacked, axis=0), updates[0].params.shapes)


def mean(updates: Sequence[ModelUpdate]) -> ParamVector:
    """Coordinate-wise arithmetic mean."""
    if not updates:
        raise ValueError("need at least 1 update")
    dtype = updates[0].params.values.dtype
    vectors = [np.asarray(u.params.values, dtype=np.float64) for u in updates]
    return ParamVector(_mean_of(vectors, dtype), updates[0].params.shapes)


def _cosine_distances(flats: list[np.ndarray]) -> np.ndarray:
    n = len(flats)
    norms = [float(np.sqrt(v @ v)) for v in flats]
    d = np.zeros((n, n))
    for j in range(n):
        for k in range(j + 1, n):
            if norms[j] == 0.0 or norms[k] == 0.0:
                cos = 0.0
            else:
                cos = float(flats[j] @ flats[k]) / (norms[j] * norms[k])
            d[j, k] = d[k, j] = 1.0 - cos
    return d


def clipped_clustering(updates: Sequence[ModelUpdate]) -> ParamVector:
    """Clip update norms to their median, 2-cluster by cosine distance with
    average linkage, and average the larger cluster (tie: cluster holding the
    lowest node id)."""
    n = len(updates)
    if n < 2:
        raise ValueError("need at least 2 updates")
    flats = [np.asarray(u.params.values, dtype=np.float64) for u in updates]
    norms = np.array([np.sqrt(v @ v) for v in flats])
    tau = float(np.median(norms))
    clipped = [
        v * (tau / nv) if nv > tau else v for v, nv in zip(flats, norms)
    ]

    dist = _cosine_distances(clipped)
    clusters: list[list[int]] = [[i] for i in range(n)]
    cdist = dist.copy()
    sizes = np.ones(n)
    active = list(range(n))
    while len(active) > 2:
        best_pair = None
        best_d = np.inf
        for aj in range(len(active)):
            for ak in range(aj + 1, len(active)):
                d = cdist[active[aj], active[ak]]
                if d < best_d:
                    best_d = d
                    best_pair = (active[aj], active[ak])
        j, k = best_pair
        # average linkage: merged distance is the size-weighted mean
        for m in active:
            if m in (j, k):
                continue
            cdist[j, m] = cdist[m, j] = (
                sizes[j] * cdist[j, m] + sizes[k] * cdist[k, m]
            ) / (sizes[j] + sizes[k])
        clusters[j] = clusters[j] + clusters[k]
        sizes[j] += sizes[k]
        active.remove(k)

    groups = [clusters[i] for i in active]
    node_ids = [int(u.node_id) for u in updates]
    groups.sort(key=lambda g: (-len(g), min(node_ids[i] for i in g)))
    winner = groups[0]
    dtype = updates[0].params.values.dtype
    return ParamVector(
        _mean_of([clipped[i] for i in winner], dtype), updates[0].params.shapes
    )
