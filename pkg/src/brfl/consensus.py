"""Aggregation-committee election from model/global correlations.

Each round, the trainers whose previous-round models correlate most strongly
with the previous global model are promoted to aggregation nodes. Nodes that
served as aggregators last round produced no update, so they are structurally
excluded from the next committee. Before any global model exists the
committee is drawn uniformly from the trainer pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .aggregation import GlobalModel, ModelUpdate
from .nn import flatten
from .rng import StreamKey, stream
from .stats import pearson


class Role(str, Enum):
    TRAINER = "trainer"
    AGGREGATOR = "aggregator"
    BLOCKCHAIN = "blockchain"


@dataclass(frozen=True)
class NodeRole:
    node_id: int
    role: Role
    is_malicious: bool = False  # ground truth for metrics only, never consensus input


@dataclass(frozen=True)
class PccRecord:
    """Correlation of one node's round-r model against the round-r global model."""

    round_index: int
    node_id: int
    rho: float

    def __post_init__(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho out of range: {self.rho}")


def ppcc_select(
    prev_updates: Sequence[ModelUpdate],
    prev_global: GlobalModel | None,
    num_aggregators: int,
    trainer_pool: Sequence[int],
    seed: StreamKey | tuple[StreamKey, ...],
) -> tuple[tuple[int, ...], list[PccRecord]]:
    """Elect the aggregation committee for the coming round.

    With history available, candidates are last round's submitters ranked by
    correlation with the last global model, descending, ties to the lowest
    node id. Without history the committee is a seeded uniform draw from
    ``trainer_pool``. Returns the committee and the correlation records.
    """
    if num_aggregators < 1:
        raise ValueError("need at least 1 aggregator")
    scope = seed if isinstance(seed, tuple) else (seed,)

    if prev_global is None or not prev_updates:
        pool = sorted(int(i) for i in trainer_pool)
        if num_aggregators > len(pool):
            raise ValueError(
                f"cannot pick {num_aggregators} aggregators from {len(pool)} trainers"
            )
        rng = stream(*scope, "ppcc-cold-start")
        chosen = rng.choice(len(pool), size=num_aggregators, replace=False)
        return tuple(sorted(pool[i] for i in chosen)), []

    if num_aggregators > len(prev_updates):
        raise ValueError(
            f"cannot pick {num_aggregators} aggregators from {len(prev_updates)} candidates"
        )
    gm_flat = flatten(prev_global.params)
    records = [
        PccRecord(
            round_index=u.round_index,
            node_id=int(u.node_id),
            rho=pearson(flatten(u.params), gm_flat),
        )
        for u in sorted(prev_updates, key=lambda u: u.node_id)
    ]
    ranked = sorted(records, key=lambda r: (-r.rho, r.node_id))
    selected = tuple(sorted(r.node_id for r in ranked[:num_aggregators]))
    return selected, records
