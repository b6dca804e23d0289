"""Round-synchronous protocol loop tying training, consensus, aggregation,
and the chain together, plus experiment output files.

Each round: elect the aggregation committee from last round's correlations,
let the remaining trainers fetch the latest global model from the chain and
train (malicious ones then poison their update), publish local models through
the content store, package the round's typed blocks, aggregate, reward stake,
persist blocks per role, and score the new global model on held-out test
data.

All randomness is drawn from streams keyed by (seed, purpose, round, node),
and BLAS pools are pinned to one thread for the duration of a run, so outputs
are byte-identical regardless of host thread count.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import synth
from .aggregation import (
    ClusterValidator,
    GlobalModel,
    ModelUpdate,
    clipped_clustering,
    krum,
    mean,
    median,
    psa_aggregate,
)
from .attacks import AttackSpec, apply_attack
from .consensus import Role, ppcc_select
from .dataset import (
    IID,
    NON_IID,
    DatasetShard,
    PartitionPlan,
    an_validation_set,
    load_idx,
    partition,
    subsample,
)
from .ledger import (
    AccuracyRecordTx,
    Block,
    CidTx,
    ContentStore,
    GlobalModelTx,
    NodeBlockStore,
    PccRecordTx,
    StakeLedger,
    TxType,
    VS_GLOBAL,
    VS_LOCAL,
    apply_stake_rewards,
    decode_params,
    encode_params,
    make_block,
    persist_block,
    write_chain_jsonl,
)
from .nn import Hyperparams, ModelArch, ParamVector, evaluate_accuracy, init_model, local_train
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

MAX_ROUNDS = 100

PSA = "psa"
BASELINES = {"krum": krum, "median": median, "mean": mean, "clipped": clipped_clustering}
AGGREGATOR_NAMES = (PSA, *BASELINES)

DATASETS = ("mnist", "fashion")

DATA_DIR_ENV = "BRFL_DATA_DIR"


@dataclass
class SimConfig:
    dataset: str = "mnist"
    distribution: str = IID
    attack: AttackSpec = field(default_factory=AttackSpec)
    malicious_fraction: float = 0.5
    num_trainers: int = 10
    num_aggregators: int = 2
    num_blockchain_nodes: int = 2
    rounds: int = 30
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    num_clusters: int = 2
    aggregator: str = PSA
    seed: int = 0
    layer_dims: tuple[int, ...] = (784, 128, 10)
    shard_size: int = 600
    test_size: int = 1000
    validation_fraction: float = 0.2
    shards_per_node: int = 2
    store_optional_blocks: bool = False
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.distribution not in (IID, NON_IID):
            raise ValueError(f"distribution must be {IID!r} or {NON_IID!r}")
        if self.aggregator not in AGGREGATOR_NAMES:
            raise ValueError(f"aggregator must be one of {AGGREGATOR_NAMES}")
        if not 0 <= self.rounds <= MAX_ROUNDS:
            raise ValueError(f"rounds must be in [0, {MAX_ROUNDS}]")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise ValueError("malicious_fraction must be in [0, 1]")
        if self.num_aggregators < 1 or self.num_trainers < 2 * self.num_aggregators:
            raise ValueError(
                "need num_trainers >= 2 * num_aggregators so committees can rotate"
            )
        if self.num_blockchain_nodes < 0:
            raise ValueError("num_blockchain_nodes must be >= 0")
        if not 1 <= self.num_clusters <= self.num_trainers - self.num_aggregators:
            raise ValueError("num_clusters must fit within the per-round update count")

    @property
    def trainer_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_trainers))

    @property
    def blockchain_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_trainers, self.num_trainers + self.num_blockchain_nodes))

    @property
    def num_malicious(self) -> int:
        return int(np.floor(self.num_trainers * self.malicious_fraction + 0.5))


@dataclass
class RoundMetrics:
    round_index: int
    accuracy: float
    stakes: dict[int, int]
    stored_bytes: dict[int, int]
    aggregator_ids: tuple[int, ...]
    an_counts: dict[int, int]
    winning_member_ids: tuple[int, ...]


@dataclass
class SimState:
    config: SimConfig
    arch: ModelArch
    trainer_train: dict[int, DatasetShard]
    trainer_val: dict[int, DatasetShard]
    test_set: DatasetShard
    chain: list[Block]
    cas: ContentStore
    stakes: StakeLedger
    stores: dict[int, NodeBlockStore]
    malicious_ids: frozenset[int]
    last_updates: list[ModelUpdate]
    last_global: GlobalModel | None
    an_counts: dict[int, int]


@dataclass
class ExperimentResult:
    config: SimConfig
    metrics: list[RoundMetrics]
    malicious_ids: tuple[int, ...]
    trainer_ids: tuple[int, ...]
    blockchain_ids: tuple[int, ...]
    out_dir: Path | None

    @property
    def final_accuracy(self) -> float:
        if not self.metrics:
            raise ValueError("no rounds were run")
        return self.metrics[-1].accuracy


def init_state(config: SimConfig, train_data: DatasetShard, test_data: DatasetShard) -> SimState:
    """Partition data, assign roles, and package the initial global model."""
    arch = ModelArch(config.layer_dims)
    if train_data.images.shape[1] != arch.layer_dims[0]:
        raise ValueError(
            f"architecture expects {arch.layer_dims[0]} inputs, "
            f"data has {train_data.images.shape[1]}"
        )
    seed = config.seed
    test_set = subsample(test_data, config.test_size, derive_seed(seed, "test-subsample"))

    # Validation data is held out of the corpus before the training-skew
    # partition: every node keeps a private, representative holdout for its
    # aggregation duties, disjoint from all training shards. Skewing the
    # validation data along with the training data starves cluster validation
    # of signal in early rounds and lets a flipped cluster win on classes the
    # benign coalition happens not to cover.
    train_pool, val_pool = an_validation_set(
        train_data, config.validation_fraction, derive_seed(seed, "holdout")
    )
    plan = PartitionPlan(
        mode=config.distribution,
        num_nodes=config.num_trainers,
        seed=derive_seed(seed, "partition"),
        shards_per_node=config.shards_per_node,
    )
    shards = partition(train_pool, plan)
    val_shards = partition(
        val_pool,
        PartitionPlan(mode=IID, num_nodes=config.num_trainers, seed=derive_seed(seed, "val-split")),
    )
    trainer_train: dict[int, DatasetShard] = {}
    trainer_val: dict[int, DatasetShard] = {}
    for node_id, shard, val_shard in zip(config.trainer_ids, shards, val_shards):
        trainer_train[node_id] = subsample(
            shard, config.shard_size, derive_seed(seed, "shard", node_id)
        )
        trainer_val[node_id] = val_shard

    rng = stream(seed, "malicious-assignment")
    chosen = rng.choice(config.num_trainers, size=config.num_malicious, replace=False)
    malicious = frozenset(int(i) for i in chosen)

    initial = init_model(arch, derive_seed(seed, "global-init"))
    genesis = make_block(
        [GlobalModelTx(0, (), initial)], TxType.GM, miners=(), prev=None, timestamp=0
    )

    all_ids = (*config.trainer_ids, *config.blockchain_ids)
    stores = {
        node_id: NodeBlockStore(
            node_id,
            store_optional=config.store_optional_blocks and node_id in config.trainer_ids,
        )
        for node_id in all_ids
    }
    for node_id in config.trainer_ids:
        persist_block(stores[node_id], genesis, Role.TRAINER)
    for node_id in config.blockchain_ids:
        persist_block(stores[node_id], genesis, Role.BLOCKCHAIN)

    return SimState(
        config=config,
        arch=arch,
        trainer_train=trainer_train,
        trainer_val=trainer_val,
        test_set=test_set,
        chain=[genesis],
        cas=ContentStore(),
        stakes=StakeLedger.fresh(all_ids),
        stores=stores,
        malicious_ids=malicious,
        last_updates=[],
        last_global=GlobalModel(0, (), initial),
        an_counts={node_id: 0 for node_id in all_ids},
    )


def _latest_global_params(chain: list[Block]) -> ParamVector:
    for block in reversed(chain):
        if block.header.tx_type is TxType.GM and block.transactions:
            return block.transactions[0].params
    raise RuntimeError("no global-model block on the chain")


def run_round(state: SimState, round_index: int) -> tuple[SimState, RoundMetrics]:
    """Execute one full protocol round and return the round's metrics."""
    try:
        return _run_round(state, round_index)
    except Exception as exc:
        raise RuntimeError(f"round {round_index} aborted: {exc}") from exc


def _run_round(state: SimState, round_index: int) -> tuple[SimState, RoundMetrics]:
    cfg = state.config
    seed = cfg.seed

    aggregator_ids, vs_global_records = ppcc_select(
        state.last_updates,
        state.last_global,
        cfg.num_aggregators,
        cfg.trainer_ids,
        seed=(seed, "ppcc", round_index),
    )
    trainers = [i for i in cfg.trainer_ids if i not in aggregator_ids]

    start = _latest_global_params(state.chain)
    cid_txs: list[CidTx] = []
    for node_id in trainers:
        trained = local_train(
            start,
            state.trainer_train[node_id],
            cfg.hyperparams,
            derive_seed(seed, "train", round_index, node_id),
        )
        if node_id in state.malicious_ids:
            trained = apply_attack(cfg.attack, trained, (seed, "attack", round_index, node_id))
        cid = state.cas.put(encode_params(trained))
        cid_txs.append(CidTx(node_id, round_index, cid))

    head = state.chain[-1].header
    cid_block = make_block(cid_txs, TxType.CID, aggregator_ids, head, timestamp=round_index)
    new_blocks = [cid_block]

    # aggregation works from the published models, not the in-memory ones
    fetched = [
        ModelUpdate(tx.node_id, tx.round_index, decode_params(state.cas.get(tx.cid)))
        for tx in cid_txs
    ]

    avr_txs: list[AccuracyRecordTx] = []
    pcc_txs: list[PccRecordTx] = [
        PccRecordTx(round_index, rec.node_id, rec.rho, VS_GLOBAL, None)
        for rec in vs_global_records
    ]
    if cfg.aggregator == PSA:
        validators = [
            ClusterValidator(an, lambda pv, shard=state.trainer_val[an]: evaluate_accuracy(pv, shard))
            for an in aggregator_ids
        ]
        result = psa_aggregate(
            fetched, validators, cfg.num_clusters, seed=(seed, "psa", round_index)
        )
        global_model = result.global_model
        winners = result.winning_member_ids
        for rec in result.records:
            avr_txs.append(
                AccuracyRecordTx(
                    round_index,
                    rec.cluster_index,
                    tuple(sorted(rec.accuracies.items())),
                    rec.mean_accuracy,
                )
            )
        entries = result.pcc.entries
        for j in range(len(fetched)):
            for k in range(j + 1, len(fetched)):
                pcc_txs.append(
                    PccRecordTx(
                        round_index,
                        fetched[j].node_id,
                        float(entries[j, k]),
                        VS_LOCAL,
                        fetched[k].node_id,
                    )
                )
    else:
        params = BASELINES[cfg.aggregator](fetched)
        global_model = GlobalModel(round_index, aggregator_ids, params)
        # baselines have no winning-cluster notion; every submitter earns stake
        winners = tuple(sorted(u.node_id for u in fetched))

    gm_block = make_block(
        [GlobalModelTx(round_index, aggregator_ids, global_model.params)],
        TxType.GM,
        aggregator_ids,
        cid_block.header,
        timestamp=round_index,
    )
    new_blocks.append(gm_block)
    prev_header = gm_block.header
    if cfg.aggregator == PSA:
        avr_block = make_block(
            avr_txs, TxType.AVR, aggregator_ids, prev_header, timestamp=round_index
        )
        new_blocks.append(avr_block)
        prev_header = avr_block.header
    pcc_block = make_block(pcc_txs, TxType.PCC, aggregator_ids, prev_header, timestamp=round_index)
    new_blocks.append(pcc_block)

    state.stakes = apply_stake_rewards(state.stakes, winners, aggregator_ids)

    for node_id in cfg.trainer_ids:
        role = Role.AGGREGATOR if node_id in aggregator_ids else Role.TRAINER
        for block in new_blocks:
            persist_block(state.stores[node_id], block, role)
    for node_id in cfg.blockchain_ids:
        for block in new_blocks:
            persist_block(state.stores[node_id], block, Role.BLOCKCHAIN)

    state.chain.extend(new_blocks)
    state.last_updates = fetched
    state.last_global = global_model
    for an in aggregator_ids:
        state.an_counts[an] += 1

    accuracy = evaluate_accuracy(global_model.params, state.test_set)
    metrics = RoundMetrics(
        round_index=round_index,
        accuracy=accuracy,
        stakes=dict(state.stakes.balances),
        stored_bytes={nid: store.bytes_stored for nid, store in state.stores.items()},
        aggregator_ids=aggregator_ids,
        an_counts=dict(state.an_counts),
        winning_member_ids=winners,
    )
    log.info(
        "round %d [%s]: accuracy=%.4f aggregators=%s",
        round_index,
        cfg.aggregator,
        accuracy,
        list(aggregator_ids),
    )
    return state, metrics


def dataset_paths(data_dir: Path | str, name: str) -> tuple[Path, Path, Path, Path]:
    """Locate the four IDX files for ``name`` under ``data_dir`` (gz or raw)."""
    candidates = [Path(data_dir) / name, Path(data_dir)]
    names = (synth.TRAIN_IMAGES, synth.TRAIN_LABELS, synth.TEST_IMAGES, synth.TEST_LABELS)
    for base in candidates:
        resolved = []
        for fname in names:
            gz, raw = base / fname, base / fname.removesuffix(".gz")
            if gz.is_file():
                resolved.append(gz)
            elif raw.is_file():
                resolved.append(raw)
            else:
                break
        if len(resolved) == len(names):
            return tuple(resolved)
    raise FileNotFoundError(
        f"dataset {name!r} not found under {data_dir} "
        f"(expected {', '.join(names)} in {candidates[0]} or {candidates[1]})"
    )


def load_dataset_dir(data_dir: Path | str, name: str) -> tuple[DatasetShard, DatasetShard]:
    """Load (train, test) shards for a named dataset from a data directory."""
    train_images, train_labels, test_images, test_labels = dataset_paths(data_dir, name)
    return load_idx(train_images, train_labels), load_idx(test_images, test_labels)


def _resolve_data_dir(config: SimConfig) -> Path:
    if config.data_dir:
        return Path(config.data_dir)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise FileNotFoundError(
        f"no dataset location: set SimConfig.data_dir or the {DATA_DIR_ENV} env var"
    )


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def _config_json(config: SimConfig) -> dict:
    return {
        "dataset": config.dataset,
        "distribution": config.distribution,
        "attack": {
            "kind": config.attack.kind.value,
            "noise_variance": config.attack.noise_variance,
            "flip_scale": config.attack.flip_scale,
        },
        "malicious_fraction": config.malicious_fraction,
        "num_trainers": config.num_trainers,
        "num_aggregators": config.num_aggregators,
        "num_blockchain_nodes": config.num_blockchain_nodes,
        "rounds": config.rounds,
        "hyperparams": {
            "batch_size": config.hyperparams.batch_size,
            "optimizer": config.hyperparams.optimizer,
            "learning_rate": config.hyperparams.learning_rate,
            "local_epochs": config.hyperparams.local_epochs,
        },
        "num_clusters": config.num_clusters,
        "aggregator": config.aggregator,
        "seed": config.seed,
        "layer_dims": list(config.layer_dims),
        "shard_size": config.shard_size,
        "test_size": config.test_size,
        "validation_fraction": config.validation_fraction,
        "shards_per_node": config.shards_per_node,
        "store_optional_blocks": config.store_optional_blocks,
    }


def write_outputs(
    out_dir: Path, state: SimState, metrics: list[RoundMetrics], config: SimConfig
) -> None:
    """Write the metric CSVs, the chain export, and the resolved-config echo."""
    out_dir.mkdir(parents=True, exist_ok=True)
    node_ids = sorted(state.stores)

    _write_csv(
        out_dir / "accuracy.csv",
        "round,accuracy",
        [f"{m.round_index},{m.accuracy!r}" for m in metrics],
    )
    _write_csv(
        out_dir / "stakes.csv",
        "round,node_id,stake",
        [
            f"{m.round_index},{nid},{m.stakes.get(nid, 0)}"
            for m in metrics
            for nid in node_ids
        ],
    )
    _write_csv(
        out_dir / "chain_size.csv",
        "round,node_id,bytes",
        [
            f"{m.round_index},{nid},{m.stored_bytes.get(nid, 0)}"
            for m in metrics
            for nid in node_ids
        ],
    )
    an_rows = (
        [f"{nid},{metrics[-1].an_counts.get(nid, 0)}" for nid in node_ids] if metrics else []
    )
    _write_csv(out_dir / "an_counts.csv", "node_id,count", an_rows)

    write_chain_jsonl(state.chain, out_dir / "chain.jsonl")

    echo = {
        "config": _config_json(config),
        "node_ids": {
            "trainers": list(config.trainer_ids),
            "blockchain": list(config.blockchain_ids),
        },
        "malicious_ids": sorted(state.malicious_ids),
    }
    with open(out_dir / "config-echo.json", "w", encoding="utf-8") as fh:
        json.dump(echo, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_experiment(config: SimConfig) -> ExperimentResult:
    """Load data, run all rounds, and (if configured) write the output files."""
    data_dir = _resolve_data_dir(config)
    train_data, test_data = load_dataset_dir(data_dir, config.dataset)

    # one BLAS thread keeps reductions bit-identical across host thread counts
    with threadpool_limits(limits=1):
        state = init_state(config, train_data, test_data)
        metrics: list[RoundMetrics] = []
        for round_index in range(1, config.rounds + 1):
            state, round_metrics = run_round(state, round_index)
            metrics.append(round_metrics)

    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir is not None:
        write_outputs(out_dir, state, metrics, config)

    return ExperimentResult(
        config=config,
        metrics=metrics,
        malicious_ids=tuple(sorted(state.malicious_ids)),
        trainer_ids=config.trainer_ids,
        blockchain_ids=config.blockchain_ids,
        out_dir=out_dir,
    )
