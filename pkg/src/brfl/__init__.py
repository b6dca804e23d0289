"""Desk-scale simulator of blockchain-coordinated byzantine-robust federated
learning: correlation-based committee election, spectral aggregation with
accuracy validation, and a typed-block chain with stake rewards.
"""

from .aggregation import (
    AccuracyRecord,
    ClusterValidator,
    GlobalModel,
    ModelUpdate,
    PsaResult,
    clipped_clustering,
    cluster_means,
    krum,
    mean,
    median,
    psa_aggregate,
)
from .attacks import AttackKind, AttackSpec, apply_attack, noise_attack, sign_flip_attack
from .consensus import NodeRole, PccRecord, Role, ppcc_select
from .dataset import (
    DatasetShard,
    IdxFormatError,
    PartitionPlan,
    an_validation_set,
    load_idx,
    partition,
    subsample,
)
from .ledger import (
    AGGREGATOR_REWARD,
    FIXED_STAKE_REWARD,
    Block,
    BlockHeader,
    ChainViolation,
    Cid,
    ContentStore,
    StakeLedger,
    TxType,
    UnknownCidError,
    apply_stake_rewards,
    make_block,
    merkle_root,
    persist_block,
    verify_chain,
    verify_chain_file,
)
from .nn import (
    Hyperparams,
    LayerShape,
    ModelArch,
    ParamVector,
    TrainingDivergedError,
    evaluate_accuracy,
    evaluate_loss,
    flatten,
    init_model,
    local_train,
    unflatten,
)
from .sim import ExperimentResult, RoundMetrics, SimConfig, run_experiment, run_round
from .spectral import ClusterAssignment, jacobi_eigh, kmeans, similarity_from_pcc, spectral_cluster
from .stats import PccMatrix, ZeroVarianceError, pcc_matrix, pearson

__version__ = "0.1.0"
