"""fedleak: federated-learning simulator and label-count recovery toolkit."""

from ._kernels import NUMBA_ENABLED
from .attack import (
    AttackParams,
    AttackReport,
    ConfusionMatrix,
    DegenerateUpdateError,
    LogitMoments,
    SchemeCoefficients,
    build_system,
    estimate_embedding_norm,
    estimate_moments,
    make_target,
    mc_confusion,
    posterior_search,
    rlu_attack,
    round_counts,
    scheme_coefficients,
    solve_simplex_ls,
)
from .data import (
    BatchPlan,
    Dataset,
    Partition,
    dirichlet_partition,
    make_auxiliary,
    make_synthetic,
    plan_batches,
)
from .fedsim import (
    LocalUpdate,
    SchemeConfig,
    UpdateHistory,
    local_train,
    run_round,
    scaffold_update_control,
    server_aggregate,
)
from .metrics import RecoveryScore, cacc, iacc, score, summarize
from .nn import Model, ParamVec, backward, forward, init_model, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "AttackParams",
    "AttackReport",
    "ConfusionMatrix",
    "DegenerateUpdateError",
    "LogitMoments",
    "SchemeCoefficients",
    "build_system",
    "estimate_embedding_norm",
    "estimate_moments",
    "make_target",
    "mc_confusion",
    "posterior_search",
    "rlu_attack",
    "round_counts",
    "scheme_coefficients",
    "solve_simplex_ls",
    "BatchPlan",
    "Dataset",
    "Partition",
    "dirichlet_partition",
    "make_auxiliary",
    "make_synthetic",
    "plan_batches",
    "LocalUpdate",
    "SchemeConfig",
    "UpdateHistory",
    "local_train",
    "run_round",
    "scaffold_update_control",
    "server_aggregate",
    "RecoveryScore",
    "cacc",
    "iacc",
    "score",
    "summarize",
    "Model",
    "ParamVec",
    "backward",
    "forward",
    "init_model",
    "load_model",
    "save_model",
    "__version__",
]
