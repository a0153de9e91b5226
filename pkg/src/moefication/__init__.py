"""MoEfication toolkit: split trained ReLU FFNs into equal-size experts,
route inputs to a few of them, and calibrate the result."""

from .ffn import FfnWeights, ffn_forward, ffn_preactivation, grad_check, relu
from .modelio import (
    Dataset,
    FormatError,
    gen_synthetic,
    load_dataset_csv,
    load_model,
    save_dataset_csv,
    save_model,
    train_toy_ffn,
)
from .profiling import ActivationTrace, SparsityReport, record_trace, sparsity_report
from .splitters import (
    ClusterSplit,
    CoactivationSplit,
    CoActivationGraph,
    ExpertPartition,
    ExpertWeights,
    RandomSplit,
    SPLITTERS,
    build_coactivation_graph,
    materialize_experts,
    split_cluster,
    split_coactivation,
    split_random,
)
from .routers import (
    GroundtruthRouter,
    LearnableRouter,
    ParamCenterRouter,
    ROUTERS,
    RandomCenterRouter,
    load_router,
    save_router,
    score_groundtruth,
    score_learnable,
    score_param_center,
    score_random_center,
    select_top_n,
    train_learnable_router,
)
from .engine import EvalReport, MoefiedFfn, calibrate, evaluate, moefy

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
