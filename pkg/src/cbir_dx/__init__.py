"""Retrieval-based diagnosis evaluation over deep-feature embeddings.

The library side of the `cbir-dx` tool: dataset loading with split hygiene,
exact top-k cosine retrieval, neighbor-vote classification, evaluation
metrics, the inferential statistics used to compare predictors, synthetic
fixtures with brute-force oracles, and the experiment grid runner.
"""

from .classify import (
    ClassDistribution,
    cbir_distribution,
    cbir_malignancy,
    cbir_top1,
    default_malignant_set,
    malignant_set,
    softmax_distribution,
    softmax_malignancy,
    softmax_top1,
)
from .datasets import (
    Dataset,
    EmbeddingRecord,
    RetrievalPool,
    SoftmaxTable,
    assign_splits,
    build_retrieval_pool,
    load_manifest,
    load_softmax,
    write_manifest,
    write_softmax,
)
from .errors import OracleCapError, ValidationError
from .experiment import (
    ExperimentConfig,
    ExperimentGrid,
    MetricRecord,
    SimilarityReport,
    emit_reports,
    load_config,
    run_cross,
    run_intra,
    similarity_report,
)
from .index import (
    NormalizedIndex,
    RetrievalResult,
    batch_top_k,
    build_index,
    cosine,
    top_k,
)
from .metrics import (
    MapResult,
    OperatingPoint,
    RocAnalysis,
    average_precision,
    mean_average_precision,
    multiclass_accuracy,
    operating_point,
    rank_auc,
    roc_auc,
)
from .stats import (
    AucComparison,
    ConfidenceInterval,
    PairedTestResult,
    bootstrap_ci,
    delong_compare,
    holm_adjust,
    holm_not_evaluated,
    normality_gate,
    paired_t,
    paired_test,
    wilcoxon_signed_rank,
)
from .synth import (
    SynthSpec,
    brute_ap,
    brute_auc,
    brute_top_k,
    brute_wilcoxon_exact,
    generate,
    load_synth_spec,
    restrict_softmax,
)

__version__ = "0.1.0"

__all__ = [
    "AucComparison",
    "ClassDistribution",
    "ConfidenceInterval",
    "Dataset",
    "EmbeddingRecord",
    "ExperimentConfig",
    "ExperimentGrid",
    "MapResult",
    "MetricRecord",
    "NormalizedIndex",
    "OperatingPoint",
    "OracleCapError",
    "PairedTestResult",
    "RetrievalPool",
    "RetrievalResult",
    "RocAnalysis",
    "SimilarityReport",
    "SoftmaxTable",
    "SynthSpec",
    "ValidationError",
    "assign_splits",
    "average_precision",
    "batch_top_k",
    "bootstrap_ci",
    "brute_ap",
    "brute_auc",
    "brute_top_k",
    "brute_wilcoxon_exact",
    "build_index",
    "build_retrieval_pool",
    "cbir_distribution",
    "cbir_malignancy",
    "cbir_top1",
    "cosine",
    "default_malignant_set",
    "delong_compare",
    "emit_reports",
    "generate",
    "holm_adjust",
    "holm_not_evaluated",
    "load_config",
    "load_manifest",
    "load_softmax",
    "load_synth_spec",
    "malignant_set",
    "mean_average_precision",
    "multiclass_accuracy",
    "normality_gate",
    "operating_point",
    "paired_t",
    "paired_test",
    "rank_auc",
    "restrict_softmax",
    "roc_auc",
    "run_cross",
    "run_intra",
    "similarity_report",
    "softmax_distribution",
    "softmax_malignancy",
    "softmax_top1",
    "top_k",
    "wilcoxon_signed_rank",
    "write_manifest",
    "write_softmax",
]
