"""Environment-adaptive preference optimization for rare-event binary classification.

Two-stage pipeline: ERM pretraining of a logit model, then fine-tuning on a
k-nearest-neighbour manifold retrieved around unlabeled test inputs with a
combined supervised + DPO objective.
"""

from eapo.data import (
    Dataset,
    Record,
    Schema,
    Standardizer,
    SyntheticConfig,
    apply_standardizer,
    export_table,
    fit_standardizer,
    generate_synthetic,
    load_table,
)
from eapo.evaluation import (
    EvalReport,
    IntensityBreakdown,
    intensity_breakdown,
    metrics_at_threshold,
    roc_auc,
    select_threshold_pr,
)
from eapo.model import Classifier, ReferencePolicy, freeze_reference, init_classifier
from eapo.objectives import EAPOWeights, FocalParams, LossValue, bce, dpo, eapo_batch, focal
from eapo.retrieval import (
    ExtremeSubset,
    LocalManifold,
    PreferencePair,
    build_local_manifold,
    extract_extreme,
    make_preference_pairs,
    neighborhood,
)
from eapo.training import (
    AdamState,
    FinetuneConfig,
    PretrainConfig,
    TrainHistory,
    adam_step,
    finetune,
    pretrain,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Classifier",
    "Dataset",
    "EAPOWeights",
    "EvalReport",
    "ExtremeSubset",
    "FinetuneConfig",
    "FocalParams",
    "IntensityBreakdown",
    "LocalManifold",
    "LossValue",
    "PreferencePair",
    "PretrainConfig",
    "Record",
    "ReferencePolicy",
    "Schema",
    "Standardizer",
    "SyntheticConfig",
    "TrainHistory",
    "adam_step",
    "apply_standardizer",
    "bce",
    "build_local_manifold",
    "dpo",
    "eapo_batch",
    "export_table",
    "extract_extreme",
    "finetune",
    "fit_standardizer",
    "focal",
    "freeze_reference",
    "generate_synthetic",
    "init_classifier",
    "intensity_breakdown",
    "load_table",
    "make_preference_pairs",
    "metrics_at_threshold",
    "neighborhood",
    "pretrain",
    "roc_auc",
    "select_threshold_pr",
]
