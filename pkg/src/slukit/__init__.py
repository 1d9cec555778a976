"""slukit: joint intent classification and entity tagging with
language-model-based unsupervised transfer."""

__version__ = "0.1.0"

from .corpus import (
    Dataset,
    LabelSpace,
    UnlabeledCorpus,
    Utterance,
    Vocabulary,
    build_vocab,
    load_labeled,
    load_unlabeled,
    sample_low_resource,
)
from .metrics import (
    EvalPair,
    MetricReport,
    entity_f1,
    evaluate,
    intent_accuracy,
    paired_significance,
    sentence_error_rate,
)
from .model import ModelConfig, Prediction, SLUModel, build_model, replace_heads
from .schedules import ScheduleConfig, early_stop, group_lr, tlr_lr, unfreeze_plan
from .transfer import (
    PipelineSpec,
    RunRecord,
    low_resource_sweep,
    run_pipeline,
    train_elmo_plus_st,
    train_elmol_plus_st,
    train_ut,
)

__all__ = [
    "Dataset",
    "LabelSpace",
    "UnlabeledCorpus",
    "Utterance",
    "Vocabulary",
    "build_vocab",
    "load_labeled",
    "load_unlabeled",
    "sample_low_resource",
    "EvalPair",
    "MetricReport",
    "entity_f1",
    "evaluate",
    "intent_accuracy",
    "paired_significance",
    "sentence_error_rate",
    "ModelConfig",
    "Prediction",
    "SLUModel",
    "build_model",
    "replace_heads",
    "ScheduleConfig",
    "early_stop",
    "group_lr",
    "tlr_lr",
    "unfreeze_plan",
    "PipelineSpec",
    "RunRecord",
    "low_resource_sweep",
    "run_pipeline",
    "train_elmo_plus_st",
    "train_elmol_plus_st",
    "train_ut",
]
