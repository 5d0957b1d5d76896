from trafficbench.attack.classifiers import (
    CLASSIFIER_KINDS,
    predict_topk,
    train_classifier,
)
from trafficbench.attack.fusion import (
    FusionHyper,
    FusionNet,
    build_fusion_net,
    gradient_check,
    train_fusion,
)
from trafficbench.attack.pipeline import (
    PipelineConfig,
    WindowDataset,
    attack_pipeline,
    derive_seed,
)

__all__ = [
    "CLASSIFIER_KINDS",
    "FusionHyper",
    "FusionNet",
    "PipelineConfig",
    "WindowDataset",
    "attack_pipeline",
    "build_fusion_net",
    "derive_seed",
    "gradient_check",
    "predict_topk",
    "train_classifier",
    "train_fusion",
]
