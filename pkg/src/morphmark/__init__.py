"""One-shot landmark detection: registration-based pseudo labels (stage I)
refined by consistency co-teaching of two detectors (stage II)."""

from .c2t import C2TConfig, Detector, train_c2t
from .config import PipelineConfig
from .estimators import CoTeachingLandmarker, RegistrationLandmarker, TwoStageLandmarker
from .regnet import RegistrationNet, RegnetConfig
from .stage1 import Stage1Config, train_stage1
from .synthbench import SyntheticSpec, evaluate, generate, load_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "C2TConfig",
    "CoTeachingLandmarker",
    "Detector",
    "PipelineConfig",
    "RegistrationLandmarker",
    "RegistrationNet",
    "RegnetConfig",
    "Stage1Config",
    "SyntheticSpec",
    "TwoStageLandmarker",
    "evaluate",
    "generate",
    "load_dataset",
    "train_c2t",
    "train_stage1",
    "write_dataset",
]
