"""Modality-decoupled RGB-thermal detection with per-stage query fusion."""

from .datagen import SceneSpec, degrade_contrast, export_coco, generate_dataset, generate_scene, import_coco
from .detector import BranchDetector, DetectorConfig, ProposalSet
from .evaluation import EvalResult, coco_map
from .fusion import FusionConfig, fuse, select_topk
from .model import Detection, MdqfModel, postprocess
from .training import LossWeights, TrainConfig, train_joint, train_separate

__version__ = "0.1.0"
