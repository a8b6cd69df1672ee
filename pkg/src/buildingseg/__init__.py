"""Building-footprint segmentation from aerial imagery.

Nested dense-skip decoders (deep supervision, prunable at inference) over a
family of compound-scaled convolutional encoders, trained with dice loss and
evaluated with pixel-wise accuracy/precision/recall/F1/IoU/kappa under two
aggregation modes.
"""

from .efficientnet import EfficientNet, make_encoder
from .errors import BuildingSegError
from .manifest import DatasetManifest, build_manifest
from .metrics import ConfusionCounts, MetricScores, dice_loss
from .runconfig import RunConfig
from .training import Checkpoint, TrainConfig, TrainingHistory, train
from .transforms import AugmentationPolicy, denormalize, normalize
from .unetpp import DecoderConfig, SegmentationModel, build_model, prune

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy",
    "BuildingSegError",
    "Checkpoint",
    "ConfusionCounts",
    "DatasetManifest",
    "DecoderConfig",
    "EfficientNet",
    "MetricScores",
    "RunConfig",
    "SegmentationModel",
    "TrainConfig",
    "TrainingHistory",
    "build_manifest",
    "build_model",
    "denormalize",
    "dice_loss",
    "make_encoder",
    "normalize",
    "prune",
    "train",
    "__version__",
]
