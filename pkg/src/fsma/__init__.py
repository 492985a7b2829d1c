"""Few-shot class-incremental attribution of image generators.

Learns a per-image weighted integration of every block's [CLS] token from a
frozen vision-transformer encoder, then extends the trained classifier to
unseen generators from a handful of support images via training-free
prototype calibration. Ships the full session protocol, evaluation reports
and block-importance analysis.
"""

from .backbone import BackboneSpec, BlockTokenStack, ImageRecord
from .cache import FeatureCache, StackProvider
from .errors import FsmaError, ValidationError
from .head import HeadConfig, HeadParams, TrainResult
from .manifest import SessionManifest, bind_manifest, bundled_schedule, load_manifest
from .prototypes import CalibrationConfig, Prototype, PrototypeStore
from .sessions import EvalReport, SessionState

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "BlockTokenStack",
    "CalibrationConfig",
    "EvalReport",
    "FeatureCache",
    "FsmaError",
    "HeadConfig",
    "HeadParams",
    "ImageRecord",
    "Prototype",
    "PrototypeStore",
    "SessionManifest",
    "SessionState",
    "StackProvider",
    "TrainResult",
    "ValidationError",
    "bind_manifest",
    "bundled_schedule",
    "load_manifest",
    "__version__",
]
