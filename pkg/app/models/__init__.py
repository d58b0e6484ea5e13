"""網路模型 (Network Models)"""

from app.models.backbone import EncoderState, RestorationBackbone, restore
from app.models.feature_extractor import ClassAverageBank, FeatureExtractor
from app.models.hyper import HyperMLP, ParameterStore
from app.models.perceptual import PerceptualProxy

__all__ = [
    "EncoderState",
    "RestorationBackbone",
    "restore",
    "ClassAverageBank",
    "FeatureExtractor",
    "HyperMLP",
    "ParameterStore",
    "PerceptualProxy",
]
