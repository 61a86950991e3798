"""Detector/segmenter: encoder, prompt fusion, decoder, alignment and the set loss."""

from .boxes import box_cxcywh_to_xyxy, giou, pairwise_giou
from .deform import bilinear_sample, deform_attend
from .loss import LossBreakdown, hungarian_match, match_and_loss
from .model import DetectionSet, MIGModel, ModelConfig, MultiScaleFeatures, align

__all__ = [
    "box_cxcywh_to_xyxy", "giou", "pairwise_giou", "bilinear_sample", "deform_attend",
    "LossBreakdown", "hungarian_match", "match_and_loss", "DetectionSet", "MIGModel",
    "ModelConfig", "MultiScaleFeatures", "align",
]
