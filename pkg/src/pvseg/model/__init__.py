from pvseg.model.backbone import Backbone, FeaturePyramid, extract_features
from pvseg.model.config import (
    BACKGROUND_CLASS,
    NUM_CLASSES,
    PV_CLASS,
    BackboneConfig,
    ModelConfig,
)
from pvseg.model.mask_decoder import (
    DecoderOutput,
    DecoderStep,
    MaskedAttentionDecoder,
    MaskSet,
    masked_cross_attention,
    predict_masks,
    semantic_inference,
)
from pvseg.model.pixel_decoder import (
    EncodedPyramid,
    MultiScaleEncoder,
    PerPixelEmbedding,
    PixelDecoder,
    TokenSequence,
)
from pvseg.model.segmenter import SegmentationModel, SegmentationOutput

__all__ = [
    "Backbone",
    "FeaturePyramid",
    "extract_features",
    "BACKGROUND_CLASS",
    "NUM_CLASSES",
    "PV_CLASS",
    "BackboneConfig",
    "ModelConfig",
    "DecoderOutput",
    "DecoderStep",
    "MaskedAttentionDecoder",
    "MaskSet",
    "masked_cross_attention",
    "predict_masks",
    "semantic_inference",
    "EncodedPyramid",
    "MultiScaleEncoder",
    "PerPixelEmbedding",
    "PixelDecoder",
    "TokenSequence",
    "SegmentationModel",
    "SegmentationOutput",
]
