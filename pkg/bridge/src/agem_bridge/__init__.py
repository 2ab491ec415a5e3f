"""Bridge from real backbones and benchmark ground truth to the retrieval
engine's file formats: AGTF tensors, feature_maps manifests, and
GroundTruth JSON. The engine is only ever touched through those files.
"""

from .agtf import FormatError, read_tensor, write_tensor
from .backbone import RESNET_TAPS, TapBackbone, resnet101_taps
from .export import (AGEM_TAPS, PLAIN_TAPS, export_feature_maps, load_image,
                     resize_longer_side, subset_manifest, to_batch)
from .ground_truth import convert_ground_truth

__version__ = "0.1.0"
