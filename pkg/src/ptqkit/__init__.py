"""Post-training weight quantization with attention round and coding-length bit allocation."""
from .bits import BitAssignment, CodingConfig, assign_bits, coding_length, kmeans_1d
from .calibration import CalibRecord, HyperParams, calibrate_layer, quantize_model, search_scale
from .errors import ConfigError
from .graph import ModelGraph, accuracy, forward, fuse_bn, toy_cnn, train_baseline
from .io import DatasetHandle, load_idx, load_model, save_model
from .quantizers import AlphaState, QuantSpec, attention_forward, attention_init, quantize_nearest

__all__ = [
    "AlphaState", "BitAssignment", "CalibRecord", "CodingConfig", "ConfigError", "DatasetHandle",
    "HyperParams", "ModelGraph", "QuantSpec", "accuracy", "assign_bits", "attention_forward",
    "attention_init", "calibrate_layer", "coding_length", "forward", "fuse_bn", "kmeans_1d",
    "load_idx", "load_model", "quantize_model", "quantize_nearest", "save_model", "search_scale",
    "toy_cnn", "train_baseline",
]
