"""Dataset format, preprocessing, augmentation, sampling and synthetic scans."""
from .augment import (ATTENTION, CLASSIFICATION, IDENTITY, AugmentConfig, augment_attention,
                      augment_classification, bilinear_sample, prepare_eval, resize_bilinear,
                      rotate_image, sample_gaze_crop, warp_affine)
from .dataset import Dataset, DatasetError, FrameRecord, FrameSample, load_dataset, write_dataset
from .pgm import PGMError, read_pgm, write_pgm
from .preprocess import filter_valid, normalize_image, scans_of, split_by_scan, temporal_subsample
from .sampler import balanced_sampler
from .synth import SHAPES, SynthConfig, expected_class_counts, render_scan, synth_generate

__all__ = [
    "ATTENTION", "CLASSIFICATION", "IDENTITY", "AugmentConfig", "augment_attention",
    "augment_classification", "bilinear_sample", "prepare_eval", "resize_bilinear", "rotate_image",
    "sample_gaze_crop", "warp_affine", "Dataset", "DatasetError", "FrameRecord", "FrameSample",
    "load_dataset", "write_dataset", "PGMError", "read_pgm", "write_pgm", "filter_valid",
    "normalize_image", "scans_of", "split_by_scan", "temporal_subsample", "balanced_sampler",
    "SHAPES", "SynthConfig", "expected_class_counts", "render_scan", "synth_generate",
]
