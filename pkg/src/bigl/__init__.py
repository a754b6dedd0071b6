"""Unsupervised cross-modality segmentation with image synthesis and global-to-local alignment."""

__version__ = "0.1.0"

from .domain import (Domain, LabelMask, LabelScheme, LossReport, Slice2D, TrainConfig,
                     UnpairedBatch, normalize_slice, remap_labels, restore_labels)
from .errors import BiGLError
from .segnet import SegNet, segment, segmentation_loss
from .synthesis import Direction, GeneratorNet, ImageDiscriminatorNet, generate
from .gtl import Level, Stage, total_loss
from .metrics import MetricsReport, asd, dice, evaluate_split, hd95
from .data import PhantomSpec, generate_phantom, load_cases, make_slice_stream, split_cases
from .trainer import source_only_baseline, train_stage1, train_stage2

__all__ = [
    "Domain", "LabelMask", "LabelScheme", "LossReport", "Slice2D", "TrainConfig", "UnpairedBatch",
    "normalize_slice", "remap_labels", "restore_labels", "BiGLError", "SegNet", "segment",
    "segmentation_loss", "Direction", "GeneratorNet", "ImageDiscriminatorNet", "generate", "Level",
    "Stage", "total_loss", "MetricsReport", "asd", "dice", "evaluate_split", "hd95", "PhantomSpec",
    "generate_phantom", "load_cases", "make_slice_stream", "split_cases", "source_only_baseline",
    "train_stage1", "train_stage2",
]
