"""Value types, label conventions and configuration shared by every module."""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import EmptyImage, LabelSchemeViolation, ShapeMismatch


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"
    SYN_SOURCE = "syn_source"
    SYN_TARGET = "syn_target"


class LabelScheme(str, enum.Enum):
    BRATS = "brats"
    CARDIAC = "cardiac"


# raw on-disk label -> contiguous class index
LABEL_MAPS = {
    LabelScheme.BRATS: {0: 0, 1: 1, 2: 2, 4: 3},
    # MMWHS encoding: MYO 205, LA 420, LV 500, AA 820
    LabelScheme.CARDIAC: {0: 0, 820: 1, 420: 2, 500: 3, 205: 4},
}

CLASS_NAMES = {
    LabelScheme.BRATS: ("background", "NCR/NET", "ED", "ET"),
    LabelScheme.CARDIAC: ("background", "AA", "LAC", "LVC", "MYO"),
}

STD_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Slice2D:
    pixels: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    domain: Domain = Domain.SOURCE
    case_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] == 0 or px.shape[1] == 0:
            raise ShapeMismatch(f"slice must be a nonempty H x W grid, got shape {px.shape}")
        if len(self.spacing) != 2 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be positive, got {self.spacing}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "domain", Domain(self.domain))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, **changes) -> "Slice2D":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class LabelMask:
    classes: np.ndarray
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        cls = np.asarray(self.classes)
        if cls.ndim != 2:
            raise ShapeMismatch(f"label mask must be H x W, got shape {cls.shape}")
        if not np.issubdtype(cls.dtype, np.integer):
            raise TypeError("label mask must hold integers")
        cls = cls.astype(np.int64)
        if cls.size and (cls.min() < 0 or cls.max() >= self.num_classes):
            raise LabelSchemeViolation(
                f"class values must lie in 0..{self.num_classes - 1}, "
                f"got range [{cls.min()}, {cls.max()}]"
            )
        cls.setflags(write=False)
        object.__setattr__(self, "classes", cls)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


@dataclass(frozen=True)
class UnpairedBatch:
    """Labeled source samples and unlabeled target samples, paired only by position."""

    source: tuple
    target: tuple

    def __post_init__(self):
        source = tuple(self.source)
        target = tuple(self.target)
        if len(source) != len(target):
            raise ValueError(f"source/target lengths differ: {len(source)} vs {len(target)}")
        for item in target:
            if not isinstance(item, Slice2D):
                raise TypeError("target entries must be bare Slice2D values (no labels)")
        for item in source:
            x, y = item
            if x.shape != y.shape:
                raise ShapeMismatch(f"source slice {x.shape} and mask {y.shape} differ")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "target", target)

    def __len__(self):
        return len(self.source)

    def tensors(self, device="cpu"):
        """Stack into ``(x_s, y_s, x_t)`` tensors shaped (B,1,H,W), (B,H,W), (B,1,H,W)."""
        import torch

        x_s = np.stack([x.pixels for x, _ in self.source])[:, None]
        y_s = np.stack([y.classes for _, y in self.source])
        x_t = np.stack([x.pixels for x in self.target])[:, None]
        return (
            torch.from_numpy(x_s).to(device),
            torch.from_numpy(y_s).to(device),
            torch.from_numpy(x_t).to(device),
        )


@dataclass
class TrainConfig:
    lambda_out: float = 0.001
    lambda_gtl: float = 0.1
    lambda_syn: float = 0.01
    lambda_feat: float = 0.1
    lambda_att_pos: float = 0.1
    lambda_att_cha: float = 0.1
    lambda_rec: float = 10.0
    cycle_reconstruction: bool = False
    base_lr: float = 5e-3
    lr_power: float = 0.75
    momentum: float = 0.9
    disc_lr: float = 5e-5
    syn_lr: float = 2e-4
    epochs: int = 150
    syn_epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    seg_width: int = 32
    gen_width: int = 16
    disc_width: int = 16
    align_output: bool = True
    align_feature: bool = True
    align_attention: bool = True
    ckpt_every: int = 10

    WEIGHTS = ("lambda_out", "lambda_gtl", "lambda_syn", "lambda_feat",
               "lambda_att_pos", "lambda_att_cha", "lambda_rec")
    RATES = ("base_lr", "disc_lr", "syn_lr")

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in self.WEIGHTS:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be strictly positive, got {v}")
        # zero rates are allowed: the no-op training contracts rely on them
        for name in self.RATES:
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be nonnegative, got {v}")
        if self.lr_power <= 0:
            raise ValueError("lr_power must be positive")
        if self.epochs < 0 or self.syn_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1 or self.num_classes < 2:
            raise ValueError("batch_size must be >= 1 and num_classes >= 2")
        if len(self.image_size) != 2 or any(s % 16 for s in self.image_size):
            raise ValueError(f"image_size must be two multiples of 16, got {self.image_size}")
        if self.ckpt_every < 1:
            raise ValueError("ckpt_every must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


LOSS_COMPONENTS = (
    "seg_s", "seg_syn_s", "output_consis", "feat_consis", "att_consis_pos",
    "att_consis_cha", "adv_feat_s", "adv_feat_t", "adv_att_s", "adv_att_t",
    "gen_syn", "disc_syn",
)


@dataclass(frozen=True)
class LossReport:
    components: Mapping[str, float]
    total: float
    iteration: int = 0

    def __post_init__(self):
        comps = {k: float(v) for k, v in self.components.items()}
        unknown = set(comps) - set(LOSS_COMPONENTS)
        if unknown:
            raise KeyError(f"unknown loss component(s): {sorted(unknown)}")
        bad = [k for k, v in comps.items() if not math.isfinite(v)]
        if bad or not math.isfinite(self.total):
            raise ValueError(f"non-finite loss values: {bad or ['total']}")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "total", float(self.total))

    def __getitem__(self, key):
        if key == "total":
            return self.total
        return self.components[key]

    def as_record(self) -> dict:
        return {"iteration": self.iteration, **self.components, "total": self.total}


def normalize_slice(raw, spacing=(1.0, 1.0), **meta) -> Slice2D:
    """Z-score a slice over its nonzero support; background pixels stay exactly zero."""
    px = np.asarray(raw, dtype=np.float64)
    if px.size == 0:
        raise EmptyImage("empty grid")
    support = px != 0
    if not support.any():
        raise EmptyImage("grid has no nonzero pixels")
    vals = px[support]
    mean = vals.mean()
    std = vals.std()
    if std < STD_FLOOR:
        std = 1.0
    out = np.zeros_like(px)
    out[support] = (vals - mean) / std
    return Slice2D(out, spacing=spacing, **meta)


def remap_labels(raw_mask, scheme=LabelScheme.BRATS) -> LabelMask:
    scheme = LabelScheme(scheme)
    table = LABEL_MAPS[scheme]
    raw = np.asarray(raw_mask)
    if not np.issubdtype(raw.dtype, np.integer):
        if not np.all(np.equal(np.mod(raw, 1), 0)):
            raise LabelSchemeViolation("label grid contains non-integer values")
        raw = raw.astype(np.int64)
    values = np.unique(raw)
    unknown = [int(v) for v in values if int(v) not in table]
    if unknown:
        raise LabelSchemeViolation(
            f"raw label {unknown[0]} is not part of the {scheme.value} scheme "
            f"(allowed: {sorted(table)})"
        )
    out = np.zeros(raw.shape, dtype=np.int64)
    for src, dst in table.items():
        out[raw == src] = dst
    return LabelMask(out, num_classes=len(table), class_names=CLASS_NAMES[scheme])


def restore_labels(mask: LabelMask, scheme=LabelScheme.BRATS) -> np.ndarray:
    """Inverse of :func:`remap_labels`."""
    inverse = {dst: src for src, dst in LABEL_MAPS[LabelScheme(scheme)].items()}
    lut = np.array([inverse[i] for i in range(len(inverse))], dtype=np.int64)
    return lut[mask.classes]


# z-scores are divided by this and clipped so every network sees [-1, 1] inputs,
# the range a tanh generator can reproduce
MODEL_RANGE_SCALE = 4.0


def to_model_range(z):
    """Map z-scored intensities (array or tensor) into the [-1, 1] network range."""
    if isinstance(z, np.ndarray):
        return np.clip(z / MODEL_RANGE_SCALE, -1.0, 1.0)
    return (z / MODEL_RANGE_SCALE).clamp(-1.0, 1.0)


def from_model_range(x):
    return x * MODEL_RANGE_SCALE
