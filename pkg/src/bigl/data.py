"""Dataset ingestion, patient-level splitting, slice streams and the two-domain phantom.

On-disk layout, one folder per case::

    root/<case_id>/modA.nii.gz    source-domain volume (H x W x S)
    root/<case_id>/modB.nii.gz    target-domain volume, same grid
    root/<case_id>/label.nii.gz   raw labels (BraTS encoding for the phantom)
    root/pairing_manifest.tsv     phantom only: case_id, modA path, modB path

Volumes are NIfTI; voxel spacing is read from the header zooms.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import nibabel as nib
import numpy as np
import torch
import torch.nn.functional as F

from .domain import Domain, LabelMask, LabelScheme, Slice2D, normalize_slice, remap_labels
from .errors import IncompleteCase, IngestError, InsufficientCases

VOLUME_SUFFIX = ".nii.gz"
LABEL_NAME = "label"
MANIFEST_NAME = "pairing_manifest.tsv"
MIN_SUPPORT_FRACTION = 0.01


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    volumes: dict
    label: Optional[Path]
    spacing: tuple
    shape: tuple
    split: Optional[str] = None


def _read_header(path):
    try:
        img = nib.load(str(path))
        shape = tuple(int(s) for s in img.shape)
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise IngestError(f"cannot read volume {path}: {exc}") from exc
    if len(shape) != 3:
        raise IngestError(f"{path}: expected a 3-D volume, got shape {shape}")
    if any(z <= 0 for z in zooms):
        raise IngestError(f"{path}: non-positive voxel spacing {zooms}")
    return shape, zooms


def read_volume(path) -> np.ndarray:
    try:
        return np.asanyarray(nib.load(str(path)).dataobj)
    except Exception as exc:
        raise IngestError(f"cannot read volume {path}: {exc}") from exc


def write_volume(path, data, spacing):
    affine = np.diag([*spacing, 1.0])
    try:
        nib.save(nib.Nifti1Image(data, affine), str(path))
    except Exception as exc:
        raise IngestError(f"cannot write volume {path}: {exc}") from exc


def load_cases(root, scheme=LabelScheme.BRATS, modalities=("modA", "modB"), require_labels=True):
    """Index every case folder under ``root``, validating shapes and spacings."""
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a directory")
    LabelScheme(scheme)
    records = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        vols = {}
        for mod in modalities:
            path = case_dir / f"{mod}{VOLUME_SUFFIX}"
            if not path.exists():
                raise IncompleteCase(f"case {case_dir.name}: missing modality {mod} ({path})")
            vols[mod] = path
        label = case_dir / f"{LABEL_NAME}{VOLUME_SUFFIX}"
        if not label.exists():
            if require_labels:
                raise IncompleteCase(f"case {case_dir.name}: missing label file {label}")
            label = None
        headers = {name: _read_header(p) for name, p in
                   [*vols.items(), *([(LABEL_NAME, label)] if label else [])]}
        ref_name = modalities[0]
        ref_shape, ref_zoom = headers[ref_name]
        for name, (shape, zoom) in headers.items():
            if shape != ref_shape:
                raise IngestError(f"case {case_dir.name}: {name} shape {shape} differs from "
                                  f"{ref_name} shape {ref_shape}")
            if not np.allclose(zoom, ref_zoom, rtol=1e-5):
                raise IngestError(f"case {case_dir.name}: {name} spacing {zoom} differs from "
                                  f"{ref_name} spacing {ref_zoom}")
        records.append(CaseRecord(case_dir.name, vols, label, ref_zoom, ref_shape))
    return records


def split_cases(cases: Sequence[CaseRecord], ratios=(0.7, 0.1, 0.2), seed=0):
    """Patient-level random split into (train, val, test); floor sizes, remainder to train."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    n = len(cases)
    if n < 3:
        raise InsufficientCases(f"need at least 3 cases to form 3 splits, got {n}")
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    ordered = [cases[i] for i in perm]
    chunks = (ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:])
    names = ("train", "val", "test")
    return tuple(
        sorted((dataclasses.replace(c, split=name) for c in chunk), key=lambda c: c.case_id)
        for name, chunk in zip(names, chunks)
    )


def _resize(img, size, mode):
    if tuple(img.shape) == tuple(size):
        return img
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))[None, None]
    return F.interpolate(t, size=tuple(size), mode=mode)[0, 0].numpy()


class SliceStream:
    """Axial slices of one modality, normalized and resized, with seeded epoch shuffles.

    Items are ``(Slice2D, LabelMask)`` for labeled streams and ``(Slice2D, None)``
    otherwise. Unlabeled streams hide case identity behind a per-stream salted
    hash so that no pairing key leaks across domains.
    """

    def __init__(self, items, seed, case_spacing, labeled):
        self.items = list(items)
        self.seed = seed
        self.case_spacing = dict(case_spacing)
        self.labeled = labeled

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def order(self, epoch=0):
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self.items))

    def epoch(self, epoch=0):
        return [self.items[i] for i in self.order(epoch)]

    def arrays(self):
        x = np.stack([s.pixels for s, _ in self.items])
        y = np.stack([m.classes for _, m in self.items]) if self.labeled else None
        return x, y

    def by_case(self):
        groups = {}
        for s, m in self.items:
            groups.setdefault(s.case_id, []).append((s, m))
        return {k: groups[k] for k in sorted(groups)}


def _anon(case_id, salt):
    return hashlib.sha256(f"{salt}:{case_id}".encode()).hexdigest()[:12]


def make_slice_stream(cases, modality="modA", labeled=True, seed=0, image_size=(64, 64),
                      domain=Domain.SOURCE, scheme=LabelScheme.BRATS, anonymize=None):
    if anonymize is None:
        anonymize = not labeled
    salt = f"{seed}:{modality}:{domain}"
    items, spacing = [], {}
    for case in cases:
        if labeled and case.label is None:
            raise IncompleteCase(f"case {case.case_id} has no label but the stream is labeled")
        vol = read_volume(case.volumes[modality]).astype(np.float64)
        lab = read_volume(case.label) if labeled else None
        h, w = vol.shape[:2]
        row = case.spacing[0] * h / image_size[0]
        col = case.spacing[1] * w / image_size[1]
        cid = _anon(case.case_id, salt) if anonymize else case.case_id
        spacing[cid] = (row, col, case.spacing[2])
        for k in range(vol.shape[2]):
            img = _resize(vol[:, :, k], image_size, "area")
            if np.count_nonzero(img) < MIN_SUPPORT_FRACTION * img.size:
                continue
            s = normalize_slice(img, (row, col), domain=domain, case_id=cid, slice_index=k)
            mask = None
            if labeled:
                raw = np.rint(_resize(lab[:, :, k].astype(np.float32), image_size, "nearest"))
                mask = remap_labels(raw.astype(np.int64), scheme)
            items.append((s, mask))
    return SliceStream(items, seed, spacing, labeled)


# --------------------------------------------------------------------------- phantom


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic two-domain brain-lesion dataset.

    Domain A renders lesions brighter than the surrounding tissue; domain B
    applies a contrast inversion followed by a gamma curve, so lesions turn
    darker. Both renderings share one label volume.
    """

    image_size: int = 64
    n_cases: int = 30
    slices_per_case: int = 4
    lesion_count: tuple = (1, 2)
    lesion_radius: tuple = (7.0, 13.0)
    tc_fraction: float = 0.6
    ncr_fraction: float = 0.3
    gamma: float = 1.5
    noise: float = 0.02
    spacing: tuple = (1.0, 1.0, 2.0)
    seed: int = 0
    # domain-A raw intensities per tissue
    intensity_wm: float = 0.55
    intensity_gm: float = 0.40
    intensity_ed: float = 0.68
    intensity_et: float = 0.92
    intensity_ncr: float = 0.80

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        if self.image_size < 16 or self.slices_per_case < 1:
            raise ValueError("image_size must be >= 16 and slices_per_case >= 1")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi or hi > self.image_size / 4:
            raise ValueError(f"lesion_radius {self.lesion_radius} invalid for size {self.image_size}")
        c0, c1 = self.lesion_count
        if not 0 <= c0 <= c1:
            raise ValueError(f"lesion_count {self.lesion_count} invalid")
        if not 0 < self.ncr_fraction < self.tc_fraction < 1:
            raise ValueError("need 0 < ncr_fraction < tc_fraction < 1")
        if self.noise < 0 or self.gamma <= 0 or any(s <= 0 for s in self.spacing):
            raise ValueError("noise must be >= 0, gamma and spacing positive")


def domain_b_intensity(a, gamma):
    """Domain-B law: inversion then gamma, kept strictly positive inside the brain."""
    return 0.1 + 0.85 * np.clip(1.0 - a, 0.0, 1.0) ** gamma


def _smooth_field(rng, shape, scale):
    coarse = rng.standard_normal((4, 4))
    t = torch.from_numpy(coarse).float()[None, None]
    up = F.interpolate(t, size=shape, mode="bicubic", align_corners=True)[0, 0].numpy()
    return 1.0 + scale * up


def render_phantom_case(spec: PhantomSpec, rng):
    """Return ``(vol_a, vol_b, labels)`` as H x W x S arrays (labels in BraTS raw encoding)."""
    n, s = spec.image_size, spec.slices_per_case
    dz = spec.spacing[2] / spec.spacing[0]
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = n / 2 + rng.uniform(-2, 2, size=2)
    ay, ax = n * rng.uniform(0.36, 0.44), n * rng.uniform(0.30, 0.38)
    brain_r = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2
    brain = brain_r <= 1.0
    wm = brain_r <= 0.55

    lesions = []
    for _ in range(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1)):
        r = rng.uniform(*spec.lesion_radius)
        for _attempt in range(50):
            ly, lx = rng.uniform(-1, 1, size=2) * np.array([ay, ax]) * 0.55
            if (ly / ay) ** 2 + (lx / ax) ** 2 <= (1 - r / min(ay, ax)) ** 2:
                break
        lz = rng.uniform(0.3, 0.7) * (s - 1)
        lesions.append((cy + ly, cx + lx, lz, r))

    vol_a = np.zeros((n, n, s))
    vol_b = np.zeros((n, n, s))
    labels = np.zeros((n, n, s), dtype=np.int16)
    bias = _smooth_field(rng, (n, n), 0.05)
    for k in range(s):
        a = np.where(wm, spec.intensity_wm, spec.intensity_gm)
        lab = np.zeros((n, n), dtype=np.int16)
        for ly, lx, lz, r in lesions:
            rk2 = r ** 2 - ((k - lz) * dz) ** 2
            if rk2 <= 1.0:
                continue
            rk = math.sqrt(rk2)
            d = np.hypot(yy - ly, xx - lx)
            ed = d <= rk
            tc = d <= rk * spec.tc_fraction
            ncr = d <= rk * spec.ncr_fraction
            lab[ed & (lab == 0)] = 2
            lab[tc] = 4
            lab[ncr] = 1
        lab[~brain] = 0
        a = np.where(lab == 2, spec.intensity_ed, a)
        a = np.where(lab == 4, spec.intensity_et, a)
        a = np.where(lab == 1, spec.intensity_ncr, a)
        b = domain_b_intensity(a, spec.gamma)
        noise_a = spec.noise * rng.standard_normal((n, n))
        noise_b = spec.noise * rng.standard_normal((n, n))
        vol_a[:, :, k] = np.where(brain, np.clip(a * bias + noise_a, 0.01, 1.0), 0.0)
        vol_b[:, :, k] = np.where(brain, np.clip(b * bias + noise_b, 0.01, 1.0), 0.0)
        labels[:, :, k] = lab
    return vol_a.astype(np.float32), vol_b.astype(np.float32), labels


def generate_phantom(spec: PhantomSpec, root):
    """Write the phantom dataset under ``root`` and return the sorted case ids."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestError(f"cannot create {root}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    case_ids = [f"case_{i:03d}" for i in range(spec.n_cases)]
    lines = []
    for cid in case_ids:
        vol_a, vol_b, labels = render_phantom_case(spec, rng)
        case_dir = root / cid
        case_dir.mkdir(exist_ok=True)
        write_volume(case_dir / f"modA{VOLUME_SUFFIX}", vol_a, spec.spacing)
        write_volume(case_dir / f"modB{VOLUME_SUFFIX}", vol_b, spec.spacing)
        write_volume(case_dir / f"{LABEL_NAME}{VOLUME_SUFFIX}", labels, spec.spacing)
        lines.append(f"{cid}\t{cid}/modA{VOLUME_SUFFIX}\t{cid}/modB{VOLUME_SUFFIX}\n")
    try:
        (root / MANIFEST_NAME).write_text("".join(lines))
    except OSError as exc:
        raise IngestError(f"cannot write manifest: {exc}") from exc
    return case_ids


def read_pairing_manifest(root):
    """Oracle-only access to the phantom's A/B pairing: case_id -> (path_a, path_b)."""
    root = Path(root)
    out = {}
    for line in (root / MANIFEST_NAME).read_text().splitlines():
        cid, a, b = line.split("\t")
        out[cid] = (root / a, root / b)
    return out
