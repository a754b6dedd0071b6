"""Overlap and surface-distance metrics, region composition, and per-split evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .domain import LabelMask, LabelScheme, to_model_range
from .errors import LabelSchemeViolation, ShapeMismatch, UndefinedDistance


@dataclass(frozen=True)
class RegionSpec:
    name: str
    member_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "member_classes", frozenset(self.member_classes))


BRATS_REGIONS = (
    RegionSpec("WT", {1, 2, 3}),
    RegionSpec("TC", {1, 3}),
    RegionSpec("ET", {3}),
)
CARDIAC_REGIONS = (
    RegionSpec("AA", {1}),
    RegionSpec("LAC", {2}),
    RegionSpec("LVC", {3}),
    RegionSpec("MYO", {4}),
)
REGIONS = {LabelScheme.BRATS: BRATS_REGIONS, LabelScheme.CARDIAC: CARDIAC_REGIONS}

METRICS = ("dsc", "hd95", "asd")


def regions_for(scheme):
    try:
        return REGIONS[LabelScheme(scheme)]
    except ValueError:
        raise LabelSchemeViolation(f"unknown label scheme {scheme!r}") from None


def compose_regions(mask, scheme=LabelScheme.BRATS):
    """Binary mask per evaluation region (union of its member classes)."""
    classes = mask.classes if isinstance(mask, LabelMask) else np.asarray(mask)
    return {r.name: np.isin(classes, sorted(r.member_classes)) for r in regions_for(scheme)}


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def border(mask):
    """Foreground voxels with at least one face-neighbour outside the mask (or the grid)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(pred, gt, spacing):
    """Directed border-to-border distances in mm: ``(pred -> gt, gt -> pred)``."""
    pred, gt = _pair(pred, gt)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or np.any(spacing <= 0):
        raise ValueError(f"spacing {tuple(spacing)} does not fit a {pred.ndim}-D mask")
    if not pred.any() or not gt.any():
        side = "both" if not (pred.any() or gt.any()) else ("prediction" if not pred.any() else "ground-truth")
        raise UndefinedDistance(side)
    bp = np.argwhere(border(pred)) * spacing
    bg = np.argwhere(border(gt)) * spacing
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return d_pg, d_gp


def hd95(pred, gt, spacing) -> float:
    a, b = surface_distances(pred, gt, spacing)
    return float(np.percentile(np.concatenate([a, b]), 95))


def asd(pred, gt, spacing) -> float:
    a, b = surface_distances(pred, gt, spacing)
    return float(np.concatenate([a, b]).mean())


# --------------------------------------------------------------------------- reports


def format_mean_std(mean, std, latex=False):
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "N/A"
    sep = "$\\pm$" if latex else "±"
    return f"{mean:.2f}{sep}{std:.2f}"


def aggregate(values):
    """Population mean and std; ``(nan, nan)`` when nothing is defined."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    return float(vals.mean()), float(vals.std())


@dataclass
class MetricsReport:
    regions: tuple
    rows: list  # {"case_id", "region", "dsc" (percent), "hd95", "asd"}; None where undefined
    undefined_cases: list = field(default_factory=list)
    method: str = ""

    @property
    def case_ids(self):
        return sorted({r["case_id"] for r in self.rows})

    @property
    def n_cases(self):
        return len(self.case_ids)

    def summary(self):
        out = {}
        for region in self.regions:
            rows = [r for r in self.rows if r["region"] == region]
            entry = {}
            for metric in METRICS:
                mean, std = aggregate(r[metric] for r in rows)
                entry[f"{metric}_mean"], entry[f"{metric}_std"] = mean, std
            out[region] = entry
        return out

    def records(self):
        """One record per case, region and metric."""
        for r in sorted(self.rows, key=lambda r: (r["case_id"], self.regions.index(r["region"]))):
            for metric in METRICS:
                rec = {"case_id": r["case_id"], "region": r["region"], "metric": metric,
                       "value": r[metric]}
                if r[metric] is None:
                    rec["note"] = "N/A"
                yield rec

    def table(self, latex=False):
        summ = self.summary()
        header = ["Metric"] + list(self.regions)
        lines = []
        labels = {"dsc": "DSC (%)", "hd95": "HD95 (mm)", "asd": "ASD (mm)"}
        rows = [[labels[m]] + [format_mean_std(summ[r][f"{m}_mean"], summ[r][f"{m}_std"], latex)
                               for r in self.regions] for m in METRICS]
        if latex:
            lines.append(" & ".join(header) + " \\\\")
            lines += [" & ".join(row) + " \\\\" for row in rows]
        else:
            widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
            fmt = "  ".join(f"{{:<{w}}}" for w in widths)
            lines.append(fmt.format(*header))
            lines += [fmt.format(*row) for row in rows]
        footer = f"n_cases = {self.n_cases}"
        if self.undefined_cases:
            footer += (f"; {len(self.undefined_cases)} case/region pair(s) with undefined surface "
                       "distance (N/A) excluded from HD95/ASD means:")
            for u in self.undefined_cases:
                footer += f"\n  {u['case_id']} {u['region']}: {u['reason']}"
        lines.append(("% " if latex else "") + footer.replace("\n", "\n% " if latex else "\n"))
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "table.txt").write_text(self.table())
        (out_dir / "table.tex").write_text(self.table(latex=True))
        with open(out_dir / "records.jsonl", "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")
        summary = {"method": self.method, "regions": list(self.regions), "n_cases": self.n_cases,
                   "summary": _jsonable(self.summary()), "undefined_cases": self.undefined_cases}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        return out_dir


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, float) and math.isnan(d):
        return None
    return d


def load_records(path):
    """Rebuild a MetricsReport from a ``records.jsonl`` file plus its ``summary.json``."""
    path = Path(path)
    summary = json.loads((path / "summary.json").read_text())
    rows = {}
    for line in (path / "records.jsonl").read_text().splitlines():
        rec = json.loads(line)
        row = rows.setdefault((rec["case_id"], rec["region"]),
                              {"case_id": rec["case_id"], "region": rec["region"]})
        row[rec["metric"]] = rec["value"]
    return MetricsReport(tuple(summary["regions"]), list(rows.values()),
                         summary.get("undefined_cases", []), summary.get("method", ""))


def evaluate_volumes(cases, scheme=LabelScheme.BRATS, method=""):
    """Score ``(case_id, pred_classes, gt_classes, spacing)`` tuples (2-D or 3-D grids)."""
    regions = regions_for(scheme)
    rows, undefined = [], []
    for case_id, pred, gt, spacing in sorted(cases, key=lambda c: c[0]):
        pr = compose_regions(pred, scheme)
        gr = compose_regions(gt, scheme)
        for region in regions:
            p, g = pr[region.name], gr[region.name]
            row = {"case_id": case_id, "region": region.name, "dsc": 100.0 * dice(p, g)}
            if not p.any() and not g.any():
                row["hd95"] = row["asd"] = 0.0
            else:
                try:
                    a, b = surface_distances(p, g, spacing)
                    pooled = np.concatenate([a, b])
                    row["hd95"] = float(np.percentile(pooled, 95))
                    row["asd"] = float(pooled.mean())
                except UndefinedDistance as exc:
                    row["hd95"] = row["asd"] = None
                    undefined.append({"case_id": case_id, "region": region.name,
                                      "reason": f"{exc.empty_side} mask empty"})
            rows.append(row)
    return MetricsReport(tuple(r.name for r in regions), rows, undefined, method)


@torch.no_grad()
def predict_slices(net, slices, batch_size=16):
    """Argmax class maps for a list of Slice2D (network in eval mode)."""
    was_training = net.training
    net.eval()
    param = next(net.parameters())
    preds = []
    for i in range(0, len(slices), batch_size):
        chunk = slices[i:i + batch_size]
        x = torch.from_numpy(np.stack([s.pixels for s in chunk])[:, None])
        out = net(to_model_range(x).to(param))
        preds.append(out.logits.argmax(1).cpu().numpy())
    net.train(was_training)
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.int64)


def stack_case(items, pred=None):
    """Stack a case's slices (sorted by index) into H x W x S volumes."""
    order = np.argsort([s.slice_index for s, _ in items])
    gt = np.stack([items[i][1].classes for i in order], axis=-1)
    if pred is not None:
        pred = np.stack([pred[i] for i in order], axis=-1)
    return pred, gt


def evaluate_split(net, stream, scheme=LabelScheme.BRATS, method=""):
    """Per-case metrics of ``net`` on a labeled SliceStream; slices are stacked per case."""
    groups = stream.by_case()
    if not groups:
        raise ValueError("evaluate_split needs at least one case")
    cases = []
    for cid, items in groups.items():
        pred = predict_slices(net, [s for s, _ in items])
        p, g = stack_case(items, pred)
        cases.append((cid, p, g, stream.case_spacing[cid]))
    return evaluate_volumes(cases, scheme, method)


def self_test_split(stream, scheme=LabelScheme.BRATS):
    """Score ground truth against itself; used by the CLI self-test."""
    cases = []
    for cid, items in stream.by_case().items():
        _, g = stack_case(items)
        cases.append((cid, g, g, stream.case_spacing[cid]))
    return evaluate_volumes(cases, scheme, "ground-truth")


REGION_COLOURS = {"WT": (0, 200, 0), "TC": (255, 220, 0), "ET": (230, 0, 0),
                  "AA": (0, 200, 0), "LAC": (0, 120, 255), "LVC": (255, 220, 0), "MYO": (230, 0, 0)}


def save_overlays(net, stream, out_dir, scheme=LabelScheme.BRATS, alpha=0.45):
    """One PNG per case: each slice as [image | ground truth overlay | prediction overlay]."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for cid, items in stream.by_case().items():
        pred = predict_slices(net, [s for s, _ in items]) if net is not None else None
        rows = []
        for i, (s, m) in enumerate(items):
            img = s.pixels
            lo, hi = float(img.min()), float(img.max())
            grey = ((img - lo) / (hi - lo + 1e-8) * 255).astype(np.uint8)
            base = np.repeat(grey[..., None], 3, axis=-1).astype(np.float64)
            panels = [base]
            for classes in (m.classes, pred[i] if pred is not None else m.classes):
                over = base.copy()
                for name, region in compose_regions(classes, scheme).items():
                    over[region] = (1 - alpha) * over[region] + alpha * np.array(REGION_COLOURS[name])
                panels.append(over)
            rows.append(np.concatenate(panels, axis=1))
        path = out_dir / f"{cid}.png"
        Image.fromarray(np.concatenate(rows, axis=0).astype(np.uint8)).save(path)
        paths.append(path)
    return paths
