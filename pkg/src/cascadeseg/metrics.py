"""
Overlap and surface-distance metrics on hard label volumes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import LabelVolume

# ASD when exactly one of the two masks is empty
ASD_UNDEFINED = -1.0

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _labels(v) -> np.ndarray:
    return v.labels if isinstance(v, LabelVolume) else np.asarray(v)


def _masks(pred, truth, c: int):
    a, b = _labels(pred), _labels(truth)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a == c, b == c


def binary_dice(pred, truth, c: int) -> float:
    a, b = _masks(pred, truth, c)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def binary_jaccard(pred, truth, c: int) -> float:
    a, b = _masks(pred, truth, c)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (or the volume)."""
    eroded = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def average_surface_distance(pred, truth, c: int, spacing=None) -> float:
    """
    Symmetric average surface distance in mm: the mean, over the surface voxels
    of both masks, of the distance to the nearest surface voxel of the other.
    """
    if spacing is None:
        if not isinstance(truth, LabelVolume):
            raise ValueError("spacing is required for plain arrays")
        spacing = truth.spacing
    if isinstance(pred, LabelVolume) and isinstance(truth, LabelVolume):
        if not np.allclose(pred.spacing, truth.spacing):
            raise ValueError(f"spacing mismatch: {pred.spacing} vs {truth.spacing}")
    a, b = _masks(pred, truth, c)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return ASD_UNDEFINED
    sa, sb = surface(a), surface(b)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    total = dist_to_b[sa].sum() + dist_to_a[sb].sum()
    return float(total / (sa.sum() + sb.sum()))


@dataclass
class ClassMetrics:
    dice: float
    jaccard: float
    asd_mm: float


@dataclass
class MetricReport:
    per_class: dict = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([m.dice for m in self.per_class.values()]))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean([m.jaccard for m in self.per_class.values()]))

    @property
    def mean_asd_mm(self) -> float:
        defined = [m.asd_mm for m in self.per_class.values() if m.asd_mm != ASD_UNDEFINED]
        return float(np.mean(defined)) if defined else ASD_UNDEFINED

    @property
    def aggregate(self) -> ClassMetrics:
        return ClassMetrics(self.mean_dice, self.mean_jaccard, self.mean_asd_mm)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "dice", "jaccard", "asd_mm"])
        rows = list(self.per_class.items()) + [("mean", self.aggregate)]
        for name, m in rows:
            writer.writerow([name, f"{m.dice:.6f}", f"{m.jaccard:.6f}", f"{m.asd_mm:.6f}"])
        return buf.getvalue()


def evaluate_volume(pred: LabelVolume, truth: LabelVolume) -> MetricReport:
    """Dice, Jaccard and ASD for every foreground class ``1..C``."""
    if pred.num_classes != truth.num_classes:
        raise ValueError(f"class-count mismatch: {pred.num_classes} vs {truth.num_classes}")
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if not np.allclose(pred.spacing, truth.spacing):
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {truth.spacing}")
    report = MetricReport()
    for c in range(1, truth.num_classes):
        report.per_class[c] = ClassMetrics(
            dice=binary_dice(pred, truth, c),
            jaccard=binary_jaccard(pred, truth, c),
            asd_mm=average_surface_distance(pred, truth, c, truth.spacing),
        )
    return report
