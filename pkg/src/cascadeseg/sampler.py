"""
Hierarchical class-balanced subvolume sampling and spatial augmentation.

A batch is drawn from a small number of volumes; within each volume the
class of the patch centre is drawn uniformly over the classes present, then
the centre itself uniformly over that class's voxels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .volumes import (INTENSITY_PAD, LABEL_PAD, IntensityVolume, LabelVolume,
                      crop_or_pad_array, pad_to_multiple, resample, rescale_intensity)

PAD_MULTIPLE = 16


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    rotation_deg_max: float = 10.0
    translation_vox_max: float = 5.0
    shear_max: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    flip_axes_prob: float = 0.5
    flip_axes: tuple = (0, 1, 2)
    elastic_control_grid: int = 4
    elastic_sigma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(s) for s in self.scale_range))
        object.__setattr__(self, "flip_axes", tuple(int(a) for a in self.flip_axes))
        for name in ("rotation_deg_max", "translation_vox_max", "shear_max",
                     "flip_axes_prob", "elastic_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi < 2:
            raise ValueError(f"scale_range must lie inside (0, 2), got {self.scale_range}")
        if self.flip_axes_prob > 1:
            raise ValueError("flip_axes_prob must be <= 1")
        if self.elastic_control_grid < 0:
            raise ValueError("elastic_control_grid must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_deg_max=0, translation_vox_max=0, shear_max=0, scale_range=(1, 1),
                   flip_axes_prob=0, elastic_control_grid=0, elastic_sigma=0)


@dataclass(frozen=True)
class SamplerConfig:
    subvolume_sizes: tuple = (16, 32, 48)
    volumes_per_batch: int = 2
    patches_per_volume: int = 1
    rng_seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.subvolume_sizes)
        object.__setattr__(self, "subvolume_sizes", sizes)
        if not sizes or any(s < 8 or s % 2 for s in sizes):
            raise ValueError(f"subvolume sizes must be even and >= 8, got {sizes}")
        if self.volumes_per_batch < 1 or self.patches_per_volume < 1:
            raise ValueError("volumes_per_batch and patches_per_volume must be >= 1")


# ---------------------------------------------------------------------------
# training cases
# ---------------------------------------------------------------------------

@dataclass
class Case:
    """One training volume in network-ready form."""

    image: np.ndarray            # native grid, rescaled to [-1, 1]
    labels: np.ndarray           # native grid
    num_classes: int
    spacing: tuple
    coarse_image: np.ndarray     # coarse grid, padded to a multiple of 16
    coarse_labels: np.ndarray
    net1_channel: np.ndarray | None = None   # argmax(p1)/C on the native grid
    _class_index: dict | None = field(default=None, repr=False)

    @property
    def class_index(self) -> dict:
        if self._class_index is None:
            self._class_index = class_voxel_index(self.labels)
        return self._class_index


def prepare_case(iv: IntensityVolume, lv: LabelVolume, coarse_spacing) -> Case:
    if iv.shape != lv.shape:
        raise ValueError(f"image {iv.shape} and labels {lv.shape} differ in shape")
    iv = rescale_intensity(iv)
    coarse_iv = resample(iv, coarse_spacing, "linear")
    coarse_lv = resample(lv, coarse_spacing, "nearest")
    return Case(
        image=np.asarray(iv.data, dtype=np.float32),
        labels=np.asarray(lv.labels),
        num_classes=lv.num_classes,
        spacing=iv.spacing,
        coarse_image=pad_to_multiple(coarse_iv.data, PAD_MULTIPLE, INTENSITY_PAD),
        coarse_labels=pad_to_multiple(coarse_lv.labels, PAD_MULTIPLE, LABEL_PAD),
    )


# ---------------------------------------------------------------------------
# centre sampling and extraction
# ---------------------------------------------------------------------------

def class_voxel_index(labels: np.ndarray) -> dict:
    """Map every present class to the flat indices of its voxels."""
    flat = np.asarray(labels).ravel()
    order = np.argsort(flat, kind="stable")
    classes, starts = np.unique(flat[order], return_index=True)
    bounds = list(starts[1:]) + [flat.size]
    return {int(c): order[s:e] for c, s, e in zip(classes, starts, bounds)}


def sample_center(labels, rng: np.random.Generator, index: dict | None = None):
    """
    Draw ``(class, voxel)``: the class uniformly over the classes present,
    the voxel uniformly over that class's voxels.
    """
    arr = labels.labels if isinstance(labels, LabelVolume) else np.asarray(labels)
    if arr.size == 0:
        raise ValueError("cannot sample from an empty label volume")
    index = class_voxel_index(arr) if index is None else index
    classes = sorted(index)
    c = classes[rng.integers(len(classes))]
    voxels = index[c]
    flat = voxels[rng.integers(len(voxels))]
    return c, tuple(int(i) for i in np.unravel_index(flat, arr.shape))


def centered_box(center, size) -> list:
    size = (size,) * 3 if np.isscalar(size) else tuple(size)
    return [(c - s // 2, c - s // 2 + s) for c, s in zip(center, size)]


def extract_subvolume(image: np.ndarray, labels: np.ndarray, center, size, extra=None):
    """
    Patch of ``size`` whose voxel ``size // 2`` is ``center``; out-of-volume
    parts are padded with -1 (intensity), 0 (labels, extra channel).
    """
    box = centered_box(center, size)
    out = [crop_or_pad_array(image, box, INTENSITY_PAD), crop_or_pad_array(labels, box, LABEL_PAD)]
    if extra is not None:
        out.append(crop_or_pad_array(extra, box, 0.0))
    return tuple(out)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _random_affine(cfg: AugmentConfig, rng: np.random.Generator):
    angles = rng.uniform(-1, 1, size=3) * cfg.rotation_deg_max
    rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    shear = np.eye(3)
    off = ~np.eye(3, dtype=bool)
    shear[off] = rng.uniform(-1, 1, size=6) * cfg.shear_max
    scale = np.diag(rng.uniform(*cfg.scale_range, size=3))
    translation = rng.uniform(-1, 1, size=3) * cfg.translation_vox_max
    return rot @ shear @ scale, translation


def _elastic_field(shape, cfg: AugmentConfig, rng: np.random.Generator):
    g = cfg.elastic_control_grid
    if g == 0 or cfg.elastic_sigma == 0:
        return None
    control = rng.normal(0.0, cfg.elastic_sigma, size=(3, g, g, g))
    zoom = [n / g for n in shape]
    return np.stack([ndimage.zoom(c, zoom, order=3, mode="nearest", grid_mode=True)
                     for c in control])


def augment(image: np.ndarray, labels: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator, extra: np.ndarray | None = None):
    """
    Warp a patch with one random affine (rotation, shear, scale, translation)
    plus a smooth elastic displacement, then randomly flip axes. Intensities
    and the extra channel use linear interpolation, labels nearest.
    """
    if not cfg.enabled:
        return (image, labels) if extra is None else (image, labels, extra)
    shape = image.shape
    matrix, translation = _random_affine(cfg, rng)
    displacement = _elastic_field(shape, cfg, rng)
    flips = [a for a in cfg.flip_axes if rng.random() < cfg.flip_axes_prob]

    arrays = [image, labels] + ([extra] if extra is not None else [])
    identity = (np.allclose(matrix, np.eye(3)) and not translation.any() and displacement is None)
    if not identity:
        center = (np.asarray(shape) - 1) / 2.0
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")).astype(np.float64)
        coords = np.einsum("ij,j...->i...", matrix, grid - center[:, None, None, None])
        coords += (center + translation)[:, None, None, None]
        if displacement is not None:
            coords += displacement
        warped = [ndimage.map_coordinates(image, coords, order=1, mode="constant", cval=INTENSITY_PAD),
                  ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=LABEL_PAD)]
        if extra is not None:
            warped.append(ndimage.map_coordinates(extra, coords, order=1, mode="constant", cval=0.0))
        arrays = warped
    arrays = [np.ascontiguousarray(np.flip(a, axis=flips)) if flips else a for a in arrays]
    return tuple(arrays)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    step: int
    image: np.ndarray                      # (B, 1, x, y, z)
    labels: np.ndarray                     # (B, x, y, z), target of network 1 (steps 1-3)
    fine_labels: np.ndarray | None = None  # (B, x, y, z_out), target of network 2
    net1_channel: np.ndarray | None = None  # (B, 1, x, y, z), step 4 only

    @property
    def size(self) -> int:
        return self.image.shape[0]


def _pick_cases(n_cases: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_cases, size=min(k, n_cases), replace=False)


def slab_indices(z: int, depth: int, K: int) -> np.ndarray:
    """K slice indices centred on ``z``, edge-replicated at the volume ends."""
    half = (K - 1) // 2
    return np.clip(np.arange(z - half, z + half + 1), 0, depth - 1)


def make_batch(cases: list[Case], step: int, cfg: SamplerConfig, rng: np.random.Generator,
               K: int = 9) -> Batch:
    """
    Step 1: one full volume on the coarse grid. Steps 2-3: class-balanced
    patches with per-axis sizes drawn from ``cfg.subvolume_sizes``. Step 4:
    stacks of K full axial slices around a class-balanced slice, target is
    the central slice.
    """
    if not cases:
        raise ValueError("dataset is empty")
    half = (K - 1) // 2
    if step == 1:
        case = cases[rng.integers(len(cases))]
        return Batch(step, case.coarse_image[None, None].astype(np.float32),
                     case.coarse_labels[None].astype(np.int64))

    if step in (2, 3):
        size = tuple(int(s) for s in rng.choice(cfg.subvolume_sizes, size=3))
        images, labels = [], []
        for ci in _pick_cases(len(cases), cfg.volumes_per_batch, rng):
            case = cases[ci]
            for _ in range(cfg.patches_per_volume):
                _, center = sample_center(case.labels, rng, case.class_index)
                img, lab = extract_subvolume(case.image, case.labels, center, size)
                img, lab = augment(img, lab, cfg.augmentation, rng)
                images.append(img)
                labels.append(lab)
        image = np.stack(images)[:, None].astype(np.float32)
        label = np.stack(labels).astype(np.int64)
        fine = None
        if step == 3:
            if size[2] < K:
                raise ValueError(f"subvolume depth {size[2]} is smaller than K={K}")
            fine = label[..., half:size[2] - half]
        return Batch(step, image, label, fine)

    if step == 4:
        images, targets, channels = [], [], []
        for ci in _pick_cases(len(cases), cfg.volumes_per_batch, rng):
            case = cases[ci]
            if case.net1_channel is None:
                raise ValueError("step 4 needs each case's network-1 prediction (net1_channel)")
            for _ in range(cfg.patches_per_volume):
                _, center = sample_center(case.labels, rng, case.class_index)
                zs = slab_indices(center[2], case.labels.shape[2], K)
                images.append(pad_to_multiple(case.image[..., zs], PAD_MULTIPLE, INTENSITY_PAD, axes=(0, 1)))
                channels.append(pad_to_multiple(case.net1_channel[..., zs], PAD_MULTIPLE, 0.0, axes=(0, 1)))
                target = case.labels[..., center[2]:center[2] + 1]
                targets.append(pad_to_multiple(target, PAD_MULTIPLE, LABEL_PAD, axes=(0, 1)))
        target = np.stack(targets).astype(np.int64)
        return Batch(step, np.stack(images)[:, None].astype(np.float32), target, target,
                     np.stack(channels)[:, None].astype(np.float32))

    raise ValueError(f"step must be in 1..4, got {step}")
