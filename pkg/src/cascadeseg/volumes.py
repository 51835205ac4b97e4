"""
Volume containers, NIfTI I/O, intensity normalization, resampling, one-hot
encoding and crop/pad utilities.

Arrays are indexed ``(x, y, z)`` with ``z`` the axial (slice) axis. Volume
objects are immutable: their arrays are read-only and every operation returns
a new volume.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence, Union

import nibabel as nib
import numpy as np
from scipy import ndimage

INTENSITY_PAD = -1.0
LABEL_PAD = 0

_LABEL_INTENT = "label"
_NCLASS_PREFIX = "nclass="


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _as_triple(values, name: str) -> tuple:
    values = tuple(float(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    return values


@dataclass(frozen=True, eq=False)
class _Geometry:
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        spacing = _as_triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _as_triple(self.origin, "origin"))
        direction = np.asarray(self.direction, dtype=np.float64)
        if direction.shape != (3, 3):
            raise ValueError("direction must be a 3x3 matrix")
        object.__setattr__(self, "direction", _frozen(direction))

    @property
    def shape(self) -> tuple:
        raise NotImplementedError

    @property
    def affine(self) -> np.ndarray:
        """Voxel-index to physical (mm) transform."""
        aff = np.eye(4)
        aff[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        aff[:3, 3] = self.origin
        return aff

    def _shifted_origin(self, index_offset) -> tuple:
        # physical position of a (possibly fractional) voxel index
        offset = np.asarray(index_offset, dtype=np.float64) * np.asarray(self.spacing)
        return tuple(np.asarray(self.origin) + self.direction @ offset)

    def same_geometry(self, other: "_Geometry", atol: float = 1e-6) -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.direction, other.direction, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class IntensityVolume(_Geometry):
    """A 3D scalar image with physical voxel spacing (mm)."""

    data: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        data = np.asarray(self.data)
        if data.ndim != 3 or data.size == 0:
            raise ValueError(f"expected a non-empty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", _frozen(data.astype(np.float32)))

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "IntensityVolume":
        return IntensityVolume(data=data, spacing=self.spacing, origin=self.origin,
                               direction=self.direction)


@dataclass(frozen=True, eq=False)
class LabelVolume(_Geometry):
    """Integer class labels in ``{0..num_classes-1}``; class 0 is background."""

    labels: np.ndarray = None
    num_classes: int = 2

    def __post_init__(self):
        super().__post_init__()
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or labels.size == 0:
            raise ValueError(f"expected a non-empty 3D array, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise ValueError("label map contains non-integer values")
        if not 2 <= self.num_classes <= 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        lo, hi = int(labels.min()), int(labels.max())
        if lo < 0 or hi >= self.num_classes:
            raise ValueError(
                f"label values must lie in [0, {self.num_classes - 1}], found range [{lo}, {hi}]")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def shape(self) -> tuple:
        return tuple(self.labels.shape)

    @property
    def data(self) -> np.ndarray:
        return self.labels

    def with_labels(self, labels: np.ndarray) -> "LabelVolume":
        return LabelVolume(labels=labels, num_classes=self.num_classes, spacing=self.spacing,
                           origin=self.origin, direction=self.direction)


@dataclass(frozen=True, eq=False)
class OneHotField:
    """Class-indicator field of shape ``(num_classes, x, y, z)``."""

    data: np.ndarray
    class_counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]


Volume = Union[IntensityVolume, LabelVolume]


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _geometry_from_affine(affine: np.ndarray):
    linear = affine[:3, :3]
    spacing = np.linalg.norm(linear, axis=0)
    if np.any(spacing <= 0):
        raise ValueError("unreadable header: degenerate voxel-to-world transform")
    return tuple(spacing), tuple(affine[:3, 3]), linear / spacing[None, :]


def load_volume(path: os.PathLike, as_labels: bool | None = None,
                num_classes: int | None = None) -> Volume:
    """
    Read a NIfTI-1 file.

    Files written by :func:`save_volume` with a label map carry the NIfTI label
    intent and their class count, and are returned as :class:`LabelVolume`.
    ``as_labels`` forces either interpretation; ``num_classes`` overrides the
    class count stored in the header.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such volume file: {path}")
    try:
        img = nib.load(path)
        header = img.header
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of exception types
        raise ValueError(f"unreadable volume header in {path}: {exc}") from exc
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise ValueError(f"{path}: expected a 3D volume, got shape {data.shape}")

    spacing, origin, direction = _geometry_from_affine(img.affine)
    intent, _, intent_name = header.get_intent()
    stored_classes = None
    if intent_name.startswith(_NCLASS_PREFIX):
        stored_classes = int(intent_name[len(_NCLASS_PREFIX):])
    if as_labels is None:
        as_labels = intent == _LABEL_INTENT

    if not as_labels:
        return IntensityVolume(data=data, spacing=spacing, origin=origin, direction=direction)

    if not np.all(np.equal(np.mod(data, 1), 0)):
        raise ValueError(f"{path}: label map contains non-integer values")
    n = num_classes or stored_classes or int(data.max()) + 1
    return LabelVolume(labels=data.astype(np.int64), num_classes=max(n, 2), spacing=spacing,
                       origin=origin, direction=direction)


def save_volume(volume: Volume, path: os.PathLike, affine: np.ndarray | None = None) -> None:
    """Write a volume as NIfTI-1; labels as uint8, intensities as float32."""
    affine = volume.affine if affine is None else np.asarray(affine, dtype=np.float64)
    if isinstance(volume, LabelVolume):
        img = nib.Nifti1Image(np.asarray(volume.labels, dtype=np.uint8), affine)
        img.header.set_data_dtype(np.uint8)
        img.header.set_intent(_LABEL_INTENT, (), name=f"{_NCLASS_PREFIX}{volume.num_classes}")
    else:
        img = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float32), affine)
        img.header.set_data_dtype(np.float32)
    img.header.set_xyzt_units("mm")
    nib.save(img, os.fspath(path))


# ---------------------------------------------------------------------------
# intensity and label transforms
# ---------------------------------------------------------------------------

def rescale_intensity(v: IntensityVolume) -> IntensityVolume:
    """Affinely map intensities onto [-1, 1]; a constant volume becomes all zeros."""
    data = v.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if hi > lo:
        out = 2.0 * (data - lo) / (hi - lo) - 1.0
    else:
        out = np.zeros_like(data)
    return v.with_data(np.clip(out, -1.0, 1.0))


def one_hot(lv: LabelVolume) -> OneHotField:
    classes = np.arange(lv.num_classes, dtype=np.uint8)
    data = (lv.labels[None] == classes[:, None, None, None]).astype(np.uint8)
    counts = data.reshape(lv.num_classes, -1).sum(axis=1).astype(np.int64)
    return OneHotField(data=_frozen(data), class_counts=_frozen(counts))


def argmax_labels(field: np.ndarray) -> np.ndarray:
    """Inverse of :func:`one_hot` for any ``(classes, ...)`` score array."""
    return np.argmax(field, axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_ORDERS = {"nearest": 0, "linear": 1, "bspline2": 2}


def resampled_shape(shape, spacing, target_spacing) -> tuple:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target_spacing))


def resample_array(arr: np.ndarray, out_shape, mode: str = "linear") -> np.ndarray:
    """
    Resample a 3D array onto a grid of ``out_shape`` covering the same
    physical extent, with voxel centres aligned (not corners).
    """
    if mode not in _ORDERS:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out_shape = tuple(int(n) for n in out_shape)
    if out_shape == arr.shape:
        return np.array(arr, copy=True)
    axes = []
    for n_in, n_out in zip(arr.shape, out_shape):
        scale = n_in / n_out
        axes.append((np.arange(n_out) + 0.5) * scale - 0.5)
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    order = _ORDERS[mode]
    src = arr if order <= 1 else arr.astype(np.float64)
    return ndimage.map_coordinates(src, coords, order=order, mode="nearest",
                                   prefilter=order > 1)


def resample_to_shape(v: Volume, out_shape, mode: str | None = None) -> Volume:
    out_shape = tuple(int(n) for n in out_shape)
    if isinstance(v, LabelVolume):
        mode = mode or "nearest"
        if mode != "nearest":
            raise ValueError("label volumes must be resampled with mode='nearest'")
    else:
        mode = mode or "linear"
    if any(n < 1 for n in out_shape):
        raise ValueError(f"invalid output shape {out_shape}")
    new_spacing = tuple(n * s / m for n, s, m in zip(v.shape, v.spacing, out_shape))
    # first output voxel centre sits half a new voxel inside the original extent
    shift = [0.5 * (ns / s - 1.0) for ns, s in zip(new_spacing, v.spacing)]
    origin = v._shifted_origin(shift)
    arr = resample_array(v.data, out_shape, mode)
    if isinstance(v, LabelVolume):
        return LabelVolume(labels=arr, num_classes=v.num_classes, spacing=new_spacing,
                           origin=origin, direction=v.direction)
    return IntensityVolume(data=arr, spacing=new_spacing, origin=origin, direction=v.direction)


def resample(v: Volume, target_spacing: Sequence[float], mode: str | None = None) -> Volume:
    """
    Resample to ``target_spacing`` (mm). Output dims are
    ``max(1, round(n * spacing / target))`` per axis; the spacing actually
    stored is the one that preserves the physical extent exactly, so that
    resampling back to the original spacing restores the original grid.

    ``mode`` is one of ``linear`` (intensity default), ``nearest`` (required
    for labels) or ``bspline2``.
    """
    target_spacing = _as_triple(target_spacing, "target_spacing")
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if isinstance(v, LabelVolume) and mode not in (None, "nearest"):
        raise ValueError("label volumes must be resampled with mode='nearest'")
    return resample_to_shape(v, resampled_shape(v.shape, v.spacing, target_spacing), mode)


# ---------------------------------------------------------------------------
# crop / pad
# ---------------------------------------------------------------------------

def crop_or_pad_array(arr: np.ndarray, box, fill) -> np.ndarray:
    """
    Extract ``box`` (per-axis half-open ``(start, stop)`` index ranges over the
    trailing three axes) from ``arr``; parts of the box outside the array are
    filled with ``fill``.
    """
    box = [(int(a), int(b)) for a, b in box]
    if len(box) != 3:
        raise ValueError("box needs three (start, stop) ranges")
    extent = [b - a for a, b in box]
    if any(e <= 0 for e in extent):
        raise ValueError(f"box extent must be positive, got {extent}")
    lead = arr.shape[:-3]
    spatial = arr.shape[-3:]
    out = np.full(lead + tuple(extent), fill, dtype=arr.dtype)
    src, dst = [], []
    for (a, b), n in zip(box, spatial):
        lo, hi = max(a, 0), min(b, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - a, hi - a))
    out[(Ellipsis, *dst)] = arr[(Ellipsis, *src)]
    return out


def crop_or_pad(v: Volume, box, pad_intensity: float = INTENSITY_PAD,
                pad_label: int = LABEL_PAD) -> Volume:
    origin = v._shifted_origin([a for a, _ in box])
    if isinstance(v, LabelVolume):
        arr = crop_or_pad_array(v.labels, box, pad_label)
        return LabelVolume(labels=arr, num_classes=v.num_classes, spacing=v.spacing,
                           origin=origin, direction=v.direction)
    arr = crop_or_pad_array(v.data, box, pad_intensity)
    return IntensityVolume(data=arr, spacing=v.spacing, origin=origin, direction=v.direction)


def pad_to_multiple(arr: np.ndarray, multiple: int, fill, axes=(0, 1, 2)) -> np.ndarray:
    """Pad the high end of the trailing spatial axes up to a multiple of ``multiple``."""
    spatial = arr.shape[-3:]
    box = []
    for i, n in enumerate(spatial):
        m = -(-n // multiple) * multiple if i in axes else n
        box.append((0, m))
    return crop_or_pad_array(arr, box, fill)
