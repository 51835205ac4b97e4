"""
Deterministic synthetic multi-class phantoms.

Each phantom is a randomly posed ellipsoid (class 1) enclosing ``C - 1``
smaller ellipsoids (classes 2..C) on a dark background, with one mean
intensity per class and additive Gaussian noise. Geometry is drawn from the
RNG before the noise, so the label map does not depend on ``noise_sigma``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .volumes import IntensityVolume, LabelVolume, load_volume, save_volume

MANIFEST_NAME = "manifest.txt"


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple = (64, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    num_foreground_classes: int = 4
    noise_sigma: float = 0.05
    seed: int = 0
    structure_scale: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ValueError(f"phantom shape must be 3D with every dim >= 16, got {self.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"invalid spacing {self.spacing}")
        if self.num_foreground_classes < 1:
            raise ValueError("num_foreground_classes must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 < self.structure_scale < 1:
            raise ValueError("structure_scale must lie in (0, 1)")


def class_means(num_foreground_classes: int) -> np.ndarray:
    """Background at 0, foreground levels evenly spaced strictly inside (0.2, 1.0)."""
    levels = np.linspace(0.2, 1.0, num_foreground_classes + 2)[1:-1]
    return np.concatenate([[0.0], levels])


def _sphere_directions(n: int) -> np.ndarray:
    if n == 1:
        return np.array([[1.0, 0.0, 0.0]])
    # golden-angle spiral, evenly spread for any n
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azimuth = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(azimuth) * np.sin(polar),
                     np.sin(azimuth) * np.sin(polar),
                     np.cos(polar)], axis=1)


def _inside(points: np.ndarray, center, rotation: np.ndarray, radii) -> np.ndarray:
    local = (points - center) @ rotation  # coordinates in the ellipsoid frame
    return np.sum((local / radii) ** 2, axis=-1) <= 1.0


def generate_phantom(cfg: PhantomConfig) -> tuple[IntensityVolume, LabelVolume]:
    rng = np.random.default_rng(cfg.seed)
    shape = np.asarray(cfg.shape)
    spacing = np.asarray(cfg.spacing)
    extent = shape * spacing
    half = extent / 2.0

    # --- geometry (drawn first: labels are independent of noise) ---
    main_radii = cfg.structure_scale * half.min() * rng.uniform(0.75, 1.0, size=3)
    main_rot = Rotation.random(random_state=rng).as_matrix()
    jitter = 0.5 * (1.0 - cfg.structure_scale) * half
    main_center = half + rng.uniform(-1.0, 1.0, size=3) * jitter

    n_sub = cfg.num_foreground_classes - 1
    sub_frame = Rotation.random(random_state=rng).as_matrix()
    directions = _sphere_directions(max(n_sub, 1)) @ sub_frame.T
    sub_scales = rng.uniform(0.55, 0.6, size=(max(n_sub, 1), 3))
    sub_offsets = rng.uniform(0.35, 0.4, size=max(n_sub, 1))

    # bounding half-widths of the rotated main ellipsoid along each grid axis
    halfwidth = np.sqrt(((main_rot * main_radii[None, :]) ** 2).sum(axis=1))
    margin = spacing
    if np.any(main_center - halfwidth < margin) or np.any(main_center + halfwidth > extent - margin):
        raise ValueError(
            f"structures do not fit inside shape {cfg.shape} at structure_scale={cfg.structure_scale}")

    axes = [(np.arange(n) + 0.5) * s for n, s in zip(shape, spacing)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    labels = np.zeros(cfg.shape, dtype=np.uint8)
    labels[_inside(points, main_center, main_rot, main_radii)] = 1
    for k in range(n_sub):
        # offsets and radii are expressed in the main ellipsoid's normalised frame
        center = main_center + main_rot @ (sub_offsets[k] * directions[k] * main_radii)
        radii = sub_scales[k] * main_radii
        labels[_inside(points, center, main_rot, radii)] = k + 2

    present = np.unique(labels)
    missing = sorted(set(range(cfg.num_foreground_classes + 1)) - set(present.tolist()))
    if missing:
        raise ValueError(f"classes {missing} vanished at shape {cfg.shape}; increase structure_scale")

    # --- appearance ---
    intensity = class_means(cfg.num_foreground_classes)[labels]
    intensity = intensity + rng.normal(0.0, 1.0, size=cfg.shape) * cfg.noise_sigma

    iv = IntensityVolume(data=intensity.astype(np.float32), spacing=cfg.spacing)
    lv = LabelVolume(labels=labels, num_classes=cfg.num_foreground_classes + 1,
                     spacing=cfg.spacing)
    return iv, lv


def generate_dataset(cfg: PhantomConfig, n: int, seed_base: int = 0):
    """``n`` phantoms with seeds ``seed_base .. seed_base + n - 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_phantom(replace(cfg, seed=seed_base + i)) for i in range(n)]


def write_dataset(cfg: PhantomConfig, n: int, seed_base: int, out_dir: os.PathLike) -> Path:
    """
    Write ``n`` phantoms as paired ``.nii.gz`` files and a plain-text
    ``key: value`` manifest; returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"num_cases: {n}", f"num_classes: {cfg.num_foreground_classes + 1}"]
    for i, (iv, lv) in enumerate(generate_dataset(cfg, n, seed_base)):
        name = f"case_{i:03d}"
        image, label = f"{name}_image.nii.gz", f"{name}_label.nii.gz"
        save_volume(iv, out_dir / image)
        save_volume(lv, out_dir / label)
        counts = np.bincount(lv.labels.ravel(), minlength=lv.num_classes)
        lines += [
            f"{name}.image: {image}",
            f"{name}.label: {label}",
            f"{name}.seed: {seed_base + i}",
            f"{name}.counts: " + ",".join(str(int(c)) for c in counts),
        ]
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path: os.PathLike) -> list[tuple[IntensityVolume, LabelVolume]]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    entries = {}
    for line in path.read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ValueError(f"malformed manifest line: {line!r}")
        entries[key.strip()] = value.strip()
    n = int(entries["num_cases"])
    num_classes = int(entries["num_classes"])
    cases = []
    for i in range(n):
        name = f"case_{i:03d}"
        iv = load_volume(path.parent / entries[f"{name}.image"], as_labels=False)
        lv = load_volume(path.parent / entries[f"{name}.label"], as_labels=True,
                         num_classes=num_classes)
        cases.append((iv, lv))
    return cases
