"""
Full-resolution prediction: coarse network-1 pass, probability upsampling,
dynamic-tile ROI, then a K-slice network-2 pass written directly onto the
native grid. The emitted labels are never interpolated.
"""

from __future__ import annotations

import numpy as np
import torch

from .losses import ProbabilityField
from .networks import ROI_MULTIPLE, Net1, Net2, RoiBox, dynamic_tile
from .sampler import slab_indices
from .volumes import (INTENSITY_PAD, IntensityVolume, LabelVolume, crop_or_pad_array,
                      pad_to_multiple, resample, resample_array, rescale_intensity)

DEFAULT_COARSE_SPACING = (3.0, 3.0, 3.0)
DEFAULT_ROI_MARGIN = 8


def _run(net: torch.nn.Module, x: np.ndarray) -> np.ndarray:
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))).numpy()
    finally:
        net.train(was_training)


def net1_probabilities(image: np.ndarray, net1: Net1) -> np.ndarray:
    """Run network 1 on an arbitrary-size 3D array (padded internally); returns (classes, x, y, z)."""
    padded = pad_to_multiple(image, net1.cfg.divisor, INTENSITY_PAD)
    probs = _run(net1, padded[None, None])[0]
    x, y, z = image.shape
    return probs[:, :x, :y, :z]


def predict_coarse(iv: IntensityVolume, net1: Net1,
                   coarse_spacing=DEFAULT_COARSE_SPACING) -> ProbabilityField:
    """
    Network-1 probabilities on the native grid: the (already rescaled)
    intensity is resampled to ``coarse_spacing``, segmented, and every class
    map is linearly upsampled back and renormalised.
    """
    extent = np.asarray(iv.shape) * np.asarray(iv.spacing)
    if np.any(extent < np.asarray(coarse_spacing, dtype=float)):
        raise ValueError(f"volume extent {tuple(extent)} mm is smaller than one coarse voxel")
    coarse = resample(iv, coarse_spacing, "linear")
    probs = net1_probabilities(coarse.data, net1)
    native = np.stack([resample_array(p, iv.shape, "linear") for p in probs])
    native = np.clip(native, 0.0, None)
    native /= native.sum(axis=0, keepdims=True)
    return ProbabilityField(native.astype(np.float32), source_net=1)


def net1_label_channel(p1) -> np.ndarray:
    """Second network-2 input channel: argmax class divided by ``C``."""
    probs = p1.data if isinstance(p1, ProbabilityField) else p1
    probs = np.asarray(probs)
    return (np.argmax(probs, axis=0) / (probs.shape[0] - 1)).astype(np.float32)


def predict_fine(iv: IntensityVolume, p1_native, net2: Net2, roi: RoiBox, K: int | None = None,
                 batch_size: int = 16) -> LabelVolume:
    """
    Label every axial slice inside ``roi`` from its own K-slice neighbourhood
    (edge-replicated at the volume ends); voxels outside the ROI are
    background.
    """
    K = net2.cfg.K if K is None else K
    if K != net2.cfg.K:
        raise ValueError(f"K={K} does not match the network's K={net2.cfg.K}")
    (x0, x1), (y0, y1), (z0, z1) = roi.ranges
    if z1 - z0 < 1:
        raise ValueError("ROI is thinner than one slice")
    depth = iv.shape[2]
    channel = net1_label_channel(p1_native)
    num_classes = net2.cfg.num_classes

    # in-plane crop padded up to the network's divisor; z kept whole for the slabs
    ex = -(-(x1 - x0) // net2.cfg.divisor) * net2.cfg.divisor
    ey = -(-(y1 - y0) // net2.cfg.divisor) * net2.cfg.divisor
    box = [(x0, x0 + ex), (y0, y0 + ey), (0, depth)]
    image = crop_or_pad_array(np.asarray(iv.data), box, INTENSITY_PAD)
    label_channel = crop_or_pad_array(channel, box, 0.0)

    out = np.zeros(iv.shape, dtype=np.uint8)
    zs = list(range(z0, z1))
    for start in range(0, len(zs), batch_size):
        chunk = zs[start:start + batch_size]
        slabs = []
        for z in chunk:
            idx = slab_indices(z, depth, K)
            slabs.append(np.stack([image[..., idx], label_channel[..., idx]]))
        probs = _run(net2, np.stack(slabs))
        labels = np.argmax(probs[..., 0], axis=1)
        for z, lab in zip(chunk, labels):
            out[x0:x1, y0:y1, z] = lab[:x1 - x0, :y1 - y0]
    return LabelVolume(labels=out, num_classes=num_classes, spacing=iv.spacing,
                       origin=iv.origin, direction=iv.direction)


def locate(iv_n: IntensityVolume, net1: Net1, coarse_spacing=DEFAULT_COARSE_SPACING,
           roi_margin: int = DEFAULT_ROI_MARGIN, refine_net1_on_roi: bool = False):
    """
    Network-1 stage of the pipeline on a rescaled volume: native-grid
    probabilities and the dynamic-tile ROI derived from them.
    """
    p1 = predict_coarse(iv_n, net1, coarse_spacing)
    roi = dynamic_tile(p1.data, roi_margin, iv_n.shape, ROI_MULTIPLE)
    if refine_net1_on_roi:
        crop = crop_or_pad_array(np.asarray(iv_n.data), roi.ranges, INTENSITY_PAD)
        data = np.array(p1.data)
        data[(slice(None), *roi.slices)] = net1_probabilities(crop, net1)
        p1 = ProbabilityField(data, source_net=1)
    return p1, roi


def predict(iv: IntensityVolume, checkpoint, coarse_spacing=None, roi_margin=None,
            refine_net1_on_roi: bool | None = None) -> LabelVolume:
    """
    Segment ``iv`` at its native resolution with a trained checkpoint (a path
    or a loaded :class:`~cascadeseg.trainer.Checkpoint`).

    By default network 1 runs once on the coarse grid. With
    ``refine_net1_on_roi`` it is run a second time on the native-resolution
    ROI crop, and that output feeds network 2.
    """
    from .trainer import Checkpoint, load_checkpoint

    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    opts = ckpt.inference
    coarse_spacing = coarse_spacing or opts.get("coarse_spacing", DEFAULT_COARSE_SPACING)
    roi_margin = opts.get("roi_margin", DEFAULT_ROI_MARGIN) if roi_margin is None else roi_margin
    if refine_net1_on_roi is None:
        refine_net1_on_roi = opts.get("refine_net1_on_roi", False)

    iv_n = rescale_intensity(iv)
    p1, roi = locate(iv_n, ckpt.net1, coarse_spacing, roi_margin, refine_net1_on_roi)
    return predict_fine(iv_n, p1, ckpt.net2, roi)
