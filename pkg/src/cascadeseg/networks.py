"""
Network 1 (dilated volumetric encoder-decoder for coarse localisation),
network 2 (3D-to-2D slice classifier) and the dynamic-tile ROI layer.

Tensors are laid out ``(batch, channels, x, y, z)`` with ``z`` the axial axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ROI_MULTIPLE = 16


@dataclass(frozen=True)
class Net1Config:
    num_classes: int = 5
    in_channels: int = 1
    base_width: int = 8
    blocks_per_path: int = 4
    kernel_size: int = 5
    dilation_step: int = 2
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.num_classes < 2 or self.base_width < 1 or self.blocks_per_path < 1:
            raise ValueError(f"invalid Net1Config {self}")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd to preserve shapes")

    @property
    def dilations_contracting(self) -> list:
        return [self.dilation_step * n for n in range(1, self.blocks_per_path + 1)]

    @property
    def dilations_expansive(self) -> list:
        return self.dilations_contracting[::-1]

    @property
    def divisor(self) -> int:
        return 2 ** self.blocks_per_path


@dataclass(frozen=True)
class Net2Config:
    num_classes: int = 5
    input_channels: int = 2
    base_width: int = 8
    blocks_per_path: int = 4
    kernel_contracting: int = 3
    kernel_expansive_2d: int = 5
    K: int = 9
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.K < 1 or self.K % 2 != 1:
            raise ValueError(f"K must be a positive odd number, got {self.K}")
        if self.num_classes < 2 or self.base_width < 1 or self.blocks_per_path < 1:
            raise ValueError(f"invalid Net2Config {self}")
        if self.kernel_contracting % 2 != 1 or self.kernel_expansive_2d % 2 != 1:
            raise ValueError("kernel sizes must be odd")

    @property
    def divisor(self) -> int:
        return 2 ** self.blocks_per_path


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)


class ConvBlock(nn.Sequential):
    """Two convolutions, each followed by ReLU, then one dropout layer."""

    def __init__(self, cin, cout, kernel, dilation=1, dropout=0.0):
        kernel = tuple(kernel) if isinstance(kernel, (tuple, list)) else (kernel,) * 3
        padding = tuple(dilation * (k // 2) for k in kernel)
        super().__init__(
            nn.Conv3d(cin, cout, kernel, padding=padding, dilation=dilation),
            nn.ReLU(inplace=True),
            nn.Conv3d(cout, cout, kernel, padding=padding, dilation=dilation),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
        )


class Net1(nn.Module):
    """Shape-preserving dilated U-Net; returns per-voxel class probabilities."""

    def __init__(self, cfg: Net1Config):
        super().__init__()
        self.cfg = cfg
        k = cfg.kernel_size
        widths = [cfg.base_width * 2 ** n for n in range(cfg.blocks_per_path)]
        self.down = nn.ModuleList()
        cin = cfg.in_channels
        for w, d in zip(widths, cfg.dilations_contracting):
            self.down.append(ConvBlock(cin, w, k, d, cfg.dropout_rate))
            cin = w
        # bottleneck map is input/16 per axis, dilation buys nothing there
        self.bottleneck = ConvBlock(cin, 2 * cin, k, 1, cfg.dropout_rate)
        cin = 2 * cin
        self.ups = nn.ModuleList()
        self.up = nn.ModuleList()
        for w, d in zip(widths[::-1], cfg.dilations_expansive):
            self.ups.append(nn.ConvTranspose3d(cin, w, 2, stride=2))
            self.up.append(ConvBlock(2 * w, w, k, d, cfg.dropout_rate))
            cin = w
        self.head = nn.Conv3d(cin, cfg.num_classes, 1)
        _init_weights(self)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, x, y, z), got {tuple(x.shape)}")
        if any(n % self.cfg.divisor for n in x.shape[2:]):
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {self.cfg.divisor}; pad first")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottleneck(x)
        for upconv, block, skip in zip(self.ups, self.up, reversed(skips)):
            x = block(torch.cat([upconv(x), skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


class Net2(nn.Module):
    """
    Slice classifier: a 3D contracting path with in-plane-only pooling, a
    valid ``1x1xK`` convolution that collapses every K input slices into one,
    and a 2D expansive path. Output depth is ``z_in - K + 1``.
    """

    def __init__(self, cfg: Net2Config):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** n for n in range(cfg.blocks_per_path)]
        k3 = cfg.kernel_contracting
        k2 = (cfg.kernel_expansive_2d, cfg.kernel_expansive_2d, 1)
        self.down = nn.ModuleList()
        cin = cfg.input_channels
        for w in widths:
            self.down.append(ConvBlock(cin, w, k3, 1, cfg.dropout_rate))
            cin = w
        self.bottleneck = ConvBlock(cin, 2 * cin, k3, 1, cfg.dropout_rate)
        cin = 2 * cin
        self.collapse = nn.Conv3d(cin, cin, (1, 1, cfg.K))
        self.ups = nn.ModuleList()
        self.up = nn.ModuleList()
        for w in widths[::-1]:
            self.ups.append(nn.ConvTranspose3d(cin, w, (2, 2, 1), stride=(2, 2, 1)))
            self.up.append(ConvBlock(2 * w, w, k2, 1, cfg.dropout_rate))
            cin = w
        self.head = nn.Conv3d(cin, cfg.num_classes, 1)
        _init_weights(self)

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.ndim != 5 or x.shape[1] != cfg.input_channels:
            raise ValueError(f"expected (B, {cfg.input_channels}, x, y, z), got {tuple(x.shape)}")
        if x.shape[4] < cfg.K:
            raise ValueError(f"input depth {x.shape[4]} is smaller than K={cfg.K}")
        if x.shape[2] % cfg.divisor or x.shape[3] % cfg.divisor:
            raise ValueError(
                f"in-plane dims {tuple(x.shape[2:4])} must be divisible by {cfg.divisor}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        half = (self.cfg.K - 1) // 2
        z_out = x.shape[4] - self.cfg.K + 1
        skips = []
        for block in self.down:
            x = block(x)
            # skips keep only the slices that survive the collapse
            skips.append(x[..., half:half + z_out])
            x = F.max_pool3d(x, (2, 2, 1))
        x = self.bottleneck(x)
        x = F.relu(self.collapse(x))
        for upconv, block, skip in zip(self.ups, self.up, reversed(skips)):
            x = block(torch.cat([upconv(x), skip], dim=1))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def build_net1(cfg: Net1Config) -> Net1:
    return Net1(cfg)


def build_net2(cfg: Net2Config) -> Net2:
    return Net2(cfg)


def compose_net2_input(intensity, p1) -> torch.Tensor:
    """
    Stack the intensity (channel 0) with network 1's argmax label divided by
    ``C`` (channel 1).

    The label channel carries a straight-through gradient: its forward value
    is the hard argmax, its gradient that of the expected label
    ``sum_c c * p_c / C``, so network 2's loss reaches network 1 during joint
    training.
    """
    intensity = torch.as_tensor(intensity)
    p1 = torch.as_tensor(p1)
    batched = p1.ndim == 5
    if not batched:
        intensity, p1 = intensity.reshape(1, 1, *intensity.shape[-3:]), p1.unsqueeze(0)
    elif intensity.ndim == 4:
        intensity = intensity.unsqueeze(1)
    if intensity.shape[-3:] != p1.shape[-3:] or intensity.shape[0] != p1.shape[0]:
        raise ValueError(
            f"shape mismatch: intensity {tuple(intensity.shape)} vs p1 {tuple(p1.shape)}")
    c = p1.shape[1] - 1
    hard = p1.argmax(dim=1, keepdim=True).to(p1.dtype) / c
    classes = torch.arange(c + 1, dtype=p1.dtype, device=p1.device).view(1, -1, 1, 1, 1)
    soft = (p1 * classes).sum(dim=1, keepdim=True) / c
    label = hard + (soft - soft.detach())
    out = torch.cat([intensity.to(p1.dtype), label], dim=1)
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# dynamic tile
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiBox:
    """Half-open per-axis index ranges ``((x0, x1), (y0, y1), (z0, z1))``."""

    ranges: tuple
    margin_vox: int = 0

    def __post_init__(self):
        ranges = tuple((int(a), int(b)) for a, b in self.ranges)
        if len(ranges) != 3 or any(b <= a for a, b in ranges):
            raise ValueError(f"invalid ROI ranges {self.ranges}")
        object.__setattr__(self, "ranges", ranges)

    @property
    def extent(self) -> tuple:
        return tuple(b - a for a, b in self.ranges)

    @property
    def slices(self) -> tuple:
        return tuple(slice(a, b) for a, b in self.ranges)

    @classmethod
    def full(cls, shape, margin_vox: int = 0) -> "RoiBox":
        return cls(tuple((0, int(n)) for n in shape), margin_vox)


def _round_up_range(lo: int, hi: int, n: int, multiple: int):
    extent = min(-(-(hi - lo) // multiple) * multiple, n)
    hi = lo + extent
    if hi > n:
        lo, hi = n - extent, n
    return lo, hi


def dynamic_tile(p1, margin_vox: int = 8, volume_shape=None,
                 multiple: int = ROI_MULTIPLE) -> RoiBox:
    """
    Bounding box of voxels whose argmax class is foreground, grown by
    ``margin_vox`` per face, clamped to the volume, with in-plane extents
    rounded up to multiples of ``multiple``. With no foreground the full
    volume is returned.
    """
    p1 = p1.detach().cpu().numpy() if isinstance(p1, torch.Tensor) else np.asarray(p1)
    if p1.ndim == 5:
        p1 = p1[0]
    shape = tuple(volume_shape) if volume_shape is not None else p1.shape[1:]
    fg = np.argmax(p1, axis=0) >= 1
    if not fg.any():
        return RoiBox.full(shape, margin_vox)
    ranges = []
    for axis, n in enumerate(shape):
        other = tuple(i for i in range(3) if i != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        lo = max(int(idx[0]) - margin_vox, 0)
        hi = min(int(idx[-1]) + 1 + margin_vox, n)
        if axis < 2:
            lo, hi = _round_up_range(lo, hi, n, multiple)
        ranges.append((lo, hi))
    return RoiBox(tuple(ranges), margin_vox)


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------

def describe(model: nn.Module) -> list[dict]:
    """One record per convolutional layer, in forward order."""
    rows = []
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            rows.append({
                "name": name,
                "type": type(m).__name__,
                "in": m.in_channels,
                "out": m.out_channels,
                "kernel": tuple(m.kernel_size),
                "dilation": tuple(m.dilation),
                "params": sum(p.numel() for p in m.parameters()),
            })
    return rows


def dilation_schedule(model: Net1) -> tuple[list, list]:
    """Per-block dilation rates of the contracting and expansive paths, read from the layers."""
    def rates(blocks):
        out = []
        for block in blocks:
            ds = {m.dilation[0] for m in block if isinstance(m, nn.Conv3d)}
            if len(ds) != 1:
                raise AssertionError(f"mixed dilations within a block: {ds}")
            out.append(ds.pop())
        return out
    return rates(model.down), rates(model.up)


def summary(model: nn.Module) -> str:
    rows = describe(model)
    lines = [f"{'layer':<22}{'type':<17}{'in':>5}{'out':>5}  {'kernel':<11}{'dil':<6}{'params':>9}"]
    for r in rows:
        kernel = "x".join(str(k) for k in r["kernel"])
        lines.append(f"{r['name']:<22}{r['type']:<17}{r['in']:>5}{r['out']:>5}  "
                     f"{kernel:<11}{r['dilation'][0]:<6}{r['params']:>9}")
    n_params = sum(p.numel() for p in model.parameters())
    lines.append(f"convolutional layers: {len(rows)} "
                 f"({sum(r['type'] == 'Conv3d' for r in rows)} conv, "
                 f"{sum(r['type'] == 'ConvTranspose3d' for r in rows)} transposed)")
    lines.append(f"parameters: {n_params}")
    return "\n".join(lines)


def config_dict(cfg) -> dict:
    return asdict(cfg)
