"""HU windowing, isotropic resampling and patch extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import OutOfBoundsError, Volume

DEFAULT_WINDOW_LEVEL = -680.0
DEFAULT_WINDOW_WIDTH = 600.0
DEFAULT_TARGET_SPACING = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class WindowSpec:
    level: float = DEFAULT_WINDOW_LEVEL
    width: float = DEFAULT_WINDOW_WIDTH

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def bounds(self) -> Tuple[float, float]:
        return self.level - self.width / 2.0, self.level + self.width / 2.0


@dataclass(frozen=True)
class ResampleSpec:
    target_spacing: Tuple[float, float, float] = DEFAULT_TARGET_SPACING
    interpolation: str = "trilinear"  # "nearest" for masks

    def __post_init__(self):
        ts = tuple(float(s) for s in self.target_spacing)
        if len(ts) != 3 or not all(s > 0 for s in ts):
            raise ValueError(f"target spacing must be three positive values, got {self.target_spacing}")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        object.__setattr__(self, "target_spacing", ts)


def window_normalize(v: Volume, w: WindowSpec = WindowSpec()) -> Volume:
    """Clip to the HU window and map it affinely onto [0, 1].

    Clipping doubles as the denoising step: everything outside the window
    is flattened to 0 or 1.
    """
    if v.kind != "raw_ct":
        raise ValueError(f"window_normalize expects a raw_ct volume, got {v.kind}")
    lo, hi = w.bounds
    data = (np.clip(v.data.astype(np.float64), lo, hi) - lo) / w.width
    return v.replace(np.clip(data, 0.0, 1.0), kind="normalized")


def resample(v: Volume, r: ResampleSpec = ResampleSpec()) -> Volume:
    """Resample onto ``r.target_spacing`` keeping the origin fixed.

    Output voxel ``i`` sits at world ``origin + i * target_spacing``; samples
    past the last source voxel are clamped to the edge. Masks always use
    nearest-neighbour so they stay binary.
    """
    src = np.asarray(v.spacing)
    dst = np.asarray(r.target_spacing)
    # tolerance keeps e.g. 3 * 0.7 / 0.7 from rounding up to 4
    dims = [max(1, math.ceil(n * s / t - 1e-9)) for n, s, t in zip(v.shape, src, dst)]
    coords = np.meshgrid(
        *[np.arange(n) * (t / s) for n, s, t in zip(dims, src, dst)], indexing="ij"
    )
    nearest = r.interpolation == "nearest" or v.kind == "mask"
    if nearest:
        # round half up on index coordinates, then clamp
        idx = [np.clip(np.floor(c + 0.5).astype(int), 0, n - 1) for c, n in zip(coords, v.shape)]
        data = v.data[tuple(idx)]
    else:
        data = ndimage.map_coordinates(
            v.data.astype(np.float64), coords, order=1, mode="nearest"
        )
        if v.kind == "normalized":
            data = np.clip(data, 0.0, 1.0)
    return v.replace(data, spacing=tuple(dst))


def extract_patch(v: Volume, center: Sequence[int], side: int) -> Volume:
    """``side``³ cube centred on ``center``, padded with the volume minimum."""
    if side < 1 or side % 2 == 0:
        raise ValueError(f"patch side must be odd and positive, got {side}")
    c = np.asarray(center, dtype=int)
    shape = np.asarray(v.shape)
    if c.shape != (3,) or np.any(c < 0) or np.any(c >= shape):
        raise OutOfBoundsError(f"patch centre {tuple(center)} outside grid {v.shape}")
    half = side // 2
    lo = c - half
    out = np.full((side,) * 3, v.data.min(), dtype=v.data.dtype)
    src_lo = np.maximum(lo, 0)
    src_hi = np.minimum(lo + side, shape)
    dst_lo = src_lo - lo
    dst_hi = dst_lo + (src_hi - src_lo)
    out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = v.data[
        src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
    ]
    origin = tuple(float(o + k * s) for o, k, s in zip(v.origin, lo, v.spacing))
    return v.replace(out, origin=origin)
