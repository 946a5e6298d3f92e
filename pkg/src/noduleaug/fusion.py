"""Implant generated nodules into healthy lung volumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .nodule_model import GeneratedNodule
from .volume_io import Volume

DEFAULT_LUNG_THRESHOLD = 0.35


class FusionError(ValueError):
    pass


class NoFeasibleSitesError(FusionError):
    pass


@dataclass(frozen=True)
class FusionResult:
    fused: Volume
    mask: Volume
    site: Tuple[int, int, int]


def _cube_bounds(shape, site, side):
    half = side // 2
    lo = np.asarray(site, dtype=int) - half
    hi = lo + side
    if np.any(lo < 0) or np.any(hi > np.asarray(shape)):
        raise FusionError(f"nodule cube of side {side} at {tuple(site)} overhangs host grid {tuple(shape)}")
    return tuple(slice(a, b) for a, b in zip(lo, hi))


def fuse(host: Volume, nodule: GeneratedNodule, site: Sequence[int]) -> FusionResult:
    """Replace host gray values by nodule values on the nodule support.

    Replacement is verbatim; no blending at the rim. The returned mask is 1
    exactly on the replaced voxels.
    """
    if host.kind != "normalized":
        raise FusionError(f"host must be a normalized volume, got {host.kind}")
    if len(site) != 3:
        raise FusionError("site must be a (z, y, x) index")
    window = _cube_bounds(host.shape, site, nodule.side)
    support = nodule.support_mask.astype(bool)

    fused = np.array(host.data, copy=True)
    fused[window][support] = nodule.cube[support]
    mask = np.zeros(host.shape, dtype=np.uint8)
    mask[window][support] = 1
    return FusionResult(
        fused=host.replace(fused),
        mask=host.replace(mask, kind="mask"),
        site=tuple(int(s) for s in site),
    )


def propose_sites(
    host: Volume,
    lung_threshold: float = DEFAULT_LUNG_THRESHOLD,
    cube_side: int = 9,
    n: int = 1,
    seed: int = 0,
) -> list[Tuple[int, int, int]]:
    """Pick ``n`` seeded implant centres inside dark parenchyma.

    A centre is feasible when the cube fits inside the host and the cube's
    mean intensity is below ``lung_threshold``. Chosen centres are at least
    ``cube_side`` apart in Chebyshev distance, so their cubes never overlap.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if cube_side < 1 or cube_side % 2 == 0:
        raise ValueError(f"cube_side must be odd and positive, got {cube_side}")
    half = cube_side // 2
    shape = np.asarray(host.shape)
    if np.any(shape < cube_side):
        raise NoFeasibleSitesError(f"host grid {host.shape} is smaller than a {cube_side}-cube")
    local_mean = ndimage.uniform_filter(
        np.asarray(host.data, dtype=np.float64), size=cube_side, mode="constant"
    )
    # restrict to centres whose cube fits
    inner = tuple(slice(half, n_ - (cube_side - half) + 1) for n_ in shape)
    ok = local_mean[inner] < lung_threshold
    candidates = np.argwhere(ok) + half
    if len(candidates) < n:
        raise NoFeasibleSitesError(f"only {len(candidates)} feasible sites, {n} requested")

    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []
    for c in candidates[rng.permutation(len(candidates))]:
        if all(np.abs(c - p).max() >= cube_side for p in chosen):
            chosen.append(c)
            if len(chosen) == n:
                return [tuple(int(v) for v in p) for p in chosen]
    raise NoFeasibleSitesError(f"only {len(chosen)} mutually separated sites found, {n} requested")
