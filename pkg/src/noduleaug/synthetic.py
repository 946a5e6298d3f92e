"""Synthetic CT fixtures: chest-like volumes in HU with optional spherical nodules."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .volume_io import Annotation, Volume

AIR_HU = -1000.0
LUNG_HU = -850.0
TISSUE_HU = 40.0
NODULE_HU = -50.0


def synthetic_ct(
    shape: Tuple[int, int, int] = (64, 64, 64),
    nodules: Sequence[Tuple[Sequence[float], float]] = (),
    seed: int = 0,
    spacing=(1.0, 1.0, 1.0),
    origin=(0.0, 0.0, 0.0),
    noise_hu: float = 20.0,
    outer_air: bool = True,
) -> Volume:
    """Soft-tissue shell around an ellipsoidal lung field, int16 HU.

    Set ``outer_air=False`` for a field of view that ends inside the body.
    ``nodules`` holds ``(center_zyx_voxels, radius_voxels)`` pairs; each is a
    soft sphere whose density fades towards its rim.
    """
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    c = [(n - 1) / 2 for n in shape]
    r = ((zz - c[0]) / (0.48 * shape[0])) ** 2 + ((yy - c[1]) / (0.45 * shape[1])) ** 2 + (
        (xx - c[2]) / (0.45 * shape[2])
    ) ** 2
    hu = np.where(r <= 1.0, LUNG_HU, TISSUE_HU)
    if outer_air:
        hu = np.where(r > 1.35, AIR_HU, hu)
    for center, radius in nodules:
        d = np.sqrt((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
        core = np.clip(1.0 - (d / radius) ** 2, 0.0, 1.0)
        hu = np.where(d <= radius, LUNG_HU + (NODULE_HU - LUNG_HU) * (0.4 + 0.6 * core), hu)
    hu = hu + rng.normal(0.0, noise_hu, size=shape)
    return Volume(np.round(hu).astype(np.int16), spacing=spacing, origin=origin, kind="raw_ct")


def synthetic_case(seed: int, shape=(64, 64, 64), n_nodules: int = 2, radius_range=(2.5, 4.5)):
    """CT volume plus matching annotations (world ``(x, y, z)``) for its nodules."""
    rng = np.random.default_rng([seed, 7])
    centers = []
    for _ in range(10_000):
        if len(centers) == n_nodules:
            break
        c = np.array([rng.uniform(0.35 * n, 0.65 * n) for n in shape])
        if all(np.abs(c - p).max() > 12 for p in centers):
            centers.append(c)
    else:
        if len(centers) < n_nodules:
            raise ValueError(f"cannot place {n_nodules} separated nodules in a {shape} volume")
    nodules = [(tuple(np.round(c)), float(rng.uniform(*radius_range))) for c in centers]
    vol = synthetic_ct(shape, nodules, seed=seed)
    anns = [
        Annotation(f"synthetic-{seed}", (c[2], c[1], c[0]), diameter=2 * rad)
        for c, rad in nodules
    ]
    return vol, anns


def bin_pattern_task(n: int, side: int = 7, seed: int = 0, noise=None):
    """Two-class patches with equal mean intensity and different histograms.

    Class 1 voxels sit mid-range (0.4-0.6); class 0 voxels split between a
    dark (0.1-0.3) and a bright (0.7-0.9) band. Labels alternate 1, 0, 1, ...
    ``noise`` is an optional :class:`~noduleaug.embedding.NoiseSpec` applied
    per patch with its seed offset by the patch index.
    """
    from dataclasses import replace

    from .embedding import add_noise

    rng = np.random.default_rng([seed, 11])
    shape = (side,) * 3
    out = []
    for i in range(n):
        y = 1 - i % 2
        if y:
            x = rng.uniform(0.4, 0.6, shape)
        else:
            x = np.where(rng.random(shape) < 0.5, rng.uniform(0.1, 0.3, shape), rng.uniform(0.7, 0.9, shape))
        if noise is not None:
            x = add_noise(x, replace(noise, seed=noise.seed * 1_000_003 + seed * 7919 + i))
        out.append((x, y))
    return out
