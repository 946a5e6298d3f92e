"""End-to-end run on synthetic data: ingest -> model -> fuse -> dataset -> classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion, nodule_model as nm
from .embedding import EpochStats, ToyClassifier, train_toy
from .evaluation import (
    DatasetManifest,
    ManifestEntry,
    MetricReport,
    assemble_dataset,
    evaluate_classifier,
    load_manifest_patches,
    traditional_augmentations,
)
from .preprocess import ResampleSpec, WindowSpec, extract_patch, resample, window_normalize
from .synthetic import synthetic_case, synthetic_ct
from .volume_io import make_mask, read_volume, world_to_voxel, write_volume

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    model: nm.NoduleStatsModel
    nodules: list
    manifest: DatasetManifest
    curves: list[EpochStats]
    report: MetricReport
    detection_sites: list


def run_pipeline(
    workdir,
    seed: int = 0,
    shape=(64, 64, 64),
    n_real: int = 5,
    n_generated: int = 3,
    patch_side: int = 11,
    threshold: float = 0.5,
    bins: int = 256,
    n_per_class: int = 10,
    epochs: int = 100,
    window: WindowSpec = WindowSpec(),
) -> PipelineResult:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    patches_dir = workdir / "patches"

    # ingest: synthetic cases go through the MetaImage round trip like real scans
    cubes, real_patches = [], []
    case = 0
    while len(cubes) < n_real:
        vol, anns = synthetic_case(seed * 1000 + case, shape=shape)
        path = workdir / "ct" / f"case{case:03d}.mhd"
        write_volume(vol, path)
        vol = resample(window_normalize(read_volume(path), window), ResampleSpec())
        for ann in anns[: n_real - len(cubes)]:
            center = world_to_voxel(vol, ann.center_zyx)
            patch = extract_patch(vol, center, patch_side)
            mask = extract_patch(make_mask(vol, ann), center, patch_side)
            real_patches.append((patch, mask))
            cubes.append(nm.align_cube(patch, nm.segment_foreground(patch, threshold)))
        case += 1
    log.info("aligned %d real nodule cubes", len(cubes))

    model = nm.build_model(cubes, bins=bins)
    nodules = [nm.sample_nodule(model, seed=seed * 1000 + k) for k in range(n_generated)]

    host = window_normalize(synthetic_ct(shape, seed=seed * 1000 + 999, outer_air=False), window)
    sites = fusion.propose_sites(host, cube_side=patch_side, n=n_generated, seed=seed)
    fused = host
    generated_patches = []
    for nod, site in zip(nodules, sites):
        res = fusion.fuse(fused, nod, site)
        fused = res.fused
        generated_patches.append((extract_patch(fused, site, patch_side), extract_patch(res.mask, site, patch_side)))
    write_volume(fused, workdir / "fused" / "host_fused.mhd")

    entries = []

    def add(vol, mask, label, provenance, name):
        p = patches_dir / f"{name}.mhd"
        write_volume(vol, p)
        mp = None
        if mask is not None:
            mp = patches_dir / f"{name}_mask.mhd"
            write_volume(mask, mp)
        entries.append(ManifestEntry(str(p), None if mp is None else str(mp), label, provenance))

    for k, (p, m) in enumerate(real_patches):
        add(p, m, 1, "real", f"real{k:03d}")
        for name, arr in traditional_augmentations(np.asarray(p.data)):
            add(p.replace(arr), None, 1, "traditional_aug", f"real{k:03d}_{name}")
    for k, (p, m) in enumerate(generated_patches):
        add(p, m, 1, "generated_stats", f"gen{k:03d}")

    # negatives: dark parenchyma patches from healthy scans
    n_neg = 0
    h = 0
    while n_neg < n_per_class:
        healthy = window_normalize(synthetic_ct(shape, seed=seed * 1000 + 500 + h, outer_air=False), window)
        want = min(n_per_class - n_neg, 8)
        for site in fusion.propose_sites(healthy, cube_side=patch_side, n=want, seed=seed + h):
            add(extract_patch(healthy, site, patch_side), None, 0, "real", f"neg{n_neg:03d}")
            n_neg += 1
        h += 1

    pool = DatasetManifest(entries)
    pool.write(workdir / "pool.tsv")
    manifest = assemble_dataset([pool], balance=True, n_per_class=n_per_class, seed=seed)
    manifest.write(workdir / "manifest.tsv")

    data = load_manifest_patches(manifest)
    cfg = ToyClassifier.create(bins=bins, seed=seed)
    clf, curves = train_toy(data, cfg, epochs, with_embedding=True)
    report, _ = evaluate_classifier(clf, data)
    return PipelineResult(model, nodules, manifest, curves, report, sites)
