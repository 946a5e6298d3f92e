"""Command-line interface.

    noduleaug preprocess --ct scan.mhd --annotations annotations.csv -o patches/
    noduleaug build-model --cubes patches/ --bins 256 --threshold 0.5 -o model.bin
    noduleaug generate --model model.bin --seed 0 --count 10 -o nodules/
    noduleaug fuse --host healthy.mhd --nodule nodules/nodule_0000.npz --auto-sites 3 --seed 0 -o fused/
    noduleaug assemble --sources pool.tsv --balance --n 50 --seed 0 -o manifest.tsv
    noduleaug train-toy --with-embedding --epochs 30 --seed 0 --noise salt_pepper:0.1 --out curves.csv
    noduleaug evaluate --pred pred_masks/ --truth true_masks/
    noduleaug metrics --tp 42 --fn 8 --fp 46 --tn 4
    noduleaug experiment --base base.tsv --extra generated.tsv -o report.csv
    noduleaug demo --workdir run/ --seed 0
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import embedding as emb
from . import evaluation as ev
from . import fusion
from . import nodule_model as nm
from .preprocess import ResampleSpec, WindowSpec, extract_patch, resample, window_normalize
from .volume_io import Volume, make_mask, read_annotations, read_volume, world_to_voxel, write_volume

log = logging.getLogger("noduleaug")


def _triple(text: str, cast=float):
    parts = [cast(p) for p in text.replace(" ", "").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected one or three comma-separated values, got {text!r}")
    return tuple(parts)


def _add_window_flags(p):
    p.add_argument("--window-level", type=float, default=WindowSpec().level)
    p.add_argument("--window-width", type=float, default=WindowSpec().width)


def _normalized(v, args):
    if v.kind == "raw_ct":
        return window_normalize(v, WindowSpec(args.window_level, args.window_width))
    return v


# --------------------------------------------------------------------------


def cmd_preprocess(args):
    vol = read_volume(args.ct)
    anns = read_annotations(args.annotations, args.kind)
    series = Path(args.ct).name.removesuffix(".mhd")
    matching = [a for a in anns if a.series_id == series] or (anns if args.all_series else [])
    if not matching:
        log.warning("no annotations for series %s", series)
    vol = resample(_normalized(vol, args), ResampleSpec(args.target_spacing))
    out = Path(args.output)
    for k, ann in enumerate(matching):
        center = world_to_voxel(vol, ann.center_zyx)
        name = f"{series}_{k:04d}"
        write_volume(extract_patch(vol, center, args.patch_side), out / f"{name}.mhd")
        if ann.diameter is not None:
            write_volume(extract_patch(make_mask(vol, ann), center, args.patch_side), out / f"{name}_mask.mhd")
    print(f"wrote {len(matching)} patches to {out}")


def cmd_build_model(args):
    paths = sorted(p for p in Path(args.cubes).glob("*.mhd") if not p.stem.endswith("_mask"))
    if not paths:
        sys.exit(f"no .mhd cubes in {args.cubes}")
    cubes = nm.cubes_from_volumes([_normalized(read_volume(p), args) for p in paths], args.threshold)
    model = nm.build_model(cubes, bins=args.bins)
    Path(args.output).write_bytes(nm.save_model(model))
    print(f"{model} -> {args.output}")


def cmd_generate(args):
    model = nm.load_model(Path(args.model).read_bytes())
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        nod = nm.sample_nodule(model, args.seed + k, args.min_support)
        nm.save_nodule(nod, out / f"nodule_{k:04d}.npz")
        if args.mhd:
            write_volume(Volume(nod.cube, kind="normalized"), out / f"nodule_{k:04d}.mhd")
    print(f"wrote {args.count} nodules to {out}")


def cmd_fuse(args):
    host = _normalized(read_volume(args.host), args)
    nodule = nm.load_nodule(args.nodule)
    if args.site:
        sites = [args.site]
    else:
        sites = fusion.propose_sites(host, args.lung_threshold, nodule.side, args.auto_sites, args.seed)
    out = Path(args.output)
    stem = Path(args.host).name.removesuffix(".mhd")
    for k, site in enumerate(sites):
        res = fusion.fuse(host, nodule, site)
        suffix = "" if len(sites) == 1 else f"{k:03d}"
        write_volume(res.fused, out / f"{stem}_fused{suffix}.mhd")
        write_volume(res.mask, out / f"{stem}_fused{suffix}_mask.mhd")
        print(f"site {','.join(map(str, site))} -> {stem}_fused{suffix}.mhd")


def cmd_assemble(args):
    sources = [ev.DatasetManifest.read(p) for p in args.sources]
    m = ev.assemble_dataset(
        sources, balance=args.balance, n_per_class=args.n, seed=args.seed,
        augment_dir=args.augment_dir, split=args.split,
    )
    m.write(args.output)
    counts = m.label_counts()
    print(f"{len(m)} entries ({counts[1]} positive, {counts[0]} negative) -> {args.output}")


def cmd_train_toy(args):
    from .synthetic import bin_pattern_task

    noise = emb.NoiseSpec.parse(args.noise, seed=args.seed) if args.noise else None
    if args.manifest:
        m = ev.DatasetManifest.read(args.manifest)
        train = ev.load_manifest_patches(m.by_split("train"))
        test = ev.load_manifest_patches(m.by_split("test"))
        if noise is not None:
            test = [(emb.add_noise(x, emb.NoiseSpec(noise.kind, noise.magnitude, noise.seed + i)), y)
                    for i, (x, y) in enumerate(test)]
    else:
        train = bin_pattern_task(args.n_train, seed=args.seed, noise=noise)
        test = bin_pattern_task(args.n_test, seed=args.seed + 1, noise=noise)
    cfg = emb.ToyClassifier.create(bins=args.bins, dim=args.dim, lr=args.lr, seed=args.seed)
    clf, curves = emb.train_toy(train, cfg, args.epochs, with_embedding=args.with_embedding, test=test)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc", "test_acc"])
        for c in curves:
            w.writerow([c.epoch, f"{c.loss:.6f}", f"{c.train_acc:.4f}", "" if c.test_acc is None else f"{c.test_acc:.4f}"])
    if test:
        report, roc = ev.evaluate_classifier(clf, test)
        print(ev.format_report(report))
        if roc is not None:
            print(f"auc={roc.auc:.3f}")
            if args.roc:
                ev.write_roc(roc, args.roc)


def cmd_evaluate(args):
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    truth_paths = sorted(truth_dir.glob("*.mhd"))
    pairs = [(pred_dir / p.name, p) for p in truth_paths if (pred_dir / p.name).exists()]
    if len(pairs) < len(truth_paths):
        log.warning("%d truth masks have no prediction", len(truth_paths) - len(pairs))
    preds = [read_volume(p) for p, _ in pairs]
    truths = [read_volume(t) for _, t in pairs]
    acc = ev.detection_accuracy(preds, truths)
    dices = [ev.dice(p, t) for p, t in zip(preds, truths)]
    print(f"pairs={len(pairs)} detection_accuracy={acc:.4f} mean_dice={np.mean(dices):.4f}")


def cmd_metrics(args):
    report = ev.compute_metrics(ev.ConfusionMatrix(tp=args.tp, tn=args.tn, fp=args.fp, fn=args.fn))
    print(ev.format_report(report))
    if args.output:
        ev.write_metric_tables({args.method: report}, args.output)


def cmd_experiment(args):
    base = ev.DatasetManifest.read(args.base)
    extra = ev.DatasetManifest.read(args.extra) if args.extra else ev.DatasetManifest()
    test = ev.DatasetManifest.read(args.test) if args.test else None
    cfg = emb.ToyClassifier.create(bins=args.bins, dim=args.dim, lr=args.lr, seed=args.seed)
    rep = ev.run_augmentation_experiment(base, extra, cfg, test, args.epochs, not args.no_embedding)
    rep.write_csv(args.output)
    for name, r in (("base", rep.base), ("base+extra", rep.augmented)):
        print(f"[{name}]\n{ev.format_report(r)}")
    print("deltas: " + " ".join(f"{k}={v:+.3f}" for k, v in rep.deltas.items()))


def cmd_demo(args):
    from .pipeline import run_pipeline

    res = run_pipeline(args.workdir, seed=args.seed)
    print(res.model)
    print(ev.format_report(res.report))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noduleaug", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="window, resample and cut annotation-centred patches")
    p.add_argument("--ct", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--kind", choices=("annotations", "candidates"), default="annotations")
    p.add_argument("--all-series", action="store_true", help="use every row when none match the file stem")
    _add_window_flags(p)
    p.add_argument("--target-spacing", type=_triple, default=(1.0, 1.0, 1.0))
    p.add_argument("--patch-side", type=int, default=33)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-model", help="build the voxel statistics model from nodule cubes")
    p.add_argument("--cubes", required=True)
    p.add_argument("--bins", type=int, default=nm.DEFAULT_BINS)
    p.add_argument("--threshold", type=float, default=0.5)
    _add_window_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_build_model)

    p = sub.add_parser("generate", help="sample synthetic nodules from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--min-support", type=float, default=0.0)
    p.add_argument("--mhd", action="store_true", help="also write each cube as MetaImage")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fuse", help="implant a generated nodule into a healthy volume")
    p.add_argument("--host", required=True)
    p.add_argument("--nodule", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--site", type=lambda s: _triple(s, int))
    g.add_argument("--auto-sites", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lung-threshold", type=float, default=fusion.DEFAULT_LUNG_THRESHOLD)
    _add_window_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("assemble", help="pool manifests into a (balanced) dataset")
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment-dir", help="write flip/rotation copies of positives here")
    p.add_argument("--split", choices=ev.SPLITS)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("train-toy", help="train the embedding toy classifier")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--with-embedding", dest="with_embedding", action="store_true", default=True)
    g.add_argument("--no-embedding", dest="with_embedding", action="store_false")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", help="kind:magnitude, e.g. gaussian:0.1 or salt_pepper:0.1")
    p.add_argument("--manifest", help="train/test patches; default is a synthetic histogram task")
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--n-test", type=int, default=40)
    p.add_argument("--bins", type=int, default=emb.DEFAULT_BINS)
    p.add_argument("--dim", type=int, default=emb.DEFAULT_DIM)
    p.add_argument("--lr", type=float, default=emb.DEFAULT_LR)
    p.add_argument("--roc", help="write ROC points here")
    p.add_argument("--out", default="curves.csv")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("evaluate", help="detection accuracy of predicted vs true masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("metrics", help="metric tables from a confusion matrix")
    for name in ("tp", "fn", "fp", "tn"):
        p.add_argument(f"--{name}", type=int, required=True)
    p.add_argument("--method", default="model")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("experiment", help="compare training on base vs base+extra")
    p.add_argument("--base", required=True)
    p.add_argument("--extra")
    p.add_argument("--test")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-embedding", action="store_true")
    p.add_argument("--bins", type=int, default=emb.DEFAULT_BINS)
    p.add_argument("--dim", type=int, default=emb.DEFAULT_DIM)
    p.add_argument("--lr", type=float, default=emb.DEFAULT_LR)
    p.add_argument("-o", "--output", default="experiment.csv")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("demo", help="run the whole pipeline on synthetic scans")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
    )
    args.func(args)


if __name__ == "__main__":
    main()
