"""Detection accuracy, binary classification metrics, ROC, manifests and experiments."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedding import ToyClassifier, train_toy
from .volume_io import Volume, read_volume, write_volume


PROVENANCES = ("real", "generated_stats", "generated_gan_external", "traditional_aug")
SPLITS = ("train", "test")


# --------------------------------------------------------------------------
# detection accuracy


def _mask_array(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Volume) else m) != 0


def detection_accuracy(pred_masks: Sequence, true_masks: Sequence) -> float:
    """``V_right / V_all``.

    ``V_all`` counts ground-truth masks with any foreground; a pair is right
    when the predicted and true masks share at least one voxel.
    """
    if len(pred_masks) != len(true_masks):
        raise ValueError(f"{len(pred_masks)} predictions vs {len(true_masks)} ground-truth masks")
    v_all = v_right = 0
    for k, (p, t) in enumerate(zip(pred_masks, true_masks)):
        p, t = _mask_array(p), _mask_array(t)
        if p.shape != t.shape:
            raise ValueError(f"pair {k}: shape {p.shape} != {t.shape}")
        if t.any():
            v_all += 1
            v_right += bool(np.logical_and(p, t).any())
    if v_all == 0:
        raise ValueError("no ground-truth mask has foreground (V_all = 0)")
    return v_right / v_all


def dice(pred, true) -> float:
    """Dice overlap, reported for information alongside detection accuracy."""
    p, t = _mask_array(pred), _mask_array(true)
    denom = p.sum() + t.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(p, t).sum() / denom


# --------------------------------------------------------------------------
# classification metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """Same predictions viewed with the negative class as positive."""
        return ConfusionMatrix(tp=self.tn, tn=self.tp, fp=self.fn, fn=self.fp)

    @classmethod
    def from_predictions(cls, y_true: Iterable[int], y_pred: Iterable[int]) -> "ConfusionMatrix":
        t = np.asarray(list(y_true), dtype=int)
        p = np.asarray(list(y_pred), dtype=int)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred differ in length")
        return cls(
            tp=int(((t == 1) & (p == 1)).sum()),
            tn=int(((t == 0) & (p == 0)).sum()),
            fp=int(((t == 0) & (p == 1)).sum()),
            fn=int(((t == 1) & (p == 0)).sum()),
        )


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    accuracy: float
    f1: float
    undefined: tuple = ()  # names of metrics whose denominator was zero (reported as 0)


@dataclass(frozen=True)
class MetricReport:
    """Positive-class metrics, both per-class views and their macro average."""

    precision: float
    recall: float
    accuracy: float
    f1: float
    per_class: dict  # {1: ClassMetrics, 0: ClassMetrics}
    macro_avg: ClassMetrics
    confusion: ConfusionMatrix
    undefined: tuple = ()


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def _class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    undefined: list[str] = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    f1 = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1", undefined)
    return ClassMetrics(precision, recall, (cm.tp + cm.tn) / cm.total, f1, tuple(undefined))


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    pos = _class_metrics(cm)
    neg = _class_metrics(cm.swapped())
    macro = ClassMetrics(
        precision=(pos.precision + neg.precision) / 2,
        recall=(pos.recall + neg.recall) / 2,
        accuracy=(pos.accuracy + neg.accuracy) / 2,
        f1=(pos.f1 + neg.f1) / 2,
    )
    return MetricReport(
        precision=pos.precision,
        recall=pos.recall,
        accuracy=pos.accuracy,
        f1=pos.f1,
        per_class={1: pos, 0: neg},
        macro_avg=macro,
        confusion=cm,
        undefined=pos.undefined,
    )


# --------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocCurve:
    points: list  # [(fpr, tpr), ...] from (0, 0) to (1, 1)
    thresholds: list  # threshold for points[1:]
    auc: float


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Sweep thresholds over distinct scores (descending); ties move together."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D sequences of equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(np.diff(s) != 0, True))
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(list(zip(fpr.tolist(), tpr.tolist())), s[ends].tolist(), auc)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    mask_path: Optional[str]
    label: int
    provenance: str = "real"
    split: str = "train"

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


@dataclass
class DatasetManifest:
    """Text index of patches. One tab-separated record per line:
    ``path  mask-path-or-dash  label  provenance  split``."""

    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def split(self) -> Optional[str]:
        splits = {e.split for e in self.entries}
        return splits.pop() if len(splits) == 1 else None

    def by_split(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split])

    def label_counts(self) -> dict:
        return {lab: sum(e.label == lab for e in self.entries) for lab in (0, 1)}

    def missing_paths(self) -> list[str]:
        out = []
        for e in self.entries:
            for p in (e.path, e.mask_path):
                if p is not None and not Path(p).exists():
                    out.append(p)
        return out

    def validate(self) -> None:
        missing = self.missing_paths()
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest paths missing, e.g. {missing[0]}")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for e in self.entries:
                w.writerow([e.path, e.mask_path or "-", e.label, e.provenance, e.split])

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        entries = []
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                p, m, label, prov, split = row
                try:
                    entries.append(ManifestEntry(p, None if m == "-" else m, int(label), prov, split))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(entries)


def traditional_augmentations(data: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Flips along each axis and 90/180/270 degree rotations in the axial plane."""
    out = [(f"flip{ax}", np.flip(data, axis=ax)) for ax in range(3)]
    out += [(f"rot{90 * k}", np.rot90(data, k=k, axes=(1, 2))) for k in (1, 2, 3)]
    return [(name, np.ascontiguousarray(a)) for name, a in out]


def _augment_entry(e: ManifestEntry, out_dir: Path) -> list[ManifestEntry]:
    vol = read_volume(e.path)
    mask = read_volume(e.mask_path) if e.mask_path else None
    mask_aug = dict(traditional_augmentations(mask.data)) if mask is not None else {}
    stem = Path(e.path).name.removesuffix(".mhd")
    out = []
    for name, arr in traditional_augmentations(vol.data):
        p = out_dir / f"{stem}_{name}.mhd"
        write_volume(vol.replace(arr), p)
        mp = None
        if mask is not None:
            mp = out_dir / f"{stem}_{name}_mask.mhd"
            write_volume(mask.replace(mask_aug[name]), mp)
        out.append(replace(e, path=str(p), mask_path=None if mp is None else str(mp), provenance="traditional_aug"))
    return out


class InsufficientEntriesError(ValueError):
    pass


def assemble_dataset(
    sources: Sequence[DatasetManifest],
    balance: bool = True,
    n_per_class: int = 50,
    seed: int = 0,
    augment_dir=None,
    split: Optional[str] = None,
) -> DatasetManifest:
    """Seeded sampling without replacement from the pooled sources.

    With ``balance`` exactly ``n_per_class`` entries of each label are drawn.
    Without it all pooled entries are kept, in seeded order. When
    ``augment_dir`` is given every selected positive is expanded with its six
    flip/rotation copies, written to that directory as
    ``traditional_aug`` entries (so counts then exceed ``n_per_class``).
    ``split`` overrides the split of every output entry.
    """
    pool = [e for m in sources for e in m.entries]
    rng = np.random.default_rng(seed)
    if balance:
        chosen = []
        for lab in (1, 0):
            group = [e for e in pool if e.label == lab]
            if len(group) < n_per_class:
                raise InsufficientEntriesError(
                    f"label {lab}: {len(group)} entries available, {n_per_class} requested"
                )
            idx = rng.choice(len(group), size=n_per_class, replace=False)
            chosen.extend(group[i] for i in idx)
    else:
        chosen = [pool[i] for i in rng.permutation(len(pool))]
    if split is not None:
        chosen = [replace(e, split=split) for e in chosen]
    if augment_dir is not None:
        out_dir = Path(augment_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = [a for e in chosen if e.label == 1 for a in _augment_entry(e, out_dir)]
        chosen = chosen + extra
    return DatasetManifest(chosen)


# --------------------------------------------------------------------------
# experiments


def evaluate_classifier(clf: ToyClassifier, data) -> tuple[MetricReport, RocCurve | None]:
    scores = [clf.predict_proba(p) for p, _ in data]
    labels = [y for _, y in data]
    cm = ConfusionMatrix.from_predictions(labels, [int(s >= 0.5) for s in scores])
    roc = roc_curve(scores, labels) if 0 < sum(labels) < len(labels) else None
    return compute_metrics(cm), roc


def load_manifest_patches(m: DatasetManifest) -> list[tuple[np.ndarray, int]]:
    m.validate()
    out = []
    for e in m.entries:
        v = read_volume(e.path)
        if v.kind not in ("normalized", "mask"):
            raise ValueError(f"{e.path}: expected a normalized patch, got {v.kind}")
        out.append((np.asarray(v.data, dtype=np.float64), e.label))
    return out


@dataclass
class ExperimentReport:
    base: MetricReport
    augmented: MetricReport
    base_roc: Optional[RocCurve]
    augmented_roc: Optional[RocCurve]
    n_base: int
    n_extra: int
    warnings: list = field(default_factory=list)

    @property
    def deltas(self) -> dict:
        """Absolute-point differences, augmented minus base."""
        return {
            k: getattr(self.augmented, k) - getattr(self.base, k)
            for k in ("precision", "recall", "accuracy", "f1")
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["dataset", "n_train", "precision", "recall", "accuracy", "f1"])
            for name, n, r in (
                ("base", self.n_base, self.base),
                ("base+extra", self.n_base + self.n_extra, self.augmented),
            ):
                w.writerow([name, n, *(f"{getattr(r, k):.4f}" for k in ("precision", "recall", "accuracy", "f1"))])
            d = self.deltas
            w.writerow(["delta", self.n_extra, *(f"{d[k]:+.4f}" for k in ("precision", "recall", "accuracy", "f1"))])


def run_augmentation_experiment(
    base: DatasetManifest,
    extra: DatasetManifest,
    cfg: ToyClassifier,
    test: Optional[DatasetManifest] = None,
    epochs: int = 30,
    with_embedding: bool = True,
) -> ExperimentReport:
    """Train on ``base`` and on ``base + extra`` with the same seed; compare on ``test``.

    Train data are the ``train`` entries of each manifest. When ``test`` is
    omitted the ``test`` entries of ``base`` are used, falling back to the
    training data itself.
    """
    base_train = base.by_split("train")
    extra_train = extra.by_split("train")
    if test is None:
        test = base.by_split("test")
        if not len(test):
            test = base_train
    notes = []
    base_paths = {e.path for e in base_train}
    dupes = sum(e.path in base_paths for e in extra_train)
    if dupes:
        msg = f"{dupes} of {len(extra_train)} extra entries duplicate base entries"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    base_data = load_manifest_patches(base_train)
    extra_data = load_manifest_patches(extra_train)
    test_data = load_manifest_patches(test)
    clf_base, _ = train_toy(base_data, cfg, epochs, with_embedding)
    clf_aug, _ = train_toy(base_data + extra_data, cfg, epochs, with_embedding)
    rep_base, roc_base = evaluate_classifier(clf_base, test_data)
    rep_aug, roc_aug = evaluate_classifier(clf_aug, test_data)
    return ExperimentReport(rep_base, rep_aug, roc_base, roc_aug, len(base_data), len(extra_data), notes)


# --------------------------------------------------------------------------
# report tables


def write_metric_tables(reports: dict, path) -> None:
    """Confusion matrix plus true-class, false-class and macro-average rows per method."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "table", "tp", "fn", "fp", "tn", "precision", "recall", "accuracy", "f1"])
        for method, r in reports.items():
            cm = r.confusion
            w.writerow([method, "confusion", cm.tp, cm.fn, cm.fp, cm.tn, "", "", "", ""])
            for table, m in (("true_class", r.per_class[1]), ("false_class", r.per_class[0]), ("average", r.macro_avg)):
                w.writerow([method, table, "", "", "", "", *(f"{x:.3f}" for x in (m.precision, m.recall, m.accuracy, m.f1))])


def write_roc(roc: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows(roc.points)


def format_report(r: MetricReport) -> str:
    lines = [f"confusion: tp={r.confusion.tp} fn={r.confusion.fn} fp={r.confusion.fp} tn={r.confusion.tn}"]
    for name, m in (("true class", r.per_class[1]), ("false class", r.per_class[0]), ("average", r.macro_avg)):
        lines.append(
            f"{name:<12} precision={m.precision:.3f} recall={m.recall:.3f} "
            f"accuracy={m.accuracy:.3f} f1={m.f1:.3f}"
        )
    return "\n".join(lines)
