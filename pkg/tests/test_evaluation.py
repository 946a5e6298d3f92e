import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noduleaug.embedding import ToyClassifier
from noduleaug.evaluation import (
    ConfusionMatrix,
    DatasetManifest,
    InsufficientEntriesError,
    ManifestEntry,
    assemble_dataset,
    compute_metrics,
    detection_accuracy,
    dice,
    roc_curve,
    run_augmentation_experiment,
    traditional_augmentations,
    write_metric_tables,
    write_roc,
)
from noduleaug.synthetic import bin_pattern_task
from noduleaug.volume_io import Volume, read_volume, write_volume


def mask(points, shape=(6, 6, 6)):
    m = np.zeros(shape, np.uint8)
    for p in points:
        m[p] = 1
    return Volume(m, kind="mask")


# detection accuracy ------------------------------------------------------------


def test_detection_perfect():
    truth = [mask([(1, 1, 1), (1, 1, 2)]), mask([(3, 3, 3)])]
    assert detection_accuracy(truth, truth) == 1.0


def test_detection_empty_predictions():
    truth = [mask([(1, 1, 1)]), mask([(3, 3, 3)])]
    assert detection_accuracy([mask([]), mask([])], truth) == 0.0


def test_detection_42_of_50():
    truth = [mask([(2, 2, 2), (2, 2, 3)]) for _ in range(50)]
    preds = [mask([(2, 2, 3)]) if k < 42 else mask([(5, 5, 5)]) for k in range(50)]
    assert detection_accuracy(preds, truth) == 42 / 50 == 0.84


def test_detection_ignores_empty_truth():
    truth = [mask([(1, 1, 1)]), mask([])]
    preds = [mask([(1, 1, 1)]), mask([(4, 4, 4)])]
    assert detection_accuracy(preds, truth) == 1.0


def test_detection_errors():
    with pytest.raises(ValueError):
        detection_accuracy([mask([])], [mask([])])
    with pytest.raises(ValueError):
        detection_accuracy([mask([(1, 1, 1)])], [mask([(1, 1, 1)], shape=(5, 5, 5))])
    with pytest.raises(ValueError):
        detection_accuracy([], [mask([(1, 1, 1)])])


def test_detection_symmetric_under_pair_relabelling():
    rng = np.random.default_rng(0)
    pairs = [(mask([tuple(rng.integers(0, 6, 3))]), mask([tuple(rng.integers(0, 6, 3)), (0, 0, 0)])) for _ in range(20)]
    order = rng.permutation(20)
    a = detection_accuracy([p for p, _ in pairs], [t for _, t in pairs])
    b = detection_accuracy([pairs[i][0] for i in order], [pairs[i][1] for i in order])
    assert a == b


def test_detection_ignores_values_outside_support():
    truth = np.zeros((4, 4, 4))
    truth[1, 1, 1] = 1
    pred = np.zeros((4, 4, 4))
    pred[1, 1, 1] = 0.3
    assert detection_accuracy([pred], [truth]) == 1.0


def test_dice():
    assert dice(mask([(1, 1, 1), (1, 1, 2)]), mask([(1, 1, 1)])) == pytest.approx(2 / 3)


# metrics ------------------------------------------------------------------------

WITHOUT = ConfusionMatrix(tp=42, tn=4, fp=46, fn=8)
WITH = ConfusionMatrix(tp=50, tn=40, fp=10, fn=0)


def test_metrics_without_embedding_row():
    r = compute_metrics(WITHOUT)
    assert r.precision == pytest.approx(42 / 88)
    assert r.recall == pytest.approx(0.84)
    assert r.accuracy == pytest.approx(0.46)
    assert r.f1 == pytest.approx(84 / 138)
    assert round(r.f1, 3) == 0.609


def test_metrics_with_embedding_row():
    r = compute_metrics(WITH)
    assert r.recall == 1.0 and r.accuracy == pytest.approx(0.9)
    assert round(r.f1, 3) == 0.909


def test_false_class_view():
    neg = compute_metrics(WITH).per_class[0]
    assert neg.precision == 1.0 and neg.recall == pytest.approx(0.8)
    assert round(neg.f1, 3) == 0.889


def test_macro_average_with_embedding():
    m = compute_metrics(WITH).macro_avg
    assert round(m.precision, 3) == 0.917
    assert m.recall == pytest.approx(0.9)
    assert round(m.f1, 3) == 0.899


def test_zero_division_flags():
    r = compute_metrics(ConfusionMatrix(tp=0, tn=5, fp=0, fn=3))
    assert r.precision == 0.0 and r.f1 == 0.0
    assert "precision" in r.undefined
    with pytest.raises(ValueError):
        compute_metrics(ConfusionMatrix(0, 0, 0, 0))


@settings(max_examples=100, deadline=None)
@given(*[st.integers(0, 200)] * 4)
def test_metrics_bounded_and_f1_is_harmonic_mean(tp, tn, fp, fn):
    if tp + tn + fp + fn == 0:
        return
    r = compute_metrics(ConfusionMatrix(tp, tn, fp, fn))
    for m in (r.per_class[0], r.per_class[1], r.macro_avg):
        for v in (m.precision, m.recall, m.accuracy, m.f1):
            assert 0 <= v <= 1
    if tp == 0:
        assert r.f1 == 0
    elif r.precision + r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert r.per_class[0].accuracy == r.per_class[1].accuracy


def test_from_predictions():
    cm = ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert cm == ConfusionMatrix(tp=2, tn=1, fp=1, fn=1)


def test_metric_tables_csv(tmp_path):
    write_metric_tables({"without": compute_metrics(WITHOUT), "with": compute_metrics(WITH)}, tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("method,table")
    assert "with,average,,,,,0.917,0.900,0.900,0.899" in rows


# ROC ---------------------------------------------------------------------------------


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_roc_perfect_and_reversed():
    assert roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_curve([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]).auc == 0.0


def test_roc_shape():
    r = roc_curve([0.3, 0.3, 0.7, 0.1, 0.5], [1, 0, 1, 0, 0])
    assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)
    fpr, tpr = zip(*r.points)
    assert list(fpr) == sorted(fpr) and list(tpr) == sorted(tpr)
    assert len(r.points) == 5  # origin + 4 distinct scores


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_roc_auc_equals_pair_counting(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.permutation(n) / n  # all distinct
    assert roc_curve(scores, labels).auc == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


def test_roc_ties_count_half():
    scores, labels = [0.5, 0.5, 0.5, 0.9], [1, 0, 0, 1]
    assert roc_curve(scores, labels).auc == pytest.approx(pair_count_auc(scores, labels))


def test_roc_single_class():
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.2], [1, 1])


def test_write_roc(tmp_path):
    write_roc(roc_curve([0.9, 0.1], [1, 0]), tmp_path / "roc.csv")
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "fpr,tpr"


# manifests ---------------------------------------------------------------------------


def synthetic_pool(n_pos, n_neg, prefix="p"):
    return DatasetManifest(
        [ManifestEntry(f"{prefix}{k}.mhd", None, 1) for k in range(n_pos)]
        + [ManifestEntry(f"{prefix}n{k}.mhd", None, 0) for k in range(n_neg)]
    )


def test_balance_50_from_649_7073():
    m = assemble_dataset([synthetic_pool(649, 7073)], balance=True, n_per_class=50, seed=0)
    assert m.label_counts() == {0: 50, 1: 50}
    assert len({e.path for e in m}) == 100


def test_insufficient_entries():
    with pytest.raises(InsufficientEntriesError):
        assemble_dataset([synthetic_pool(10, 100)], balance=True, n_per_class=50, seed=0)


def test_assemble_deterministic():
    pools = [synthetic_pool(40, 60, "a"), synthetic_pool(30, 10, "b")]
    a = assemble_dataset(pools, True, 20, seed=5)
    b = assemble_dataset(pools, True, 20, seed=5)
    assert a.entries == b.entries
    assert a.entries != assemble_dataset(pools, True, 20, seed=6).entries


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_balanced_counts_never_repeat(seed, n):
    m = assemble_dataset([synthetic_pool(35, 40)], True, n, seed=seed)
    assert m.label_counts() == {0: n, 1: n}
    assert len({e.path for e in m}) == 2 * n


def test_unbalanced_keeps_everything():
    m = assemble_dataset([synthetic_pool(3, 7)], balance=False, seed=1)
    assert len(m) == 10 and m.label_counts() == {0: 7, 1: 3}


def test_provenance_preserved_and_split_override():
    pool = DatasetManifest([ManifestEntry(f"g{k}", None, 1, "generated_stats") for k in range(5)])
    pool.entries += [ManifestEntry(f"n{k}", None, 0) for k in range(5)]
    m = assemble_dataset([pool], True, 3, seed=0, split="test")
    assert {e.provenance for e in m if e.label == 1} == {"generated_stats"}
    assert m.split == "test"


def test_manifest_file_round_trip(tmp_path):
    m = DatasetManifest(
        [
            ManifestEntry("/data/a b.mhd", "/data/a b_mask.mhd", 1, "real", "train"),
            ManifestEntry("/data/c.mhd", None, 0, "traditional_aug", "test"),
        ]
    )
    m.write(tmp_path / "m.tsv")
    text = (tmp_path / "m.tsv").read_text().splitlines()
    assert text[1] == "/data/c.mhd\t-\t0\ttraditional_aug\ttest"
    assert DatasetManifest.read(tmp_path / "m.tsv").entries == m.entries


def test_manifest_rejects_bad_rows(tmp_path):
    (tmp_path / "m.tsv").write_text("a.mhd\t-\t2\treal\ttrain\n")
    with pytest.raises(ValueError, match=":1"):
        DatasetManifest.read(tmp_path / "m.tsv")


def test_traditional_augmentations():
    x = np.arange(2 * 3 * 3).reshape(2, 3, 3)
    aug = dict(traditional_augmentations(x))
    assert sorted(aug) == ["flip0", "flip1", "flip2", "rot180", "rot270", "rot90"]
    np.testing.assert_array_equal(aug["flip0"], x[::-1])
    np.testing.assert_array_equal(aug["rot90"][0], np.rot90(x[0]))
    # rotations stay in the axial plane
    for k in ("rot90", "rot180", "rot270"):
        np.testing.assert_array_equal(np.sort(aug[k][1].ravel()), np.sort(x[1].ravel()))


def test_assemble_with_augmentation(tmp_path):
    entries = []
    for k in range(3):
        p = tmp_path / f"pos{k}.mhd"
        write_volume(Volume(np.random.default_rng(k).random((3, 3, 3)), kind="normalized"), p)
        mp = tmp_path / f"pos{k}_mask.mhd"
        write_volume(Volume(np.eye(3, dtype=np.uint8)[None].repeat(3, 0), kind="mask"), mp)
        entries.append(ManifestEntry(str(p), str(mp), 1))
        n = tmp_path / f"neg{k}.mhd"
        write_volume(Volume(np.zeros((3, 3, 3)), kind="normalized"), n)
        entries.append(ManifestEntry(str(n), None, 0))
    m = assemble_dataset([DatasetManifest(entries)], True, 2, seed=0, augment_dir=tmp_path / "aug")
    assert m.label_counts() == {0: 2, 1: 2 + 2 * 6}
    aug = [e for e in m if e.provenance == "traditional_aug"]
    assert len(aug) == 12
    m.validate()
    src = read_volume(aug[0].path.replace("_flip0", "").replace("/aug", ""))
    np.testing.assert_array_equal(read_volume(aug[0].path).data, src.data[::-1])


# experiments --------------------------------------------------------------------------


def write_patches(tmp_path, data, name, split="train", provenance="real"):
    entries = []
    for k, (x, y) in enumerate(data):
        p = tmp_path / f"{name}{k:03d}.mhd"
        write_volume(Volume(x, kind="normalized"), p)
        entries.append(ManifestEntry(str(p), None, y, provenance, split))
    return DatasetManifest(entries)


def test_experiment_empty_extra_identical(tmp_path):
    base = write_patches(tmp_path, bin_pattern_task(20, side=5, seed=0), "b")
    test = write_patches(tmp_path, bin_pattern_task(10, side=5, seed=1), "t", split="test")
    rep = run_augmentation_experiment(base, DatasetManifest(), ToyClassifier.create(bins=32), test, epochs=5)
    assert rep.base == rep.augmented
    assert all(v == 0 for v in rep.deltas.values())
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "dataset,n_train,precision,recall,accuracy,f1"


def test_experiment_duplicate_warning(tmp_path):
    base = write_patches(tmp_path, bin_pattern_task(10, side=5, seed=0), "b")
    with pytest.warns(UserWarning, match="duplicate"):
        rep = run_augmentation_experiment(base, base, ToyClassifier.create(bins=32), epochs=2)
    assert rep.warnings and rep.n_extra == 10


def test_experiment_label_noise_hurts(tmp_path):
    train = bin_pattern_task(40, side=5, seed=0)
    base = write_patches(tmp_path, train, "b")
    flipped = [(x, 1 - y) for x, y in bin_pattern_task(120, side=5, seed=3)]
    extra = write_patches(tmp_path, flipped, "x", provenance="generated_stats")
    test = write_patches(tmp_path, bin_pattern_task(40, side=5, seed=1), "t", split="test")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = run_augmentation_experiment(base, extra, ToyClassifier.create(seed=0), test, epochs=20)
    assert rep.base.accuracy > 0.9
    assert rep.deltas["accuracy"] < -0.2
