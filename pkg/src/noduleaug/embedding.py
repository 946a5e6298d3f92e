"""Pixel embedding: quantized intensity -> trainable M-vector, plus a toy classifier.

The classifier is ``embedding -> mean pool -> linear -> sigmoid`` trained by
plain per-sample SGD on the logistic loss. With the embedding disabled it
sees a single feature, the patch mean intensity.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .nodule_model import quantize
from .volume_io import Volume

DEFAULT_BINS = 256
DEFAULT_DIM = 8
DEFAULT_INIT_SCALE = 0.05
DEFAULT_LR = 0.1


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class EmbeddingTable:
    weights: np.ndarray  # (bins, dim)
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ValueError(f"weights must be a non-empty (bins, dim) matrix, got {self.weights.shape}")
        if not np.isfinite(self.weights).all():
            raise ValueError("embedding weights must be finite")

    @classmethod
    def init(cls, bins=DEFAULT_BINS, dim=DEFAULT_DIM, init_scale=DEFAULT_INIT_SCALE, seed=0):
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-init_scale, init_scale, size=(bins, dim)), init_scale)

    @property
    def bins(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class EmbeddedPatch:
    data: np.ndarray  # side³ x M
    source_bins: np.ndarray  # side³


def _patch_array(patch) -> np.ndarray:
    if isinstance(patch, Volume):
        if patch.kind not in ("normalized", "mask"):
            raise ValueError(f"patch must be normalized, got {patch.kind}")
        return patch.data
    return np.asarray(patch, dtype=np.float64)


def embed_forward(t: EmbeddingTable, patch) -> EmbeddedPatch:
    """Look up ``t.weights[bin]`` for every voxel; no arithmetic on intensities."""
    bins = quantize(_patch_array(patch), t.bins)
    return EmbeddedPatch(data=t.weights[bins], source_bins=bins)


def embed_backward(t: EmbeddingTable, patch, upstream_grad) -> np.ndarray:
    """Gradient w.r.t. the table: row ``b`` sums the upstream grads of voxels in bin ``b``."""
    bins = quantize(_patch_array(patch), t.bins)
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != bins.shape + (t.dim,):
        raise ValueError(f"upstream gradient shape {g.shape} != {bins.shape + (t.dim,)}")
    return _scatter_rows(bins.ravel(), g.reshape(-1, t.dim), t.bins)


def _scatter_rows(bins: np.ndarray, rows: np.ndarray, n_bins: int) -> np.ndarray:
    grad = np.zeros((n_bins, rows.shape[1]))
    np.add.at(grad, bins, rows)  # sequential, so summation order is fixed
    return grad


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "gaussian"  # or "salt_pepper"
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "salt_pepper"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.magnitude >= 0:
            raise ValueError("noise magnitude must be >= 0")
        if self.kind == "salt_pepper" and self.magnitude > 1:
            raise ValueError("salt_pepper magnitude is a voxel fraction in [0, 1]")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseSpec":
        """``"gaussian:0.1"`` or ``"salt_pepper:0.05"``."""
        kind, _, mag = text.partition(":")
        return cls(kind.strip(), float(mag or 0.0), seed)


def add_noise(patch, spec: NoiseSpec):
    """Seeded gaussian (clipped to [0, 1]) or salt-and-pepper noise.

    Returns the same type it was given (Volume or array).
    """
    data = np.asarray(_patch_array(patch), dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian":
        out = np.clip(data + rng.normal(0.0, spec.magnitude, size=data.shape), 0.0, 1.0)
    else:
        out = data.copy().ravel()
        k = int(round(spec.magnitude * out.size))
        hit = rng.choice(out.size, size=k, replace=False)
        out[hit] = rng.integers(0, 2, size=k)
        out = out.reshape(data.shape)
    if isinstance(patch, Volume):
        return patch.replace(out, kind="normalized")
    return out


# --------------------------------------------------------------------------
# toy classifier


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(eq=False)
class ToyClassifier:
    """embedding -> mean pool -> linear(M -> 1) -> sigmoid."""

    embedding: EmbeddingTable = field(default_factory=EmbeddingTable.init)
    weight: Optional[np.ndarray] = None
    bias: float = 0.0
    lr: float = DEFAULT_LR
    seed: int = 0
    pool: str = "mean"
    with_embedding: bool = True

    def __post_init__(self):
        if self.pool != "mean":
            raise ValueError("only mean pooling is supported")
        if self.weight is None:
            # fan-in scale; a tiny head would stall behind the tiny table
            rng = np.random.default_rng([self.seed, 1])
            s = 1.0 / math.sqrt(self.embedding.dim)
            self.weight = rng.uniform(-s, s, size=self.embedding.dim)
        self.weight = np.asarray(self.weight, dtype=np.float64)

    @classmethod
    def create(cls, bins=DEFAULT_BINS, dim=DEFAULT_DIM, init_scale=DEFAULT_INIT_SCALE, lr=DEFAULT_LR, seed=0):
        return cls(EmbeddingTable.init(bins, dim, init_scale, seed), lr=lr, seed=seed)

    def features(self, patch) -> np.ndarray:
        data = _patch_array(patch)
        if self.with_embedding:
            return embed_forward(self.embedding, data).data.reshape(-1, self.embedding.dim).mean(axis=0)
        return np.array([float(data.mean())])

    def decision(self, patch) -> float:
        f = self.features(patch)
        return float(f @ self.weight[: len(f)]) + self.bias

    def predict_proba(self, patch) -> float:
        return _sigmoid(self.decision(patch))

    def predict(self, patch) -> int:
        return int(self.predict_proba(patch) >= 0.5)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_acc: Optional[float] = None


def _logistic_loss(z: float, y: int) -> float:
    # log(1 + exp(-z)) for y=1, log(1 + exp(z)) for y=0, overflow-safe
    s = z if y == 0 else -z
    return max(s, 0.0) + math.log1p(math.exp(-abs(s)))


def _prepare(data, n_bins):
    arrays, labels = [], []
    for patch, label in data:
        if label not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got {label!r}")
        arrays.append(np.asarray(_patch_array(patch), dtype=np.float64))
        labels.append(int(label))
    bins = [quantize(a, n_bins).ravel() for a in arrays]
    return arrays, bins, labels


def _accuracy(clf: ToyClassifier, arrays, labels) -> float:
    if not arrays:
        return float("nan")
    return float(np.mean([clf.predict(a) == y for a, y in zip(arrays, labels)]))


def train_toy(
    train: Sequence[Tuple[object, int]],
    cfg: ToyClassifier,
    epochs: int,
    with_embedding: bool = True,
    test: Sequence[Tuple[object, int]] = (),
) -> Tuple[ToyClassifier, list[EpochStats]]:
    """Per-sample SGD on the logistic loss; returns a trained copy of ``cfg``.

    Visiting order is reshuffled each epoch from ``cfg.seed`` so two runs
    with the same seed and data give identical curves. With
    ``with_embedding=False`` the table is never touched and the single
    feature is the patch mean.
    """
    if not len(train):
        raise ValueError("training set is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    clf = copy.deepcopy(cfg)
    clf.with_embedding = with_embedding
    arrays, bins, labels = _prepare(train, clf.embedding.bins)
    test_arrays, _, test_labels = _prepare(test, clf.embedding.bins)
    rng = np.random.default_rng([clf.seed, 2])
    W = clf.embedding.weights
    dim = clf.embedding.dim
    curves: list[EpochStats] = []

    for epoch in range(1, epochs + 1):
        total = 0.0
        for i in rng.permutation(len(arrays)):
            y = labels[i]
            if with_embedding:
                b = bins[i]
                f = W[b].mean(axis=0)
                z = float(f @ clf.weight) + clf.bias
            else:
                f = np.array([arrays[i].mean()])
                z = float(f[0] * clf.weight[0]) + clf.bias
            loss = _logistic_loss(z, y)
            if not math.isfinite(loss) or not math.isfinite(z):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total += loss
            dz = _sigmoid(z) - y
            if with_embedding:
                # d loss / d f = dz * w; mean pool spreads it evenly over voxels
                upstream = np.broadcast_to(dz * clf.weight / len(b), (len(b), dim))
                W -= clf.lr * _scatter_rows(b, upstream, clf.embedding.bins)
                clf.weight = clf.weight - clf.lr * dz * f
            else:
                clf.weight[0] -= clf.lr * dz * f[0]
            clf.bias -= clf.lr * dz
        mean_loss = total / len(arrays)
        if not math.isfinite(mean_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        curves.append(
            EpochStats(
                epoch=epoch,
                loss=mean_loss,
                train_acc=_accuracy(clf, arrays, labels),
                test_acc=_accuracy(clf, test_arrays, test_labels) if test_arrays else None,
            )
        )
    return clf, curves
