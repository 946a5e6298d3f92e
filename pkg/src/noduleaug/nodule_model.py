"""Per-voxel gray-value statistics model of aligned nodule cubes.

Every voxel of a ``side``³ cube gets its own categorical distribution over
quantized gray levels, estimated by counting how often each level occurs at
that voxel across aligned real nodules: ``P(bin i at v) = n_i / sum(n)``.
New nodules are drawn voxel by voxel from those distributions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import Volume

DEFAULT_BINS = 256
BACKGROUND = 0.0

MODEL_MAGIC = b"NDSM"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sHIIIQ")  # magic, version, side, bins, n_cubes, n_voxels
_VOXEL = struct.Struct("<II")  # flat index, n entries
_ENTRY = np.dtype([("bin", "<u4"), ("count", "<u8")])

Index = Tuple[int, int, int]


class ModelFormatError(ValueError):
    """Corrupt or truncated model payload."""


class ModelVersionError(ModelFormatError):
    pass


def quantize(data, bins: int) -> np.ndarray:
    """Equal-width binning of [0, 1] intensities into ``bins`` levels (1.0 -> last bin)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    q = np.floor(np.asarray(data, dtype=np.float64) * bins).astype(np.int64)
    return np.clip(q, 0, bins - 1)


def bin_midpoint(b, bins: int):
    return (np.asarray(b, dtype=np.float64) + 0.5) / bins


# --------------------------------------------------------------------------
# segmentation and alignment


def segment_foreground(cube: Volume, threshold: float) -> Volume:
    """Threshold and keep the largest 6-connected component."""
    if cube.kind != "normalized":
        raise ValueError(f"segment_foreground expects a normalized volume, got {cube.kind}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    fg = cube.data >= threshold
    labels, n = ndimage.label(fg)  # default structure is 6-connectivity
    mask = np.zeros(cube.shape, dtype=np.uint8)
    if n:
        sizes = np.bincount(labels.ravel())[1:]
        # argmax picks the lowest label among equal sizes
        mask[labels == int(np.argmax(sizes)) + 1] = 1
    return cube.replace(mask, kind="mask")


@dataclass(frozen=True, eq=False)
class AlignedCube:
    """Nodule cube shifted so its foreground centroid sits at the cube centre."""

    data: np.ndarray
    support: np.ndarray  # foreground flags after the same shift
    side: int

    @property
    def center(self) -> Index:
        c = (self.side - 1) // 2
        return (c, c, c)

    def __eq__(self, other):
        if not isinstance(other, AlignedCube):
            return NotImplemented
        return (
            self.side == other.side
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.support, other.support)
        )

    __hash__ = None


def _shift(a: np.ndarray, offset: Sequence[int], fill) -> np.ndarray:
    out = np.full_like(a, fill)
    src, dst = [], []
    for n, d in zip(a.shape, offset):
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def weighted_centroid(data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    idx = np.argwhere(mask)
    w = data[mask.astype(bool)].astype(np.float64)
    if w.sum() <= 0:  # all-black foreground: fall back to the geometric centroid
        w = np.ones(len(idx))
    return (idx * w[:, None]).sum(axis=0) / w.sum()


def align_cube(cube: Volume, mask: Volume) -> AlignedCube:
    """Translate ``cube`` so the rounded intensity-weighted foreground centroid is centred.

    Voxels shifted in from outside take the cube minimum (air).
    """
    side = cube.shape[0]
    if cube.shape != (side,) * 3 or side % 2 == 0:
        raise ValueError(f"cube must be an odd-sided cube, got shape {cube.shape}")
    if mask.shape != cube.shape:
        raise ValueError("mask and cube shapes differ")
    m = mask.data.astype(bool)
    if not m.any():
        raise ValueError("empty foreground mask, nothing to align")
    centroid = weighted_centroid(cube.data, m)
    rounded = np.sign(centroid) * np.floor(np.abs(centroid) + 0.5)
    offset = (side - 1) // 2 - rounded.astype(int)
    data = _shift(np.asarray(cube.data, dtype=np.float64), offset, float(cube.data.min()))
    support = _shift(m.astype(np.uint8), offset, 0)
    data.setflags(write=False)
    support.setflags(write=False)
    return AlignedCube(data=data, support=support, side=side)


# --------------------------------------------------------------------------
# the statistics model


class NoduleStatsModel:
    """Sparse per-voxel gray-level counts in CSR layout.

    ``voxels`` holds the flat indices (ascending) of populated voxels; the
    entries of voxel ``k`` are ``gray[indptr[k]:indptr[k+1]]`` (ascending
    bins) with matching ``count``.
    """

    def __init__(self, side: int, bins: int, n_cubes: int, voxels, indptr, gray, count):
        if side < 1:
            raise ValueError("side must be positive")
        if bins < 2:
            raise ValueError("bins must be >= 2")
        self.side = int(side)
        self.bins = int(bins)
        self.n_cubes = int(n_cubes)
        self.voxels = np.asarray(voxels, dtype=np.int64)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.gray = np.asarray(gray, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        if len(self.indptr) != len(self.voxels) + 1 or self.indptr[-1] != len(self.gray):
            raise ValueError("inconsistent sparse layout")
        if len(self.voxels) and (self.voxels.min() < 0 or self.voxels.max() >= self.side**3):
            raise ValueError("voxel index outside the cube")
        if len(self.gray) and (self.gray.min() < 0 or self.gray.max() >= self.bins):
            raise ValueError("gray bin outside [0, bins)")
        if np.any(self.count <= 0):
            raise ValueError("counts must be positive")
        self._cdf = None

    # construction -------------------------------------------------------

    @classmethod
    def from_counts(
        cls, side: int, bins: int, counts: Mapping[Index, Mapping[int, int]], n_cubes: int | None = None
    ) -> "NoduleStatsModel":
        """Build from ``{(iz, iy, ix): {bin: n}}``; zero counts are dropped."""
        shape = (side,) * 3
        rows = []
        for index, table in counts.items():
            flat = int(np.ravel_multi_index(tuple(index), shape))
            items = sorted((int(b), int(n)) for b, n in table.items() if n)
            if items:
                rows.append((flat, items))
        rows.sort()
        voxels = [r[0] for r in rows]
        indptr = np.cumsum([0] + [len(r[1]) for r in rows])
        gray = [b for _, items in rows for b, _ in items]
        count = [n for _, items in rows for _, n in items]
        if n_cubes is None:
            n_cubes = max((sum(n for _, n in items) for _, items in rows), default=0)
        return cls(side, bins, n_cubes, voxels, indptr, gray, count)

    @classmethod
    def empty(cls, side: int, bins: int = DEFAULT_BINS) -> "NoduleStatsModel":
        return cls(side, bins, 0, [], [0], [], [])

    @classmethod
    def _from_dense(cls, side, bins, n_cubes, flat, bin_ids) -> "NoduleStatsModel":
        # flat/bin_ids: one row per (voxel, occurrence)
        if len(flat) == 0:
            return cls(side, bins, n_cubes, [], [0], [], [])
        key = np.asarray(flat, dtype=np.int64) * bins + np.asarray(bin_ids, dtype=np.int64)
        uniq, count = np.unique(key, return_counts=True)
        vox, gray = np.divmod(uniq, bins)
        voxels, starts = np.unique(vox, return_index=True)
        indptr = np.append(starts, len(uniq))
        return cls(side, bins, n_cubes, voxels, indptr, gray, count)

    def merge(self, other: "NoduleStatsModel") -> "NoduleStatsModel":
        """Count-wise sum of two partial models (same side and bins)."""
        if (self.side, self.bins) != (other.side, other.bins):
            raise ValueError("cannot merge models with different side or bins")
        flat = np.concatenate([np.repeat(m._expand_voxels(), m.count) for m in (self, other)])
        gray = np.concatenate([np.repeat(m.gray, m.count) for m in (self, other)])
        return NoduleStatsModel._from_dense(
            self.side, self.bins, self.n_cubes + other.n_cubes, flat, gray
        )

    def _expand_voxels(self) -> np.ndarray:
        return np.repeat(self.voxels, np.diff(self.indptr))

    # queries ------------------------------------------------------------

    @property
    def total(self) -> Dict[Index, int]:
        sums = np.add.reduceat(self.count, self.indptr[:-1]) if len(self.voxels) else []
        return {self._unravel(v): int(t) for v, t in zip(self.voxels, sums)}

    @property
    def counts(self) -> Dict[Index, Dict[int, int]]:
        out = {}
        for k, v in enumerate(self.voxels):
            a, b = self.indptr[k], self.indptr[k + 1]
            out[self._unravel(v)] = {int(g): int(n) for g, n in zip(self.gray[a:b], self.count[a:b])}
        return out

    def probabilities(self, index: Index) -> Dict[int, float]:
        """Categorical distribution at ``index`` (empty for unpopulated voxels)."""
        flat = int(np.ravel_multi_index(tuple(index), (self.side,) * 3))
        k = np.searchsorted(self.voxels, flat)
        if k == len(self.voxels) or self.voxels[k] != flat:
            return {}
        a, b = self.indptr[k], self.indptr[k + 1]
        n = self.count[a:b]
        return {int(g): float(c) / float(n.sum()) for g, c in zip(self.gray[a:b], n)}

    def populated_mask(self) -> np.ndarray:
        m = np.zeros(self.side**3, dtype=np.uint8)
        m[self.voxels] = 1
        return m.reshape((self.side,) * 3)

    @property
    def n_populated(self) -> int:
        return len(self.voxels)

    def _unravel(self, flat) -> Index:
        return tuple(int(i) for i in np.unravel_index(int(flat), (self.side,) * 3))

    def __eq__(self, other):
        if not isinstance(other, NoduleStatsModel):
            return NotImplemented
        return (
            (self.side, self.bins, self.n_cubes) == (other.side, other.bins, other.n_cubes)
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.gray, other.gray)
            and np.array_equal(self.count, other.count)
        )

    __hash__ = None

    def __repr__(self):
        return (
            f"NoduleStatsModel(side={self.side}, bins={self.bins}, n_cubes={self.n_cubes}, "
            f"populated={self.n_populated})"
        )


def build_model(cubes: Sequence[AlignedCube], bins: int = DEFAULT_BINS) -> NoduleStatsModel:
    """Count quantized gray levels per voxel over the supported voxels of every cube."""
    cubes = list(cubes)
    if not cubes:
        raise ValueError("no cubes to build a model from")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    side = cubes[0].side
    if any(c.side != side for c in cubes):
        raise ValueError("all cubes must share the same side")
    flat, gray = [], []
    for c in cubes:
        sel = np.flatnonzero(c.support.ravel())
        flat.append(sel)
        gray.append(quantize(c.data.ravel()[sel], bins))
    return NoduleStatsModel._from_dense(side, bins, len(cubes), np.concatenate(flat), np.concatenate(gray))


# --------------------------------------------------------------------------
# sampling

_MASK64 = (1 << 64) - 1


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def voxel_uniforms(seed: int, flat_indices) -> np.ndarray:
    """Uniform [0, 1) draw per voxel from a substream keyed by ``(seed, voxel)``.

    Counter-based, so the draw of a voxel does not depend on which other
    voxels are sampled or in what order.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = _splitmix64(np.array([seed & _MASK64], dtype=np.uint64))
    with np.errstate(over="ignore"):
        h = _splitmix64(key ^ _splitmix64(np.asarray(flat_indices, dtype=np.uint64)))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True, eq=False)
class GeneratedNodule:
    cube: np.ndarray
    support_mask: np.ndarray
    seed: int

    @property
    def side(self) -> int:
        return self.cube.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GeneratedNodule):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.cube, other.cube)
            and np.array_equal(self.support_mask, other.support_mask)
        )

    __hash__ = None


def _sampling_tables(m: NoduleStatsModel):
    if m._cdf is None:
        cum = np.cumsum(m.count)
        base = np.concatenate([[0], cum])[m.indptr[:-1]]
        totals = cum[m.indptr[1:] - 1] - base
        # global cumulative counts; voxel k owns the half-open range [base_k, base_k + total_k)
        m._cdf = (cum, base, totals)
    return m._cdf


def sample_nodule(m: NoduleStatsModel, seed: int, min_support: float = 0.0) -> GeneratedNodule:
    """Draw one nodule: inverse-CDF sample of every sufficiently supported voxel.

    A voxel is populated when ``total / n_cubes >= min_support``. Drawn bins
    decode to their midpoint; everything else stays at background 0.
    """
    if m.n_populated == 0:
        raise ValueError("model is empty")
    if not 0.0 <= min_support <= 1.0:
        raise ValueError(f"min_support must lie in [0, 1], got {min_support}")
    cum, base, totals = _sampling_tables(m)
    keep = totals >= min_support * max(m.n_cubes, 1)
    voxels = m.voxels[keep]
    u = voxel_uniforms(seed, voxels)
    # integer draw r in [0, total); first entry whose cumulative count exceeds it
    r = np.minimum(np.floor(u * totals[keep]).astype(np.int64), totals[keep] - 1)
    entry = np.searchsorted(cum, base[keep] + r, side="right")
    cube = np.full(m.side**3, BACKGROUND)
    cube[voxels] = bin_midpoint(m.gray[entry], m.bins)
    support = np.zeros(m.side**3, dtype=np.uint8)
    support[voxels] = 1
    shape = (m.side,) * 3
    return GeneratedNodule(cube.reshape(shape), support.reshape(shape), int(seed))


# --------------------------------------------------------------------------
# serialization


def save_model(m: NoduleStatsModel) -> bytes:
    """Binary layout, little-endian.

    header: magic ``NDSM`` (4s), version (u16), side (u32), bins (u32),
    n_cubes (u32), n_voxels (u64); then per populated voxel a record
    ``flat_index (u32), n_entries (u32)`` followed by ``n_entries`` pairs
    ``bin (u32), count (u64)``. Flat index is ``(iz * side + iy) * side + ix``.
    """
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, m.side, m.bins, m.n_cubes, m.n_populated)]
    for k, flat in enumerate(m.voxels):
        a, b = m.indptr[k], m.indptr[k + 1]
        parts.append(_VOXEL.pack(int(flat), int(b - a)))
        entries = np.empty(b - a, dtype=_ENTRY)
        entries["bin"] = m.gray[a:b]
        entries["count"] = m.count[a:b]
        parts.append(entries.tobytes())
    return b"".join(parts)


def load_model(payload: bytes) -> NoduleStatsModel:
    if len(payload) < _HEADER.size:
        raise ModelFormatError("payload shorter than the model header")
    magic, version, side, bins, n_cubes, n_voxels = _HEADER.unpack_from(payload, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"model version {version} is not supported (expected {MODEL_VERSION})")
    pos = _HEADER.size
    voxels, indptr, gray, count = [], [0], [], []
    for _ in range(n_voxels):
        if pos + _VOXEL.size > len(payload):
            raise ModelFormatError("truncated voxel record")
        flat, n = _VOXEL.unpack_from(payload, pos)
        pos += _VOXEL.size
        end = pos + n * _ENTRY.itemsize
        if end > len(payload):
            raise ModelFormatError("truncated count entries")
        entries = np.frombuffer(payload[pos:end], dtype=_ENTRY)
        pos = end
        voxels.append(flat)
        indptr.append(indptr[-1] + n)
        gray.append(entries["bin"].astype(np.int64))
        count.append(entries["count"].astype(np.int64))
    if pos != len(payload):
        raise ModelFormatError(f"{len(payload) - pos} trailing bytes after the last record")
    try:
        return NoduleStatsModel(
            side,
            bins,
            n_cubes,
            voxels,
            indptr,
            np.concatenate(gray) if gray else [],
            np.concatenate(count) if count else [],
        )
    except ValueError as exc:
        raise ModelFormatError(f"corrupt model payload: {exc}") from None


def save_nodule(nodule: GeneratedNodule, path) -> None:
    np.savez(path, cube=nodule.cube, support_mask=nodule.support_mask, seed=nodule.seed)


def load_nodule(path) -> GeneratedNodule:
    with np.load(path) as f:
        return GeneratedNodule(f["cube"], f["support_mask"].astype(np.uint8), int(f["seed"]))


def cubes_from_volumes(cubes: Iterable[Volume], threshold: float) -> list[AlignedCube]:
    """Segment and align a batch of normalized nodule cubes."""
    return [align_cube(c, segment_foreground(c, threshold)) for c in cubes]
