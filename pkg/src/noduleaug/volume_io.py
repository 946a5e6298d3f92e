"""Volume container, MetaImage (.mhd/.raw) I/O, annotation tables and masks.

Arrays are indexed ``(z, y, x)``. MetaImage headers and the annotation CSVs
list axes in ``(x, y, z)`` order; the conversion happens at parse time.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

KINDS = ("raw_ct", "normalized", "mask")

# MetaImage element type -> little-endian numpy dtype
ELEMENT_TYPES = {
    "MET_CHAR": "i1",
    "MET_UCHAR": "u1",
    "MET_SHORT": "<i2",
    "MET_USHORT": "<u2",
    "MET_INT": "<i4",
    "MET_UINT": "<u4",
    "MET_LONG": "<i8",
    "MET_ULONG": "<u8",
    "MET_FLOAT": "<f4",
    "MET_DOUBLE": "<f8",
}
_DTYPE_TO_ELEMENT = {np.dtype(v).newbyteorder("<"): k for k, v in ELEMENT_TYPES.items()}

# header keys we understand; anything else triggers a warning
_KNOWN_KEYS = {
    "ObjectType",
    "NDims",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
    "TransformMatrix",
    "Offset",
    "Position",
    "Origin",
    "CenterOfRotation",
    "AnatomicalOrientation",
    "ElementSpacing",
    "DimSize",
    "ElementType",
    "ElementDataFile",
    "VolumeKind",
}

Triple = Tuple[float, float, float]


class VolumeIOError(ValueError):
    """Base class for volume and annotation read errors."""


class MissingRawFileError(VolumeIOError, FileNotFoundError):
    pass


class SizeMismatchError(VolumeIOError):
    pass


class UnsupportedElementTypeError(VolumeIOError):
    pass


class HeaderError(VolumeIOError):
    pass


class AnnotationFormatError(VolumeIOError):
    pass


class OutOfBoundsError(IndexError):
    pass


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with spacing/origin in ``(z, y, x)`` order (mm)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    kind: str = "raw_ct"

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin must have three components")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        if self.kind == "mask" and not np.isin(data, (0, 1)).all():
            raise ValueError("mask volume values must be 0 or 1")
        if self.kind == "normalized" and data.size and (data.min() < 0 or data.max() > 1):
            raise ValueError("normalized volume values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def replace(self, data=None, **changes) -> "Volume":
        """Copy of this volume with new data and/or metadata."""
        fields = dict(spacing=self.spacing, origin=self.origin, kind=self.kind)
        fields.update(changes)
        return Volume(self.data if data is None else data, **fields)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class Annotation:
    """One nodule record. ``center_world`` is in ``(x, y, z)`` mm as in the CSV."""

    series_id: str
    center_world: Triple
    diameter: Optional[float] = None
    label: Optional[str] = None  # "nodule" | "non_nodule"

    def __post_init__(self):
        if not self.series_id:
            raise ValueError("series_id must be non-empty")
        if self.diameter is not None and not self.diameter > 0:
            raise ValueError(f"diameter must be positive, got {self.diameter}")
        if self.label not in (None, "nodule", "non_nodule"):
            raise ValueError(f"unknown label {self.label!r}")
        object.__setattr__(self, "center_world", tuple(float(c) for c in self.center_world))

    @property
    def center_zyx(self) -> Triple:
        x, y, z = self.center_world
        return (z, y, x)


# --------------------------------------------------------------------------
# MetaImage I/O


def _parse_header(path: Path) -> dict:
    header = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise HeaderError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    return header


def _floats(header: dict, key: str, default=None) -> Tuple[float, ...]:
    if key not in header:
        if default is None:
            raise HeaderError(f"header is missing {key}")
        return default
    try:
        return tuple(float(v) for v in header[key].split())
    except ValueError:
        raise HeaderError(f"non-numeric {key}: {header[key]!r}") from None


def read_volume(path) -> Volume:
    """Read a MetaImage header + raw payload pair.

    The returned volume is ``raw_ct`` unless the header carries a
    ``VolumeKind`` entry (written by :func:`write_volume`). Stored element
    type is kept so a write/read cycle is bit-exact.
    """
    path = Path(path)
    header = _parse_header(path)
    for key in header:
        if key not in _KNOWN_KEYS:
            warnings.warn(f"{path.name}: ignoring unsupported header field {key!r}", stacklevel=2)

    ndims = int(header.get("NDims", 3))
    if ndims != 3:
        raise HeaderError(f"only 3D volumes are supported, NDims={ndims}")
    if header.get("CompressedData", "False").lower() == "true":
        raise HeaderError("compressed payloads are not supported")

    dims = tuple(int(d) for d in _floats(header, "DimSize"))
    spacing = _floats(header, "ElementSpacing", default=(1.0, 1.0, 1.0))
    offset_key = next((k for k in ("Offset", "Origin", "Position") if k in header), None)
    offset = _floats(header, offset_key) if offset_key else (0.0, 0.0, 0.0)
    if len(dims) != 3 or len(spacing) != 3 or len(offset) != 3:
        raise HeaderError("DimSize, ElementSpacing and Offset need three components")

    etype = header.get("ElementType")
    if etype not in ELEMENT_TYPES:
        raise UnsupportedElementTypeError(f"unsupported ElementType {etype!r}")
    dtype = np.dtype(ELEMENT_TYPES[etype])
    msb = header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False"))
    if msb.lower() == "true":
        dtype = dtype.newbyteorder(">")

    data_file = header.get("ElementDataFile")
    if not data_file:
        raise HeaderError("header is missing ElementDataFile")
    raw_path = path.parent / data_file
    if not raw_path.is_file():
        raise MissingRawFileError(f"raw payload {raw_path} not found")
    payload = raw_path.read_bytes()
    nx, ny, nz = dims
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise SizeMismatchError(
            f"{raw_path.name}: {len(payload)} bytes, header implies {expected} "
            f"({nx}x{ny}x{nz} x {dtype.itemsize})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    data = data.astype(dtype.newbyteorder("<"))

    kind = header.get("VolumeKind", "raw_ct")
    return Volume(data, spacing=spacing[::-1], origin=offset[::-1], kind=kind)


def write_volume(v: Volume, path) -> None:
    """Write ``v`` as ``<stem>.mhd`` + ``<stem>.raw`` next to ``path``."""
    path = Path(path)
    if path.suffix != ".mhd":
        path = path.with_suffix(".mhd")
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = v.data.dtype.newbyteorder("<")
    try:
        etype = _DTYPE_TO_ELEMENT[dtype]
    except KeyError:
        if v.data.dtype == np.bool_:
            dtype, etype = np.dtype("u1"), "MET_UCHAR"
        else:
            raise UnsupportedElementTypeError(f"cannot store dtype {v.data.dtype}") from None
    raw_path = path.with_suffix(".raw")
    nz, ny, nx = v.shape

    def fmt(values):
        return " ".join(repr(float(x)) for x in values)

    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = 1 0 0 0 1 0 0 0 1",
        f"Offset = {fmt(v.origin[::-1])}",
        f"ElementSpacing = {fmt(v.spacing[::-1])}",
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {etype}",
        f"VolumeKind = {v.kind}",
        f"ElementDataFile = {raw_path.name}",
    ]
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype=dtype).tobytes())
    path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# annotation tables

_ANNOTATION_COLUMNS = {
    "annotations": ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"),
    "candidates": ("seriesuid", "coordX", "coordY", "coordZ", "class"),
}


def read_annotations(path, kind: str = "annotations") -> list[Annotation]:
    """Parse an ``annotations.csv`` or ``candidates.csv`` table."""
    if kind not in _ANNOTATION_COLUMNS:
        raise ValueError(f"kind must be 'annotations' or 'candidates', got {kind!r}")
    columns = _ANNOTATION_COLUMNS[kind]
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if tuple(h.strip() for h in header) != columns:
            raise AnnotationFormatError(f"row 1: expected header {','.join(columns)}")
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(columns):
                raise AnnotationFormatError(
                    f"row {rowno}: expected {len(columns)} columns, got {len(row)}"
                )
            try:
                center = tuple(float(c) for c in row[1:4])
                last = float(row[4])
            except ValueError:
                raise AnnotationFormatError(f"row {rowno}: non-numeric value in {row!r}") from None
            try:
                if kind == "annotations":
                    ann = Annotation(row[0].strip(), center, diameter=last)
                else:
                    if last not in (0.0, 1.0):
                        raise ValueError(f"class must be 0 or 1, got {row[4]!r}")
                    ann = Annotation(row[0].strip(), center, label="nodule" if last else "non_nodule")
            except ValueError as exc:
                raise AnnotationFormatError(f"row {rowno}: {exc}") from None
            out.append(ann)
    return out


# --------------------------------------------------------------------------
# coordinate frames


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def world_to_voxel(v: Volume, p: Sequence[float]) -> Tuple[int, int, int]:
    """World point ``(z, y, x)`` mm -> voxel index, rounding half away from zero."""
    rel = (np.asarray(p, dtype=float) - np.asarray(v.origin)) / np.asarray(v.spacing)
    idx = _round_half_away(rel).astype(int)
    if np.any(idx < 0) or np.any(idx >= np.asarray(v.shape)):
        raise OutOfBoundsError(f"world point {tuple(p)} maps to {tuple(idx)}, outside grid {v.shape}")
    return tuple(int(i) for i in idx)


def voxel_to_world(v: Volume, i: Sequence[int]) -> Triple:
    idx = np.asarray(i)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= np.asarray(v.shape)):
        raise OutOfBoundsError(f"voxel index {tuple(i)} outside grid {v.shape}")
    return tuple(float(o + k * s) for o, k, s in zip(v.origin, idx, v.spacing))


def make_mask(v: Volume, ann: Annotation) -> Volume:
    """Spherical mask: voxels whose centre lies within ``diameter / 2`` of the nodule centre.

    Combine several annotations with ``np.maximum`` / logical OR of the
    returned data.
    """
    if ann.diameter is None:
        raise ValueError("annotation has no diameter")
    center = np.asarray(ann.center_zyx)
    world_to_voxel(v, center)  # bounds check
    radius = ann.diameter / 2.0
    spacing = np.asarray(v.spacing)
    origin = np.asarray(v.origin)
    lo = np.maximum(np.floor((center - radius - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((center + radius - origin) / spacing).astype(int) + 1, v.shape)

    out = np.zeros(v.shape, dtype=np.uint8)
    axes = [origin[a] + np.arange(lo[a], hi[a]) * spacing[a] - center[a] for a in range(3)]
    dz, dy, dx = np.meshgrid(*axes, indexing="ij")
    inside = dz**2 + dy**2 + dx**2 <= radius**2
    out[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = inside
    return Volume(out, spacing=v.spacing, origin=v.origin, kind="mask")
