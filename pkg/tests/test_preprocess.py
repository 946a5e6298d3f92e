import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from noduleaug.preprocess import ResampleSpec, WindowSpec, extract_patch, resample, window_normalize
from noduleaug.volume_io import OutOfBoundsError, Volume, voxel_to_world


def ct(values, **kw):
    return Volume(np.asarray(values, dtype=np.int16).reshape(1, 1, -1), **kw)


def test_window_default_values():
    w = WindowSpec()
    assert (w.level, w.width) == (-680.0, 600.0)
    out = window_normalize(ct([-980, -380, -680, -2000, 500]), w)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 1.0, 0.5, 0.0, 1.0])
    assert out.kind == "normalized"


def test_window_constant_volume_at_level():
    out = window_normalize(Volume(np.full((3, 3, 3), -680, dtype=np.int16)))
    assert np.all(out.data == 0.5)


def test_window_requires_raw():
    with pytest.raises(ValueError):
        window_normalize(Volume(np.zeros((2, 2, 2)), kind="normalized"))
    with pytest.raises(ValueError):
        WindowSpec(width=0)


def test_window_keeps_geometry():
    v = Volume(np.zeros((2, 3, 4), dtype=np.int16), spacing=(2, 1, 0.5), origin=(1, 2, 3))
    out = window_normalize(v)
    assert (out.shape, out.spacing, out.origin) == (v.shape, v.spacing, v.origin)


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.int16, (3, 3, 3), elements=st.integers(-3000, 3000)),
    b=arrays(np.int16, (3, 3, 3), elements=st.integers(0, 500)),
    level=st.floats(-1000, 500),
    width=st.floats(1, 2000),
)
def test_window_monotone_and_bounded(a, b, level, width):
    w = WindowSpec(level, width)
    lo = window_normalize(Volume(a), w).data
    hi = window_normalize(Volume((a.astype(np.int32) + b).clip(-32768, 32767).astype(np.int16)), w).data
    assert np.all(lo <= hi)
    assert lo.min() >= 0 and lo.max() <= 1


# resampling ----------------------------------------------------------------


def test_resample_identity():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((4, 5, 6)), spacing=(2.5, 0.7, 0.7), kind="normalized", origin=(1, 2, 3))
    out = resample(v, ResampleSpec((2.5, 0.7, 0.7)))
    assert out.shape == v.shape and out.origin == v.origin
    np.testing.assert_array_equal(out.data, v.data)


def test_resample_ramp_hand_oracle():
    v = Volume(np.array([0.0, 1.0, 2.0]).reshape(1, 1, 3), spacing=(1, 1, 2))
    out = resample(v, ResampleSpec((1, 1, 1)))
    assert out.shape == (1, 1, 6)  # ceil(3 * 2 / 1)
    # world x = 0, 1, 2, 3, 4 lie at source coordinates 0, .5, 1, 1.5, 2; x = 5 clamps
    np.testing.assert_allclose(out.data.ravel(), [0, 0.5, 1, 1.5, 2, 2])


def trilinear_oracle(data, z, y, x):
    total = 0.0
    for dz, dy, dx in itertools.product((0, 1), repeat=3):
        iz, iy, ix = int(np.floor(z)) + dz, int(np.floor(y)) + dy, int(np.floor(x)) + dx
        w = (1 - abs(z - iz)) * (1 - abs(y - iy)) * (1 - abs(x - ix))
        if w > 0:
            total += w * data[min(iz, data.shape[0] - 1), min(iy, data.shape[1] - 1), min(ix, data.shape[2] - 1)]
    return total


def test_resample_trilinear_matches_hand_formula():
    rng = np.random.default_rng(3)
    data = rng.random((4, 4, 4))
    v = Volume(data, spacing=(2.0, 1.5, 1.0), kind="normalized")
    out = resample(v, ResampleSpec((0.8, 0.9, 0.6)))
    for i in [(0, 0, 0), (3, 2, 5), (7, 5, 2), (9, 6, 6)]:
        z, y, x = (k * t / s for k, t, s in zip(i, (0.8, 0.9, 0.6), (2.0, 1.5, 1.0)))
        assert out.data[i] == pytest.approx(trilinear_oracle(data, z, y, x), abs=1e-12)


def test_resample_mask_stays_binary():
    rng = np.random.default_rng(4)
    m = Volume(rng.integers(0, 2, (5, 5, 5)).astype(np.uint8), spacing=(2.5, 0.7, 0.7), kind="mask")
    out = resample(m, ResampleSpec((1, 1, 1), "trilinear"))
    assert out.kind == "mask"
    assert set(np.unique(out.data)) <= {0, 1}
    assert out.shape == (13, 4, 4)


def test_resample_preserves_coincident_lattice_points():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(4, 4, 4))
    v = Volume(data, spacing=(2, 2, 2))
    out = resample(v, ResampleSpec((1, 1, 1)))
    np.testing.assert_allclose(out.data[::2, ::2, ::2], data, atol=1e-12)


def test_resample_dims_tolerate_float_noise():
    v = Volume(np.zeros((3, 3, 3)), spacing=(0.7, 0.7, 0.7))
    assert resample(v, ResampleSpec((0.7, 0.7, 0.7))).shape == (3, 3, 3)


# patches ----------------------------------------------------------------


def test_patch_side_one():
    data = np.arange(27).reshape(3, 3, 3)
    p = extract_patch(Volume(data), (1, 2, 0), 1)
    assert p.data.item() == data[1, 2, 0]


def test_patch_corner_padding_count():
    data = np.arange(1, 28, dtype=np.int16).reshape(3, 3, 3)
    p = extract_patch(Volume(data), (0, 0, 0), 3)
    # brute force: lattice points of the 3-cube around the corner inside the grid
    inside = sum(
        all(0 <= c + d < 3 for c, d in zip((0, 0, 0), off)) for off in itertools.product((-1, 0, 1), repeat=3)
    )
    assert inside == 8
    # the minimum (1) sits at the corner itself, so it appears once more than the padding
    assert (p.data == data.min()).sum() == 27 - inside + 1
    assert p.data[1, 1, 1] == data[0, 0, 0]
    assert p.origin == (-1.0, -1.0, -1.0)


def test_patch_interior_matches_world_positions():
    rng = np.random.default_rng(6)
    v = Volume(rng.normal(size=(9, 9, 9)), spacing=(2.5, 0.7, 0.7), origin=(-5, 10, 3))
    p = extract_patch(v, (4, 5, 3), 5)
    for i in itertools.product(range(5), repeat=3):
        j = tuple(c - 2 + k for c, k in zip((4, 5, 3), i))
        assert p.data[i] == v.data[j]
        assert voxel_to_world(p, i) == pytest.approx(voxel_to_world(v, j))


def test_patch_errors():
    v = Volume(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        extract_patch(v, (1, 1, 1), 2)
    with pytest.raises(OutOfBoundsError):
        extract_patch(v, (3, 1, 1), 3)
