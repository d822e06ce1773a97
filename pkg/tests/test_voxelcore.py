import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxagent.voxelcore import (
    BadMagicError,
    BinaryMask,
    DomainError,
    GeometryError,
    Spacing,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    VoxelGrid,
    conform_ras,
    crop_margin,
    dice,
    load_volume,
    normalize01,
    resample,
    roi_report,
    save_volume,
    spacing_affine,
)

nib = pytest.importorskip("nibabel")


def world_value_set(g: VoxelGrid):
    """Oracle: the set of (rounded world coordinate, value) pairs."""
    w = np.round(g.world_coords(), 9)
    return sorted(zip(map(tuple, w), g.values.ravel().tolist()))


def rand_grid(rng, shape=(4, 5, 3), affine=None):
    return VoxelGrid(rng.standard_normal(shape).astype(np.float32), np.eye(4) if affine is None else affine)


# --- types -------------------------------------------------------------------


def test_spacing_omega_is_derived():
    s = Spacing(0.5, 2.0)
    assert s.omega == 4.0


def test_grid_rejects_non_finite_and_singular():
    with pytest.raises(DomainError):
        VoxelGrid(np.array([[[np.nan]]], dtype=np.float32), np.eye(4))
    aff = np.eye(4)
    aff[0, 0] = 0
    with pytest.raises(GeometryError):
        VoxelGrid(np.zeros((1, 1, 1), np.float32), aff)


def test_anisotropic_inplane_spacing_is_reported():
    g = VoxelGrid(np.zeros((2, 2, 2), np.float32), np.diag([1.0, 1.5, 2.0, 1.0]))
    with pytest.raises(GeometryError):
        _ = g.spacing


# --- conform_ras -------------------------------------------------------------


def test_conform_identity_unchanged():
    g = rand_grid(np.random.default_rng(0))
    out = conform_ras(g)
    assert np.array_equal(out.values, g.values) and np.array_equal(out.affine, g.affine)


def test_conform_negated_first_column():
    rng = np.random.default_rng(1)
    aff = np.eye(4)
    aff[0, 0] = -1.0
    g = rand_grid(rng, affine=aff)
    out = conform_ras(g)
    assert np.array_equal(out.values, g.values[::-1])
    assert out.affine[0, 0] == 1.0
    assert out.affine[0, 3] == -(g.shape[0] - 1)
    assert world_value_set(out) == world_value_set(g)


def test_conform_lps_to_ras_preserves_world_values():
    rng = np.random.default_rng(2)
    aff = np.diag([-0.9, -0.9, 2.5, 1.0])
    aff[:3, 3] = [10, 20, -5]
    g = rand_grid(rng, (5, 6, 4), aff)
    out = conform_ras(g)
    assert np.all(np.diag(out.affine)[:3] > 0)
    assert world_value_set(out) == world_value_set(g)


@settings(max_examples=30, deadline=None)
@given(st.permutations([0, 1, 2]), st.lists(st.sampled_from([-1.0, 1.0]), min_size=3, max_size=3), st.integers(0, 2**16))
def test_conform_property_permutation_and_flips(perm, signs, seed):
    rng = np.random.default_rng(seed)
    aff = np.eye(4)
    aff[:3, :3] = np.eye(3)[:, perm] * np.asarray(signs) * np.array([1.0, 1.0, 2.0])
    aff[:3, 3] = rng.uniform(-5, 5, 3)
    g = rand_grid(rng, (3, 4, 2), aff)
    out = conform_ras(g)
    assert np.all(np.diag(out.affine)[:3] > 0)
    assert world_value_set(out) == world_value_set(g)


# --- normalize01 -------------------------------------------------------------


def test_normalize01_examples():
    g = VoxelGrid(np.array([2.0, 4.0, 6.0], np.float32).reshape(3, 1, 1), np.eye(4))
    assert normalize01(g).values.ravel().tolist() == [0.0, 0.5, 1.0]
    c = VoxelGrid(np.full((2, 2, 2), 7.0, np.float32), np.eye(4))
    assert np.all(normalize01(c).values == 0)
    m = VoxelGrid(np.array([-1.0, 1.0, 3.0], np.float32).reshape(3, 1, 1), np.eye(4))
    assert normalize01(m).values.ravel()[1] == 0.5


# --- crop_margin -------------------------------------------------------------


def test_crop_full_mask_unchanged():
    g = rand_grid(np.random.default_rng(3), (4, 4, 4))
    out = crop_margin(g, BinaryMask(np.ones(g.shape, bool), g.affine), 3.0)
    assert out == g


def test_crop_single_voxel():
    g = rand_grid(np.random.default_rng(4), (9, 9, 9))
    m = np.zeros(g.shape, bool)
    m[4, 4, 4] = True
    assert crop_margin(g, BinaryMask(m, g.affine), 0.0).shape == (1, 1, 1)
    out = crop_margin(g, BinaryMask(m, g.affine), 2.0)
    assert out.shape == (5, 5, 5)
    # retained voxels keep values and world coordinates
    assert np.array_equal(out.values, g.values[2:7, 2:7, 2:7])
    assert np.allclose(out.world_coords((0, 0, 0)), g.world_coords((2, 2, 2)))


def test_crop_empty_mask_is_domain_error():
    g = rand_grid(np.random.default_rng(5))
    with pytest.raises(DomainError):
        crop_margin(g, BinaryMask(np.zeros(g.shape, bool), g.affine), 1.0)


# --- resample ----------------------------------------------------------------


def test_resample_same_spacing_identity():
    g = rand_grid(np.random.default_rng(6), (5, 5, 4), spacing_affine((5, 5, 4), (1.0, 1.0, 2.0)))
    out = resample(g, Spacing(1.0, 2.0))
    assert np.array_equal(out.values, g.values)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 3.0), st.floats(0.3, 3.0), st.floats(-5, 5))
def test_resample_constant_is_constant(s_inp, s_sep, c):
    g = VoxelGrid(np.full((5, 4, 3), c, np.float32), np.eye(4))
    out = resample(g, Spacing(s_inp, s_sep))
    assert np.allclose(out.values, c, atol=1e-6)


def test_resample_ramp_halved_spacing():
    n = 6
    vals = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, 2, 2)).copy()
    g = VoxelGrid(vals, spacing_affine((n, 2, 2), (1.0, 1.0, 1.0)))
    out = resample(g, Spacing(0.5, 1.0))
    assert out.shape[0] == 2 * n
    # output j sits at input coordinate (j + 0.5) * 0.5 - 0.5, clamped to [0, n-1]
    expect = np.clip((np.arange(2 * n) + 0.5) * 0.5 - 0.5, 0, n - 1)
    assert np.allclose(out.values[:, 0, 0], expect, atol=1e-6)
    # world extent of the field of view is preserved
    assert np.isclose(out.shape[0] * out.voxel_sizes[0], n * g.voxel_sizes[0])


# --- dice --------------------------------------------------------------------


def test_dice_examples():
    a = np.zeros((4, 4, 1), bool)
    b = np.zeros((4, 4, 1), bool)
    a[0, :4] = True
    b[0, :2] = True
    b[1, :2] = True
    A, B = BinaryMask(a, np.eye(4)), BinaryMask(b, np.eye(4))
    assert dice(A, A) == 1.0
    assert dice(A, B) == 0.5
    c = np.zeros_like(a)
    c[3, 3] = True
    assert dice(A, BinaryMask(c, np.eye(4))) == 0.0
    empty = BinaryMask(np.zeros_like(a), np.eye(4))
    assert dice(empty, empty) == 1.0


def test_dice_geometry_mismatch():
    a = BinaryMask(np.ones((2, 2, 2), bool), np.eye(4))
    b = BinaryMask(np.ones((2, 2, 2), bool), np.diag([2.0, 1, 1, 1]))
    with pytest.raises(DomainError):
        dice(a, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_properties(seed):
    rng = np.random.default_rng(seed)
    a = BinaryMask(rng.random((5, 5, 5)) < 0.3, np.eye(4))
    b = BinaryMask(rng.random((5, 5, 5)) < 0.3, np.eye(4))
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0
    if a.count:
        assert dice(a, a) == 1.0


# --- roi_report --------------------------------------------------------------


def test_roi_volume_and_extents():
    m = np.zeros((10, 10, 10), bool)
    m[:3, :4, :5] = True
    g = VoxelGrid(np.ones(m.shape, np.float32), np.eye(4))
    r = roi_report(g, BinaryMask(m, np.eye(4)))
    assert r.volume_mm3 == 60.0
    assert r.extents_mm == (3.0, 4.0, 5.0)
    aff = np.diag([1.0, 1.0, 2.0, 1.0])
    r2 = roi_report(VoxelGrid(np.ones(m.shape, np.float32), aff), BinaryMask(m, aff))
    assert r2.volume_mm3 == 120.0


def test_roi_statistics_and_degenerate():
    v = np.zeros((2, 1, 1), np.float32)
    v[:, 0, 0] = [4, 6]
    m = BinaryMask(np.ones((2, 1, 1), bool), np.eye(4))
    r = roi_report(VoxelGrid(v, np.eye(4)), m)
    assert (r.mean, r.std, r.snr) == (5.0, 1.0, 5.0)
    r = roi_report(VoxelGrid(np.full((2, 1, 1), 3.0, np.float32), np.eye(4)), m)
    assert r.snr is None and r.degenerate


# --- I/O ---------------------------------------------------------------------


def test_vxv1_fixed_payload_size_and_layout():
    g = VoxelGrid(np.zeros((1, 1, 1), np.float32), np.eye(4))
    b = save_volume(g)
    assert len(b) == 4 + 12 + 128 + 4
    assert b[:4] == b"VXV1"
    assert struct.unpack("<3I", b[4:16]) == (1, 1, 1)
    assert struct.unpack("<16d", b[16:144]) == tuple(np.eye(4).ravel())
    assert save_volume(g) == b


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
def test_vxv1_roundtrip_bit_exact(seed, shape):
    rng = np.random.default_rng(seed)
    aff = np.eye(4)
    aff[:3, :3] = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    aff[:3, 3] = rng.standard_normal(3)
    g = VoxelGrid(rng.standard_normal(shape).astype(np.float32), aff)
    back = load_volume(save_volume(g))
    assert back.values.tobytes() == g.values.tobytes()
    assert back.affine.tobytes() == g.affine.tobytes()


def test_vxv1_truncated():
    b = save_volume(VoxelGrid(np.zeros((2, 2, 2), np.float32), np.eye(4)))
    with pytest.raises(TruncatedPayloadError):
        load_volume(b[:-3])


def _nifti_bytes(arr, affine, dtype, big_endian=False):
    img = nib.Nifti1Image(arr.astype(dtype), affine)
    img.set_sform(affine, code=1)
    hdr = img.header
    if big_endian:
        hdr = hdr.as_byteswapped(">")
        img = nib.Nifti1Image(arr.astype(dtype), affine, header=hdr)
        img.set_sform(affine, code=1)
    return img.to_bytes()


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@pytest.mark.parametrize("big", [False, True])
def test_nifti_fixture_matches_reference_reader(dtype, big):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 100, (4, 3, 2))
    aff = np.array([[0.9, 0, 0, -3], [0, 0.9, 0, 4], [0, 0, 2.5, 1], [0, 0, 0, 1]])
    data = _nifti_bytes(arr, aff, dtype, big)
    ref = nib.Nifti1Image.from_bytes(data)
    g = load_volume(data)
    assert g.shape == (4, 3, 2)
    assert np.allclose(g.values, np.asarray(ref.dataobj, dtype=np.float64))
    assert np.allclose(g.affine, ref.affine)


def test_nifti_pixdim_fallback():
    arr = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    img = nib.Nifti1Image(arr, np.diag([1.5, 1.5, 3.0, 1.0]))
    img.set_sform(None, code=0)
    img.set_qform(None, code=0)
    g = load_volume(img.to_bytes())
    assert np.allclose(g.voxel_sizes, [1.5, 1.5, 3.0])


def test_nifti_bad_magic_and_datatype():
    data = bytearray(_nifti_bytes(np.zeros((2, 2, 2)), np.eye(4), np.float32))
    corrupt = bytes(data[:344]) + b"xx1\x00" + bytes(data[348:])
    with pytest.raises(BadMagicError):
        load_volume(corrupt, fmt="nifti")
    f64 = _nifti_bytes(np.zeros((2, 2, 2)), np.eye(4), np.float64)
    with pytest.raises(UnsupportedDatatypeError):
        load_volume(f64)


def test_unknown_magic_rejected():
    with pytest.raises(BadMagicError):
        load_volume(b"JUNK" + bytes(400))
