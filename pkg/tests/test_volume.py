"""Volume preprocessing, slab extraction, and file I/O."""

import struct

import numpy as np
import pytest

from lsnet import volume
from lsnet.errors import ConfigError, DataError, FormatError, UsageError
from lsnet.volume import Volume


def _vol(data, spacing=(1, 1, 1), kind="intensity"):
    return Volume(np.asarray(data), spacing, kind)


def test_clip_hu_examples():
    v = _vol(np.array([[[-500.0, 150.0, 300.0]]], dtype=np.float32))
    out = volume.clip_hu(v)
    np.testing.assert_array_equal(out.data.ravel(), [-200.0, 150.0, 200.0])
    assert out.dims == v.dims and out.spacing == v.spacing


def test_clip_hu_idempotent_and_monotone():
    rng = np.random.default_rng(0)
    v = _vol(rng.uniform(-1000, 1000, (4, 5, 6)).astype(np.float32))
    once = volume.clip_hu(v)
    twice = volume.clip_hu(once)
    np.testing.assert_array_equal(once.data, twice.data)
    w = _vol(v.data + 10.0)
    np.testing.assert_array_equal(
        volume.clip_hu(w).data >= once.data, np.ones(v.data.shape, bool))


def test_clip_hu_rejects_labels():
    with pytest.raises(UsageError):
        volume.clip_hu(_vol(np.zeros((2, 2, 2), np.uint8), kind="labels"))


def test_resample_dims_from_header_arithmetic():
    # 512*0.7/1 = 358.4 -> 358 ; 400*1.0/2.5 = 160
    v = _vol(np.zeros((400, 512, 512), dtype=np.float32), (0.7, 0.7, 1.0))
    out = volume.resample_trilinear(v, (1.0, 1.0, 2.5))
    assert out.dims == (358, 358, 160)
    assert out.spacing == (1.0, 1.0, 2.5)


def test_resample_constant_volume_stays_constant():
    v = _vol(np.full((6, 7, 8), 42.5, dtype=np.float32), (0.9, 1.1, 2.0))
    out = volume.resample_trilinear(v, (1.0, 1.0, 2.5))
    np.testing.assert_allclose(out.data, 42.5, atol=1e-5)


def test_resample_identity_spacing():
    rng = np.random.default_rng(1)
    v = _vol(rng.normal(0, 100, (5, 6, 7)).astype(np.float32), (0.8, 0.9, 2.0))
    out = volume.resample_trilinear(v, (0.8, 0.9, 2.0))
    assert out.dims == v.dims
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_resample_reproduces_linear_ramp():
    nx, ny, nz = 12, 10, 8
    x = np.arange(nx, dtype=np.float32)
    ramp = np.broadcast_to(x, (nz, ny, nx)).copy()
    v = _vol(ramp, (2.0, 2.0, 2.0))
    out = volume.resample_trilinear(v, (1.0, 1.0, 1.0))
    # interior voxels must sit exactly on the ramp (in source coordinates)
    src_x = (np.arange(out.dims[0]) + 0.5) * 0.5 - 0.5
    interior = (src_x >= 0) & (src_x <= nx - 1)
    want = np.broadcast_to(src_x, out.data.shape)
    assert np.abs(out.data - want)[:, :, interior].max() < 1e-4


def test_resample_labels_nearest_neighbor():
    lab = np.zeros((4, 4, 4), dtype=np.uint8)
    lab[1:3, 1:3, 1:3] = 2
    v = _vol(lab, (2, 2, 2), kind="labels")
    out = volume.resample_trilinear(v, (1, 1, 1))
    assert out.kind == "labels"
    assert set(np.unique(out.data)) <= {0, 2}
    assert out.dims == (8, 8, 8)


def test_resample_rejects_bad_spacing():
    v = _vol(np.zeros((2, 2, 2), np.float32))
    with pytest.raises(ConfigError):
        volume.resample_trilinear(v, (1.0, 0.0, 1.0))


def test_extract_slab_clamps_at_boundaries():
    data = np.arange(10, dtype=np.float32)[:, None, None] * np.ones((1, 3, 4))
    v = _vol(data)
    assert list(volume.extract_slab(v, 0, 5).slices[0, :, 0, 0]) == [0, 0, 0, 1, 2]
    assert list(volume.extract_slab(v, 9, 5).slices[0, :, 0, 0]) == [7, 8, 9, 9, 9]
    assert list(volume.extract_slab(v, 5, 5).slices[0, :, 0, 0]) == [3, 4, 5, 6, 7]
    stack = volume.extract_slab(v, 4, 5)
    assert stack.slices.shape == (1, 5, 3, 4)
    assert stack.center_z == 4
    assert stack.slices[0, 2, 0, 0] == 4  # center channel is slice z


def test_extract_slab_errors():
    v = _vol(np.zeros((4, 4, 4), np.float32))
    with pytest.raises(UsageError):
        volume.extract_slab(v, 4, 5)
    with pytest.raises(UsageError):
        volume.extract_slab(v, 0, 4)


def test_merge_labels():
    lab = _vol(np.array([[[0, 1, 2]]], dtype=np.uint8), kind="labels")
    out = volume.merge_labels(lab)
    np.testing.assert_array_equal(out.data.ravel(), [0, 1, 1])
    again = volume.merge_labels(out)
    np.testing.assert_array_equal(out.data, again.data)
    allbg = _vol(np.zeros((2, 2, 2), np.uint8), kind="labels")
    np.testing.assert_array_equal(volume.merge_labels(allbg).data, allbg.data)


def test_liver_region_slices():
    lab = np.zeros((50, 4, 4), dtype=np.uint8)
    lab[10:41, 1, 1] = 1
    assert volume.liver_region_slices(_vol(lab, kind="labels")) == (10, 40)
    single = np.zeros((10, 4, 4), dtype=np.uint8)
    single[7, 2, 2] = 2  # lesion counts as liver region
    assert volume.liver_region_slices(_vol(single, kind="labels")) == (7, 7)
    with pytest.raises(DataError):
        volume.liver_region_slices(_vol(np.zeros((4, 4, 4), np.uint8),
                                        kind="labels"))


# --- MVOL --------------------------------------------------------------------

@pytest.mark.parametrize("dtype,kind", [(np.float32, "intensity"),
                                        (np.int16, "intensity"),
                                        (np.uint8, "labels")])
def test_mvol_round_trip(tmp_path, dtype, kind):
    rng = np.random.default_rng(2)
    if kind == "labels":
        data = rng.integers(0, 3, (3, 4, 5)).astype(dtype)
    else:
        data = rng.normal(0, 100, (3, 4, 5)).astype(dtype)
    v = Volume(data, (0.625, 0.75, 2.5), kind)
    path = tmp_path / "t.mvol"
    volume.save_mvol(v, path)
    back = volume.load_mvol(path)
    assert back.kind == kind
    assert back.spacing == v.spacing
    assert back.data.dtype == dtype
    np.testing.assert_array_equal(back.data, v.data)


def test_mvol_save_twice_identical_bytes(tmp_path):
    v = _vol(np.random.default_rng(3).normal(size=(2, 3, 4)).astype(np.float32))
    p1, p2 = tmp_path / "a.mvol", tmp_path / "b.mvol"
    volume.save_mvol(v, p1)
    volume.save_mvol(v, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_mvol_bad_magic(tmp_path):
    p = tmp_path / "bad.mvol"
    p.write_bytes(b"NOPE1\ndims 1 1 1\nspacing 1 1 1\ndtype u8\nkind labels\n\n\x00")
    with pytest.raises(FormatError) as ei:
        volume.load_mvol(p)
    assert ei.value.offset == 0


def test_mvol_payload_mismatch(tmp_path):
    v = _vol(np.zeros((2, 2, 2), np.float32))
    p = tmp_path / "t.mvol"
    volume.save_mvol(v, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(FormatError) as ei:
        volume.load_mvol(p)
    assert "payload" in str(ei.value)


def test_save_mask_uses_u8(tmp_path):
    lab = _vol(np.array([[[0, 1, 2]]], dtype=np.int64), kind="labels")
    p = tmp_path / "m.mvol"
    volume.save_mask(lab, p)
    back = volume.load_mvol(p)
    assert back.data.dtype == np.uint8
    np.testing.assert_array_equal(back.data.ravel(), [0, 1, 2])


# --- NIfTI -------------------------------------------------------------------

def _nifti_bytes(dims=(32, 32, 16), spacing=(1.0, 1.0, 2.5), datatype=4,
                 data=None, magic=b"n+1\x00", vox_offset=352.0, order="<"):
    nx, ny, nz = dims
    hdr = bytearray(352)
    struct.pack_into(order + "i", hdr, 0, 348)
    struct.pack_into(order + "8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    bitpix = {4: 16, 16: 32, 64: 64}.get(datatype, 0)
    struct.pack_into(order + "hh", hdr, 70, datatype, bitpix)
    struct.pack_into(order + "8f", hdr, 76, 0.0, spacing[0], spacing[1],
                     spacing[2], 0, 0, 0, 0)
    struct.pack_into(order + "f", hdr, 108, vox_offset)
    hdr[344:348] = magic
    if data is None:
        np_dt = {4: np.int16, 16: np.float32, 64: np.float64}[datatype]
        data = np.arange(nx * ny * nz, dtype=np_dt) % 211
    return bytes(hdr) + data.astype(data.dtype.newbyteorder(order)).tobytes()


def test_nifti_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    data = rng.integers(-300, 300, 32 * 32 * 16).astype(np.int16)
    p = tmp_path / "t.nii"
    p.write_bytes(_nifti_bytes(data=data))
    v = volume.load_nifti(p)
    assert v.dims == (32, 32, 16)
    assert v.spacing == (1.0, 1.0, 2.5)
    np.testing.assert_array_equal(v.data.ravel(), data)  # x fastest


def test_nifti_float32_and_big_endian(tmp_path):
    rng = np.random.default_rng(5)
    data = rng.normal(0, 100, 4 * 4 * 4).astype(np.float32)
    for order in ("<", ">"):
        p = tmp_path / f"t{order == '>'}.nii"
        p.write_bytes(_nifti_bytes(dims=(4, 4, 4), datatype=16, data=data,
                                   order=order))
        v = volume.load_nifti(p)
        np.testing.assert_array_equal(v.data.ravel(), data)


def test_nifti_unsupported_datatype_names_field(tmp_path):
    p = tmp_path / "f64.nii"
    p.write_bytes(_nifti_bytes(dims=(4, 4, 4), datatype=64))
    with pytest.raises(FormatError) as ei:
        volume.load_nifti(p)
    assert "datatype" in str(ei.value) and "64" in str(ei.value)


def test_nifti_rejects_gzip_and_two_file(tmp_path):
    p = tmp_path / "z.nii"
    p.write_bytes(b"\x1f\x8b" + b"\x00" * 400)
    with pytest.raises(FormatError):
        volume.load_nifti(p)
    p2 = tmp_path / "pair.nii"
    p2.write_bytes(_nifti_bytes(dims=(4, 4, 4), magic=b"ni1\x00"))
    with pytest.raises(FormatError):
        volume.load_nifti(p2)


def test_nifti_length_mismatch(tmp_path):
    raw = _nifti_bytes(dims=(4, 4, 4))
    p = tmp_path / "short.nii"
    p.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as ei:
        volume.load_nifti(p)
    assert "does not match" in str(ei.value)


def test_load_volume_dispatches(tmp_path):
    v = _vol(np.zeros((2, 2, 2), np.float32), (1, 1, 2))
    p = tmp_path / "a.mvol"
    volume.save_mvol(v, p)
    assert volume.load_volume(p).spacing == (1.0, 1.0, 2.0)
    p2 = tmp_path / "b.nii"
    p2.write_bytes(_nifti_bytes(dims=(4, 4, 4)))
    assert volume.load_volume(p2).dims == (4, 4, 4)
