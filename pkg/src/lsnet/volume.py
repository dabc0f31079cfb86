"""3-D volumes: representation, HU preprocessing, resampling, slab
extraction, and file I/O.

Volume data is stored as a C-contiguous (nz, ny, nx) array so the raw
buffer runs x fastest, then y, then z — the same order as the MVOL and
NIfTI payloads.  ``dims`` is reported as (nx, ny, nz).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError

HU_MIN = -200.0
HU_MAX = 200.0

_MVOL_MAGIC = "MVOL1"
_MVOL_DTYPES = {"i16": np.int16, "f32": np.float32, "u8": np.uint8}
_MVOL_NAMES = {np.dtype(np.int16): "i16", np.dtype(np.float32): "f32",
               np.dtype(np.uint8): "u8"}


@dataclass
class Volume:
    """Scalar grid with physical voxel spacing in mm.

    kind 'intensity' carries HU values; kind 'labels' carries
    {0 background, 1 liver, 2 lesion}.
    """

    data: np.ndarray
    spacing: tuple
    kind: str = "intensity"

    def __post_init__(self):
        if self.data.ndim != 3:
            raise UsageError(f"volume data must be 3-d, got shape {self.data.shape}")
        self.data = np.ascontiguousarray(self.data)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.kind not in ("intensity", "labels"):
            raise UsageError(f"kind must be 'intensity' or 'labels', got {self.kind!r}")
        if self.kind == "labels":
            if not np.issubdtype(self.data.dtype, np.integer):
                raise DataError(f"label volume has non-integer dtype {self.data.dtype}")
            if self.data.size and (self.data.min() < 0 or self.data.max() > 2):
                raise DataError("label volume contains values outside {0,1,2}")

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


@dataclass
class SlabStack:
    """k adjacent axial slices as network input channels, ascending in z."""

    slices: np.ndarray  # (1, k, h, w) float32
    center_z: int


def clip_hu(vol):
    """Clamp intensities to the [-200, 200] HU working range."""
    if vol.kind != "intensity":
        raise UsageError("clip_hu applies to intensity volumes only")
    return Volume(np.clip(vol.data, HU_MIN, HU_MAX), vol.spacing, vol.kind)


def _axis_dim(n, old_sp, new_sp):
    return max(1, int(np.floor(n * old_sp / new_sp + 0.5)))


def _source_coords(n_new, n_old, old_sp, new_sp):
    # voxel-center alignment; clamps at the borders
    c = (np.arange(n_new) + 0.5) * (new_sp / old_sp) - 0.5
    return np.clip(c, 0.0, n_old - 1.0)


def resample_to_grid(vol, new_dims, new_spacing):
    """Resample onto an explicit grid: trilinear for intensities,
    nearest-neighbor for labels."""
    nx, ny, nz = vol.dims
    tx, ty, tz = new_dims
    sx, sy, sz = vol.spacing
    gx, gy, gz = new_spacing
    cx = _source_coords(tx, nx, sx, gx)
    cy = _source_coords(ty, ny, sy, gy)
    cz = _source_coords(tz, nz, sz, gz)

    if vol.kind == "labels":
        ix = np.clip(np.floor(cx + 0.5).astype(np.intp), 0, nx - 1)
        iy = np.clip(np.floor(cy + 0.5).astype(np.intp), 0, ny - 1)
        iz = np.clip(np.floor(cz + 0.5).astype(np.intp), 0, nz - 1)
        out = vol.data[np.ix_(iz, iy, ix)]
        return Volume(out, new_spacing, "labels")

    data = vol.data.astype(np.float32, copy=False)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    z0 = np.floor(cz).astype(np.intp)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx = (cx - x0).astype(np.float32)
    fy = (cy - y0).astype(np.float32)
    fz = (cz - z0).astype(np.float32)

    out = np.zeros((tz, ty, tx), dtype=np.float32)
    for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
        for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
            wzy = wz[:, None, None] * wy[None, :, None]
            for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                out += data[np.ix_(zi, yi, xi)] * (wzy * wx[None, None, :])
    return Volume(out, new_spacing, "intensity")


def resample_trilinear(vol, target_spacing):
    """Resample so voxels measure ``target_spacing`` mm; new dims are
    round(old_dim*old/new) per axis, at least 1."""
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ConfigError(f"target spacing must be 3 positive values, "
                          f"got {target_spacing}")
    nx, ny, nz = vol.dims
    new_dims = (_axis_dim(nx, vol.spacing[0], target_spacing[0]),
                _axis_dim(ny, vol.spacing[1], target_spacing[1]),
                _axis_dim(nz, vol.spacing[2], target_spacing[2]))
    return resample_to_grid(vol, new_dims, tuple(float(s) for s in target_spacing))


def extract_slab(vol, z, k=5):
    """Stack of k slices centered on z, edge-replicated at the volume
    boundary, as float32 network input (1, k, h, w)."""
    nx, ny, nz = vol.dims
    if not 0 <= z < nz:
        raise UsageError(f"slice index {z} outside [0,{nz})")
    if k < 1 or k % 2 == 0:
        raise UsageError(f"slab thickness must be odd and >= 1, got {k}")
    idx = np.clip(np.arange(k) + z - (k - 1) // 2, 0, nz - 1)
    slices = vol.data[idx].astype(np.float32)[None]
    return SlabStack(slices=slices, center_z=int(z))


def merge_labels(labels):
    """Fold lesion voxels into the liver label (2 -> 1)."""
    if labels.kind != "labels":
        raise UsageError("merge_labels applies to label volumes only")
    return Volume(np.minimum(labels.data, 1), labels.spacing, "labels")


def liver_region_slices(labels):
    """Inclusive z-range of slices containing any liver or lesion voxel."""
    if labels.kind != "labels":
        raise UsageError("liver_region_slices applies to label volumes only")
    has = np.flatnonzero((labels.data >= 1).any(axis=(1, 2)))
    if has.size == 0:
        raise DataError("no liver voxels in label volume")
    return int(has[0]), int(has[-1])


# ---------------------------------------------------------------------------
# MVOL: the canonical internal format

def save_mvol(vol, path):
    """Text header (magic, dims, spacing, dtype, kind), blank line, raw
    little-endian payload with x fastest."""
    dt = np.dtype(vol.data.dtype)
    if dt not in _MVOL_NAMES:
        raise UsageError(f"MVOL supports i16/f32/u8, got {dt}")
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    header = (f"{_MVOL_MAGIC}\n"
              f"dims {nx} {ny} {nz}\n"
              f"spacing {sx!r} {sy!r} {sz!r}\n"
              f"dtype {_MVOL_NAMES[dt]}\n"
              f"kind {vol.kind}\n"
              "\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vol.data.astype(dt.newbyteorder("<")).tobytes())


def save_mask(labels, path):
    """Write a label volume as u8 MVOL (0/1/2 encoding)."""
    if labels.kind != "labels":
        raise UsageError("save_mask applies to label volumes only")
    save_mvol(Volume(labels.data.astype(np.uint8), labels.spacing, "labels"), path)


def load_mvol(path):
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError("MVOL header terminator (blank line) not found",
                          offset=len(raw))
    lines = raw[:sep].decode("ascii", errors="replace").split("\n")
    if not lines or lines[0] != _MVOL_MAGIC:
        raise FormatError(f"bad MVOL magic {lines[0]!r}", offset=0)
    if len(lines) != 5:
        raise FormatError(f"MVOL header has {len(lines)} lines, expected 5",
                          offset=sep)

    def fields(i, key, n):
        parts = lines[i].split()
        if len(parts) != n + 1 or parts[0] != key:
            raise FormatError(f"bad MVOL header line {i + 1}: {lines[i]!r}")
        return parts[1:]

    try:
        dims = tuple(int(v) for v in fields(1, "dims", 3))
        spacing = tuple(float(v) for v in fields(2, "spacing", 3))
    except ValueError as e:
        raise FormatError(f"bad MVOL header value: {e}") from e
    (dtype_name,) = fields(3, "dtype", 1)
    (kind,) = fields(4, "kind", 1)
    if dtype_name not in _MVOL_DTYPES:
        raise FormatError(f"unsupported MVOL dtype {dtype_name!r}")
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive MVOL dims {dims}")
    dt = np.dtype(_MVOL_DTYPES[dtype_name])
    expected = dims[0] * dims[1] * dims[2] * dt.itemsize
    payload = raw[sep + 2:]
    if len(payload) != expected:
        raise FormatError(
            f"MVOL payload is {len(payload)} bytes, expected {expected}",
            offset=sep + 2)
    data = np.frombuffer(payload, dtype=dt.newbyteorder("<")).astype(dt)
    data = data.reshape(dims[2], dims[1], dims[0])
    return Volume(data, spacing, kind)


# ---------------------------------------------------------------------------
# NIfTI-1 import (uncompressed, single-file, int16/float32, no extensions)

_NIFTI_DTYPES = {4: np.int16, 16: np.float32}


def load_nifti(path, kind="intensity"):
    """Minimal NIfTI-1 reader.

    Supports the uncompressed single-file layout ('n+1' magic) with
    datatype int16 or float32 and no header extensions.  Orientation,
    affines, and scl_slope/scl_inter scaling are out of scope; only dims
    and voxel spacing are taken from the header.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raise FormatError("compressed NIfTI (.nii.gz) is not supported", offset=0)
    if len(raw) < 352:
        raise FormatError("file shorter than a NIfTI-1 header", offset=len(raw))

    order = "<"
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != 348:
        (size_be,) = struct.unpack_from(">i", raw, 0)
        if size_be == 348:
            order = ">"
        else:
            raise FormatError(f"bad sizeof_hdr {size} (field sizeof_hdr)", offset=0)

    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise FormatError("two-file NIfTI (ni1 magic) is not supported", offset=344)
    if magic != b"n+1\x00":
        raise FormatError(f"bad NIfTI magic {magic!r} (field magic)", offset=344)

    dim = struct.unpack_from(order + "8h", raw, 40)
    if dim[0] < 3 or any(d > 1 for d in dim[4:4 + max(0, dim[0] - 3)]):
        raise FormatError(f"only 3-d volumes supported, dim={dim} (field dim)",
                          offset=40)
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive dims {(nx, ny, nz)} (field dim)", offset=40)

    (datatype, bitpix) = struct.unpack_from(order + "hh", raw, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(
            f"unsupported datatype code {datatype} (field datatype); "
            "only int16 (4) and float32 (16) are supported", offset=70)
    dt = np.dtype(_NIFTI_DTYPES[datatype])
    if bitpix != dt.itemsize * 8:
        raise FormatError(f"bitpix {bitpix} inconsistent with datatype "
                          f"{datatype} (field bitpix)", offset=72)

    pixdim = struct.unpack_from(order + "8f", raw, 76)
    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    if any(s <= 0 for s in spacing):
        raise FormatError(f"non-positive voxel spacing {spacing} (field pixdim)",
                          offset=76)

    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    vox_offset = int(vox_offset)
    if vox_offset < 348:
        raise FormatError(f"vox_offset {vox_offset} overlaps header "
                          "(field vox_offset)", offset=108)
    if raw[348:349] not in (b"", b"\x00"):
        raise FormatError("NIfTI header extensions are not supported", offset=348)

    expected = nx * ny * nz * dt.itemsize
    payload = raw[vox_offset:]
    if len(payload) != expected:
        raise FormatError(
            f"data length {len(payload)} does not match header "
            f"dims {(nx, ny, nz)} ({expected} bytes)", offset=vox_offset)
    data = np.frombuffer(payload, dtype=dt.newbyteorder(order)).astype(dt)
    return Volume(data.reshape(nz, ny, nx), spacing, kind)


def load_volume(path, kind="intensity"):
    """Dispatch on content magic: MVOL or NIfTI-1."""
    with open(path, "rb") as f:
        head = f.read(8)
    if head.startswith(_MVOL_MAGIC.encode("ascii")):
        vol = load_mvol(path)
        if kind != vol.kind:
            raise UsageError(f"{path} holds a {vol.kind} volume, expected {kind}")
        return vol
    return load_nifti(path, kind=kind)
