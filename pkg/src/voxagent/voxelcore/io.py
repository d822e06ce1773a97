"""Volume serialization: the VXV1 container and a read-only NIfTI-1 subset.

VXV1 layout (all little-endian)::

    b"VXV1" | u32 nx, ny, nz | 16 x f64 affine, row-major | f32 voxels, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .grid import BinaryMask, VoxelGrid


class VolumeParseError(ValueError):
    """Base class for malformed volume payloads."""


class BadMagicError(VolumeParseError):
    pass


class UnsupportedDatatypeError(VolumeParseError):
    pass


class TruncatedPayloadError(VolumeParseError):
    pass


VXV1_MAGIC = b"VXV1"
VXV1_HEADER = 4 + 12 + 128

NIFTI_HEADER_SIZE = 348
# NIfTI datatype code -> numpy dtype (byte order applied later)
NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def save_volume(g: VoxelGrid, fmt: str = "vxv1") -> bytes:
    if fmt.lower() != "vxv1":
        raise ValueError(f"cannot write format {fmt!r}; only VXV1 is writable")
    head = VXV1_MAGIC + struct.pack("<3I", *g.shape)
    head += np.asarray(g.affine, dtype="<f8").tobytes(order="C")
    return head + np.ascontiguousarray(g.values, dtype="<f4").tobytes(order="C")


def _load_vxv1(data: bytes) -> VoxelGrid:
    if data[:4] != VXV1_MAGIC:
        raise BadMagicError(f"bad VXV1 magic {data[:4]!r}")
    if len(data) < VXV1_HEADER:
        raise TruncatedPayloadError("VXV1 header is truncated")
    dims = struct.unpack("<3I", data[4:16])
    affine = np.frombuffer(data, dtype="<f8", count=16, offset=16).reshape(4, 4)
    n = int(np.prod(dims))
    if len(data) < VXV1_HEADER + 4 * n:
        raise TruncatedPayloadError(f"expected {n} voxels, payload holds {(len(data) - VXV1_HEADER) // 4}")
    vals = np.frombuffer(data, dtype="<f4", count=n, offset=VXV1_HEADER).reshape(dims)
    return VoxelGrid(vals.astype(np.float32), affine.astype(np.float64))


def _nifti_endian(data: bytes) -> str:
    if len(data) < NIFTI_HEADER_SIZE:
        raise TruncatedPayloadError("NIfTI header is truncated")
    for order in "<>":
        if struct.unpack(order + "i", data[:4])[0] == NIFTI_HEADER_SIZE:
            return order
    raise BadMagicError("sizeof_hdr is not 348 in either byte order")


def _load_nifti(data: bytes, image: bytes | None = None) -> VoxelGrid:
    e = _nifti_endian(data)
    magic = data[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"bad NIfTI-1 magic {magic!r}")
    dim = struct.unpack(e + "8h", data[40:56])
    if not 1 <= dim[0] <= 7:
        raise VolumeParseError(f"invalid dim[0]={dim[0]}")
    shape = [max(1, d) for d in dim[1:4]]
    if dim[0] > 3 and any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise VolumeParseError("only 3D volumes are supported")
    datatype = struct.unpack(e + "h", data[70:72])[0]
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"NIfTI datatype code {datatype} is not supported")
    pixdim = struct.unpack(e + "8f", data[76:108])
    vox_offset = struct.unpack(e + "f", data[108:112])[0]
    slope, inter = struct.unpack(e + "2f", data[112:120])
    sform_code = struct.unpack(e + "h", data[254:256])[0]

    if sform_code > 0:
        rows = struct.unpack(e + "12f", data[280:328])
        affine = np.eye(4)
        affine[:3, :] = np.asarray(rows, dtype=np.float64).reshape(3, 4)
    else:
        affine = np.diag([abs(p) if p else 1.0 for p in pixdim[1:4]] + [1.0])

    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(e)
    n = int(np.prod(shape))
    if magic == b"n+1\x00":
        payload, offset = data, int(vox_offset) if vox_offset >= 352 else 352
    else:
        payload, offset = (image if image is not None else b""), 0
    if len(payload) < offset + n * dtype.itemsize:
        raise TruncatedPayloadError("NIfTI voxel payload is truncated")
    # NIfTI stores the first axis fastest
    vals = np.frombuffer(payload, dtype=dtype, count=n, offset=offset).reshape(shape, order="F")
    vals = vals.astype(np.float64)
    if slope not in (0.0,) and np.isfinite(slope):
        vals = vals * slope + inter
    return VoxelGrid(vals.astype(np.float32), affine)


def load_volume(data: bytes, fmt: str | None = None, image: bytes | None = None) -> VoxelGrid:
    """Parse a volume. ``fmt`` is ``"vxv1"``, ``"nifti"`` or None to sniff."""
    if fmt is None:
        fmt = "vxv1" if data[:4] == VXV1_MAGIC else "nifti"
    fmt = fmt.lower()
    if fmt == "vxv1":
        return _load_vxv1(data)
    if fmt in ("nifti", "nii", "nifti1"):
        return _load_nifti(data, image)
    raise ValueError(f"unknown format hint {fmt!r}")


def read_volume(path) -> VoxelGrid:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".hdr":
        return _load_nifti(data, path.with_suffix(".img").read_bytes())
    return load_volume(data)


def write_volume(path, g: VoxelGrid):
    if isinstance(g, BinaryMask):
        g = VoxelGrid(g.as_float(), g.affine)
    Path(path).write_bytes(save_volume(g))


def read_mask(path) -> BinaryMask:
    g = read_volume(path)
    return BinaryMask(g.values > 0.5, g.affine)
