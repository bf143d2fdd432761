"""Bit-exact single-file NIfTI-1 reader/writer.

Scope is deliberately narrow: little-endian .nii with a 352-byte header
(sizeof_hdr=348, vox_offset=352, magic "n+1"), datatypes float32,
float64, and complex64. Orientation fields are written as identity and
ignored on read; all toolkit volumes are co-registered by construction.
No NIfTI-2, no gzip, no DICOM.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import ComplexVolume3D, Volume3D

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_FLOAT32 = 16
DT_COMPLEX64 = 32
DT_FLOAT64 = 64
_SUPPORTED = {
    DT_FLOAT32: ("<f4", 32),
    DT_COMPLEX64: ("<c8", 64),
    DT_FLOAT64: ("<f8", 64),
}


class NiftiError(Exception):
    """Base class for NIfTI I/O failures."""


class MalformedHeaderError(NiftiError):
    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"malformed NIfTI header field {field!r}: {detail}")


class UnsupportedDatatypeError(NiftiError):
    def __init__(self, code: int):
        self.field = "datatype"
        super().__init__(
            f"unsupported NIfTI datatype code {code}; "
            f"supported: {sorted(_SUPPORTED)} (float32, complex64, float64)"
        )


class TruncatedDataError(NiftiError):
    def __init__(self, expected: int, got: int):
        self.field = "data"
        super().__init__(f"truncated data section: expected {expected} bytes, got {got}")


def write_nifti(vol: Volume3D | ComplexVolume3D, path) -> None:
    """Write a volume as little-endian single-file NIfTI-1.

    Real volumes go out as float32, complex volumes as complex64
    (interleaved re/im float32 pairs); scl_slope=1, scl_inter=0.
    """
    if isinstance(vol, ComplexVolume3D):
        datatype = DT_COMPLEX64
        payload = vol.data.astype(np.complex64)
    else:
        datatype = DT_FLOAT32
        payload = vol.data.astype(np.float32)
    dtype, bitpix = _SUPPORTED[datatype]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)  # sizeof_hdr
    hdr[38] = ord("r")  # 'regular' flag, ANALYZE heritage
    dims = vol.dims
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    sp = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sp[0], sp[1], sp[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<h", hdr, 252, 0)  # qform_code
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: identity-scaled rows
    struct.pack_into("<4f", hdr, 280, sp[0], 0.0, 0.0, 0.0)  # srow_x
    struct.pack_into("<4f", hdr, 296, 0.0, sp[1], 0.0, 0.0)  # srow_y
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sp[2], 0.0)  # srow_z
    struct.pack_into("<4s", hdr, 344, b"n+1\0")

    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\0\0\0\0")  # pad to vox_offset=352
        fh.write(payload.tobytes(order="F"))


def read_nifti(path) -> Volume3D | ComplexVolume3D:
    """Read a single-file NIfTI-1 volume written by this toolkit (or any
    little-endian float32/float64/complex64 .nii). Applies scl_slope and
    scl_inter when set."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise MalformedHeaderError("sizeof_hdr", f"file is only {len(raw)} bytes")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise MalformedHeaderError("sizeof_hdr", f"expected 348, got {sizeof_hdr}")
    magic = struct.unpack_from("<4s", raw, 344)[0]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise MalformedHeaderError("magic", f"expected 'n+1' or 'ni1', got {magic!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if not (1 <= dim[0] <= 7):
        raise MalformedHeaderError("dim[0]", f"expected 1..7, got {dim[0]}")
    if any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise MalformedHeaderError("dim", f"only 3D volumes supported, got {dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise MalformedHeaderError("dim", f"non-positive dims {dims}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _SUPPORTED:
        raise UnsupportedDatatypeError(datatype)
    dtype, bitpix = _SUPPORTED[datatype]
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(p if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)

    n = int(np.prod(dims))
    itemsize = np.dtype(dtype).itemsize
    expected = n * itemsize
    body = raw[offset:]
    if len(body) < expected:
        raise TruncatedDataError(expected, len(body))
    data = np.frombuffer(body[:expected], dtype=dtype).reshape(dims, order="F")

    if datatype == DT_COMPLEX64:
        out = data.astype(np.complex128)
        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            slope = scl_slope if scl_slope != 0.0 else 1.0
            out = out * slope + scl_inter
        return ComplexVolume3D(out, spacing)
    out = data.astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        out = out * slope + scl_inter
    return Volume3D(out, spacing)
