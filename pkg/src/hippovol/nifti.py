"""Minimal single-file NIfTI-1 reader/writer.

Supports uncompressed ``.nii`` and gzip ``.nii.gz`` volumes with exactly
three spatial dimensions. Honors ``dim``, ``pixdim``, ``datatype`` and
``scl_slope``/``scl_inter``; everything orientation-related (qform/sform)
is written as a plain diagonal scaling and ignored on read.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype (unswapped)
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised for malformed or unsupported NIfTI files."""


def _open_for_read(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a 3D NIfTI-1 file.

    Returns ``(data, spacing)`` where ``data`` is the raw volume in stored
    (x, y, z) array order with scl scaling applied, and ``spacing`` is
    ``pixdim[1:4]`` in mm.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such NIfTI file: {path}")
    with _open_for_read(path) as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than the {HEADER_SIZE}-byte NIfTI-1 header")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr (not {HEADER_SIZE} in either byte order)")
        order = ">"

    magic = raw[344:348]
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"{path}: bad NIfTI magic {magic!r} (only single-file 'n+1' supported)")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim != 3:
        raise NiftiError(
            f"{path}: expected 3 spatial dimensions, header field dim[0] is {ndim}"
        )
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise NiftiError(f"{path}: header field dim contains non-positive extent {shape}")

    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported header field datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)

    pixdim = struct.unpack_from(order + "8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiError(f"{path}: header field pixdim has non-positive spacing {spacing}")

    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"{path}: truncated data section ({len(raw) - offset} of {nbytes} bytes)")

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        if np.isfinite(scl_slope) and scl_slope != 0.0:
            data = data.astype(np.float64) * scl_slope + scl_inter
    return np.asarray(data), spacing


def write_nifti(path, data: np.ndarray, spacing) -> None:
    """Write a 3D array as single-file NIfTI-1 (.nii or .nii.gz by extension).

    The array dtype is preserved (must be one of the supported codes);
    spacing goes to pixdim and a diagonal sform.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"can only write 3D volumes, got {data.ndim}D")
    dtype = data.dtype.newbyteorder("=")
    if np.dtype(dtype) not in _CODES:
        raise NiftiError(f"unsupported dtype for NIfTI output: {data.dtype}")
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise NiftiError(f"spacing must be three positive values, got {spacing}")

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODES[np.dtype(dtype)])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: mm
    descrip = b"hippovol"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner-anatomical
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = MAGIC_SINGLE

    payload = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + np.asfortranarray(
        data.astype(dtype, copy=False)
    ).tobytes(order="F")

    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        if path.name.endswith(".gz"):
            # fixed mtime keeps outputs byte-identical across runs
            with open(path, "wb") as f:
                with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                    gz.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write NIfTI file {path}: {exc}") from exc
