"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Covers what this package needs: 3D volumes, the common scalar dtypes, sform
or qform affines, and scl_slope/scl_inter intensity scaling. The affine is
interpreted as ``world = A @ [i, j, k, 1]`` with data stored x-fastest.
"""

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeIOError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

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


def _datatype_code(dtype: np.dtype) -> tuple:
    """Map an arbitrary dtype to a supported NIfTI code, converting if needed."""
    dtype = np.dtype(dtype)
    if dtype in _CODES:
        return _CODES[dtype], dtype
    if np.issubdtype(dtype, np.integer):
        return _CODES[np.dtype(np.int32)], np.dtype(np.int32)
    return _CODES[np.dtype(np.float32)], np.dtype(np.float32)


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        if "w" in mode:
            # mtime pinned so identical volumes produce identical files
            return gzip.GzipFile(path, mode, mtime=0)
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple:
    """Read a NIfTI-1 file; returns (data (x,y,z), affine 4x4)."""
    path = Path(path)
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise VolumeIOError(f"cannot read {path}: {e}") from e
    if len(raw) < HEADER_SIZE:
        raise VolumeIOError(f"{path}: truncated NIfTI header")

    bo = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise VolumeIOError(f"{path}: not a NIfTI-1 file")
        bo = ">"

    dim = struct.unpack_from(bo + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(bo + "2h", raw, 70)
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(bo + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(bo + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(bo + "2h", raw, 252)
    quat = struct.unpack_from(bo + "6f", raw, 256)
    srow = np.array(struct.unpack_from(bo + "12f", raw, 280), dtype=float).reshape(3, 4)

    ndim = dim[0]
    if ndim < 3:
        raise VolumeIOError(f"{path}: need a 3D volume, header declares {ndim}D")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d > 1 for d in shape[3:]):
        raise VolumeIOError(f"{path}: >3D volumes are unsupported, shape {shape}")
    shape = shape[:3]

    if datatype not in _DTYPES:
        raise VolumeIOError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    count = int(np.prod(shape))
    payload = raw[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise VolumeIOError(f"{path}: data payload shorter than header promises")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    data = np.asarray(data, dtype=data.dtype.newbyteorder("="))

    if scl_slope not in (0.0, 1.0) and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    elif scl_inter not in (0.0,) and np.isfinite(scl_inter) and scl_slope != 0.0:
        data = data + scl_inter

    if sform_code > 0:
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    elif qform_code > 0:
        affine = _qform_affine(quat, pixdim)
    else:
        affine = np.diag([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[3]) or 1.0, 1.0])
    return data, affine


def _qform_affine(quat, pixdim) -> np.ndarray:
    b, c, d, ox, oy, oz = quat
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scales = np.array([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, (abs(pixdim[3]) or 1.0) * qfac])
    affine = np.eye(4)
    affine[:3, :3] = r * scales
    affine[:3, 3] = (ox, oy, oz)
    return affine


def write_nifti(path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write ``data`` (x,y,z) with the given 4x4 affine as single-file NIfTI-1."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise VolumeIOError(f"can only write 3D volumes, got shape {data.shape}")
    code, dtype = _datatype_code(data.dtype)
    data = np.ascontiguousarray(data.astype(dtype, copy=False))
    affine = np.asarray(affine, dtype=float)

    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope/inter
    header[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<12f", header, 280, *affine[:3, :4].reshape(-1))
    header[344:348] = MAGIC

    with _open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        f.write(data.ravel(order="F").tobytes())
