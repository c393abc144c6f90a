"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Covers what the pipeline needs: 3D scalar volumes, the common integer/float
datatypes, scl_slope/scl_inter scaling, and either byte order. Arrays are
exchanged in [D, H, W] = (Z, Y, X) axis order; on disk NIfTI stores X fastest,
so data is transposed on the way in and out. Written files always use float32,
a diagonal sform, and a fixed gzip mtime so identical volumes produce
identical bytes.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeIOError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype (unscaled, native-endian base)
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


def _open_maybe_gz(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise VolumeIOError(f"cannot read {path}: {e}") from e
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except OSError as e:
            raise VolumeIOError(f"cannot decompress {path}: {e}") from e
    return raw


def read_nifti(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a 3D NIfTI-1 volume.

    Returns (data, spacing) with data float32 [D, H, W] and spacing in mm as
    (dz, dy, dx).
    """
    path = Path(path)
    raw = _open_maybe_gz(path)
    if len(raw) < HEADER_SIZE:
        raise VolumeIOError(f"{path}: truncated header ({len(raw)} bytes)")

    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == 348:
        bo = ">"
    else:
        raise VolumeIOError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeIOError(f"{path}: detached .hdr/.img pairs are not supported")

    dim = struct.unpack_from(f"{bo}8h", raw, 40)
    ndim = dim[0]
    if ndim < 3:
        raise VolumeIOError(f"{path}: expected a 3D volume, got dim[0]={ndim}")
    if ndim > 3 and any(d > 1 for d in dim[4 : 1 + ndim]):
        raise VolumeIOError(f"{path}: >3D volumes are not supported (dim={dim})")
    nx, ny, nz = dim[1], dim[2], dim[3]

    datatype = struct.unpack_from(f"{bo}h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise VolumeIOError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)

    pixdim = struct.unpack_from(f"{bo}8f", raw, 76)
    vox_offset = int(struct.unpack_from(f"{bo}f", raw, 108)[0])
    scl_slope = struct.unpack_from(f"{bo}f", raw, 112)[0]
    scl_inter = struct.unpack_from(f"{bo}f", raw, 116)[0]

    n_vox = nx * ny * nz
    end = vox_offset + n_vox * dtype.itemsize
    if len(raw) < end:
        raise VolumeIOError(f"{path}: truncated data ({len(raw)} < {end} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=n_vox, offset=vox_offset)
    vol = flat.reshape((nx, ny, nz), order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * np.float32(slope) + np.float32(scl_inter)

    data = np.ascontiguousarray(vol.transpose(2, 1, 0))
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, spacing


def write_nifti(
    path: str | Path,
    data: np.ndarray,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> None:
    """Write a [D, H, W] volume as single-file NIfTI-1 float32.

    Gzip-compresses when the path ends in .gz, with mtime pinned to zero so
    repeated writes are byte-identical.
    """
    path = Path(path)
    if data.ndim != 3:
        raise VolumeIOError(f"expected 3D data, got shape {data.shape}")
    vol = np.asarray(data, dtype=np.float32)
    dz, dy, dx = (float(s) for s in spacing)
    nz, ny, nx = vol.shape

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    descrip = b"seqsynth"
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, dx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, dy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, dz, 0.0)
    hdr[344:348] = MAGIC

    body = vol.transpose(2, 1, 0).tobytes(order="F")
    payload = bytes(hdr) + b"\x00\x00\x00\x00" + body

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.suffix == ".gz":
            # empty filename + fixed mtime keep the gzip header reproducible
            with open(tmp, "wb") as fh:
                with gzip.GzipFile(
                    filename="", fileobj=fh, mode="wb", mtime=0
                ) as gz:
                    gz.write(payload)
        else:
            tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise VolumeIOError(f"cannot write {path}: {e}") from e
