"""Minimal NIfTI-1 import.

Honors dim[1..3], pixdim[1..3], datatype (uint8/int16/float32), vox_offset,
and scl_slope/scl_inter. Orientation matrices (qform/sform) are ignored, so
origin is taken as (0, 0, 0); compressed files and 4D images are unsupported.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedFormatError
from .volumes import Volume

_HEADER_SIZE = 348
_DATATYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack_from(order + "i", raw, 0)
        if sizeof_hdr == _HEADER_SIZE:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if magic[:3] == b"ni1":
        raise UnsupportedFormatError(f"{path}: detached .hdr/.img pairs unsupported")

    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: dim[0]={ndim} out of range")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise UnsupportedFormatError(f"{path}: only 3D images are supported")
    if datatype not in _DATATYPES:
        raise UnsupportedFormatError(f"{path}: datatype code {datatype} unsupported")

    shape = tuple(max(1, dim[i]) for i in (1, 2, 3))
    spacing = tuple(abs(pixdim[i]) if pixdim[i] != 0 else 1.0 for i in (1, 2, 3))
    dtype = np.dtype(_DATATYPES[datatype]).newbyteorder(order)
    offset = int(vox_offset)
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: payload truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(_DATATYPES[datatype])
    # Per the standard, slope 0 means "no scaling stored".
    if scl_slope != 0.0 and (scl_slope != 1.0 or scl_inter != 0.0):
        data = data.astype(np.float32) * scl_slope + scl_inter
    return Volume(data, spacing=spacing, origin=(0.0, 0.0, 0.0), intensity_kind="HU")
