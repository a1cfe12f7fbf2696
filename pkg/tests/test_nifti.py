"""NIfTI-1 import tests. The reference writer below packs header fields at the
offsets fixed by the format, independently of the reader's parsing."""

import struct

import numpy as np
import pytest

from cardiseg.errors import FormatError, UnsupportedFormatError
from cardiseg.volumes import read_volume


def write_reference_nifti(
    path,
    data,
    spacing=(1.0, 1.0, 1.0),
    scl_slope=0.0,
    scl_inter=0.0,
    datatype=None,
):
    codes = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32)}
    code, bitpix = codes[np.dtype(data.dtype)] if datatype is None else (datatype, 0)
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    dim = (3,) + data.shape + (1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = (1.0,) + tuple(spacing) + (0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, scl_slope, scl_inter)
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(np.asfortranarray(data).tobytes(order="F"))


def test_nifti_scaling_applied(tmp_path):
    data = np.full((3, 3, 3), 5, dtype=np.int16)
    p = tmp_path / "scaled.nii"
    write_reference_nifti(p, data, spacing=(0.5, 0.5, 2.0), scl_slope=2.0, scl_inter=10.0)
    v = read_volume(p)
    assert np.all(v.data == 20.0)
    assert v.spacing == (0.5, 0.5, 2.0)


def test_nifti_no_scaling_keeps_dtype(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    p = tmp_path / "plain.nii"
    write_reference_nifti(p, data)
    v = read_volume(p)
    assert v.data.dtype == np.int16
    assert np.array_equal(v.data, data)


def test_nifti_fortran_axis_order(tmp_path):
    data = np.zeros((4, 3, 2), dtype=np.int16)
    data[1, 0, 0] = 7
    data[0, 2, 1] = 9
    p = tmp_path / "order.nii"
    write_reference_nifti(p, data)
    v = read_volume(p)
    assert v.shape == (4, 3, 2)
    assert v.data[1, 0, 0] == 7 and v.data[0, 2, 1] == 9


def test_nifti_unsupported_datatype(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.int16)
    p = tmp_path / "f64.nii"
    write_reference_nifti(p, data, datatype=64)  # float64 code
    with pytest.raises(UnsupportedFormatError):
        read_volume(p)


def test_nifti_bad_header(tmp_path):
    p = tmp_path / "junk.nii"
    p.write_bytes(b"\x00" * 352)
    with pytest.raises(FormatError):
        read_volume(p)


def test_nifti_truncated_payload(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.int16)
    p = tmp_path / "trunc.nii"
    write_reference_nifti(p, data)
    raw = p.read_bytes()
    p.write_bytes(raw[:-20])
    with pytest.raises(FormatError):
        read_volume(p)
