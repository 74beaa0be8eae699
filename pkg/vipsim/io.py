"""On-disk formats for frames and spectra.

Frame file (little-endian)::

    magic "VIPF" | version u8 | ccd_id u8 | frame_index u32 |
    rows u16 | cols u16 | exposure_min f32 | rows*cols u16 ADU, row-major

Spectrum: ``<name>.csv`` with header ``bin_lo_eV,counts`` and a JSON
sidecar ``<name>.json`` holding mode, exposure and bin width.
"""

import csv
import io
import os
import struct

import numpy as np

from vipsim.exceptions import FrameFormatError
from vipsim.model import Frame, Spectrum
from vipsim.utils import load_json, save_json, write_atomic

FRAME_MAGIC = b"VIPF"
FRAME_VERSION = 1
_HEADER = struct.Struct("<4sBBIHHf")


def encode_frame(frame):
    rows, cols = frame.shape
    if rows > 0xFFFF or cols > 0xFFFF:
        raise FrameFormatError(f"frame {rows}x{cols} does not fit the u16 header fields")
    header = _HEADER.pack(
        FRAME_MAGIC,
        FRAME_VERSION,
        frame.ccd_id,
        frame.frame_index,
        rows,
        cols,
        frame.exposure_min,
    )
    return header + frame.pixels.astype("<u2", copy=False).tobytes(order="C")


def decode_frame(blob, expected_shape=None):
    if len(blob) < _HEADER.size:
        raise FrameFormatError(f"truncated header: {len(blob)} bytes")
    magic, version, ccd_id, frame_index, rows, cols, exposure = _HEADER.unpack_from(blob)
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameFormatError(f"unsupported frame format version {version}")
    if expected_shape is not None and (rows, cols) != tuple(expected_shape):
        raise FrameFormatError(
            f"frame is {rows}x{cols}, expected {expected_shape[0]}x{expected_shape[1]}"
        )
    n_payload = len(blob) - _HEADER.size
    if n_payload != 2 * rows * cols:
        raise FrameFormatError(
            f"payload is {n_payload} bytes, header declares {2 * rows * cols}"
        )
    pixels = np.frombuffer(blob, dtype="<u2", offset=_HEADER.size).reshape(rows, cols)
    return Frame(ccd_id, frame_index, float(exposure), pixels.astype(np.uint16))


def write_frame(frame, path):
    write_atomic(path, encode_frame(frame))


def read_frame(path, expected_shape=None):
    with open(path, "rb") as f:
        return decode_frame(f.read(), expected_shape)


def frame_filename(ccd_id, frame_index):
    return f"ccd{ccd_id:02d}_frame{frame_index:06d}.vipf"


# --- Spectra


def _sidecar(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def write_spectrum(spectrum, path):
    """Write ``path`` (CSV) and its JSON metadata sidecar."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_lo_eV", "counts"])
    for lo, n in zip(spectrum.edges[:-1], spectrum.counts):
        writer.writerow([repr(float(lo)), int(n)])
    write_atomic(path, buf.getvalue())
    save_json(
        _sidecar(path),
        {
            "mode": spectrum.mode,
            "exposure_min": spectrum.exposure_min,
            "bin_lo_eV": spectrum.bin_lo_eV,
            "bin_width_eV": spectrum.bin_width_eV,
            "n_bins": len(spectrum.counts),
        },
    )


def read_spectrum(path):
    meta = load_json(_sidecar(path))
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["bin_lo_eV", "counts"]:
            raise ValueError(f"{path}: unexpected header {header}")
        counts = [int(row[1]) for row in reader if row]
    if len(counts) != meta["n_bins"]:
        raise ValueError(f"{path}: {len(counts)} rows, sidecar declares {meta['n_bins']}")
    return Spectrum(
        bin_lo_eV=meta["bin_lo_eV"],
        bin_width_eV=meta["bin_width_eV"],
        counts=np.array(counts, dtype=np.int64),
        exposure_min=meta["exposure_min"],
        mode=meta["mode"],
    )
