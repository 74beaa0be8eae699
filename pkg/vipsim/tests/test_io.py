import numpy as np
import pytest

from vipsim.exceptions import FrameFormatError
from vipsim.io import (
    decode_frame,
    encode_frame,
    frame_filename,
    read_frame,
    read_spectrum,
    write_frame,
    write_spectrum,
)
from vipsim.model import Frame, Spectrum
from vipsim.utils import sha256_file

HEADER_SIZE = 18


def test_zero_frame_round_trip(tmp_path):
    frame = Frame(3, 17, 10.0, np.zeros((8, 8), dtype=np.uint16))
    write_frame(frame, tmp_path / "f.vipf")
    assert read_frame(tmp_path / "f.vipf") == frame


def test_saturated_pixel_round_trip(tmp_path):
    pixels = np.zeros((8, 12), dtype=np.uint16)
    pixels[2, 5] = 65535
    frame = Frame(255, 2 ** 32 - 1, 10.0, pixels)
    write_frame(frame, tmp_path / "f.vipf")
    back = read_frame(tmp_path / "f.vipf", expected_shape=(8, 12))
    assert back == frame
    assert back.pixels[2, 5] == 65535


def test_layout():
    pixels = np.arange(6, dtype=np.uint16).reshape(2, 3)
    blob = encode_frame(Frame(1, 2, 10.0, np.pad(pixels, ((0, 6), (0, 5)))))
    assert blob[:4] == b"VIPF"
    assert blob[4] == 1
    assert blob[5] == 1
    assert len(blob) == HEADER_SIZE + 2 * 8 * 8
    # Row-major little-endian payload.
    assert blob[HEADER_SIZE:HEADER_SIZE + 6] == b"\x00\x00\x01\x00\x02\x00"


def test_exposure_is_stored_as_float32(tmp_path):
    frame = Frame(0, 0, 10.1, np.zeros((8, 8)))
    assert frame.exposure_min == float(np.float32(10.1))
    assert decode_frame(encode_frame(frame)) == frame


def test_writes_are_deterministic(tmp_path):
    rng = np.random.default_rng(1234)
    frame = Frame(0, 0, 10.0, rng.integers(0, 65536, size=(512, 512)))
    write_frame(frame, tmp_path / "a.vipf")
    write_frame(frame, tmp_path / "b.vipf")
    assert sha256_file(tmp_path / "a.vipf") == sha256_file(tmp_path / "b.vipf")
    assert read_frame(tmp_path / "a.vipf") == frame


def _blob():
    return encode_frame(Frame(0, 0, 10.0, np.ones((8, 8))))


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x07" + b[5:],
        lambda b: b[:-1],
        lambda b: b[:10],
        lambda b: b + b"\x00\x00",
    ],
)
def test_corrupt_frames(corrupt):
    with pytest.raises(FrameFormatError):
        decode_frame(corrupt(_blob()))


def test_dimension_mismatch():
    with pytest.raises(FrameFormatError):
        decode_frame(_blob(), expected_shape=(600, 600))


def test_frame_filename():
    assert frame_filename(3, 42) == "ccd03_frame000042.vipf"


def test_spectrum_round_trip(tmp_path):
    spectrum = Spectrum(2000.0, 32.0, np.array([0, 5, 1000, 3]), 150.0, "current_on")
    write_spectrum(spectrum, tmp_path / "on.csv")
    assert (tmp_path / "on.csv").read_text().splitlines()[:2] == ["bin_lo_eV,counts", "2000.0,0"]
    assert (tmp_path / "on.json").exists()
    assert read_spectrum(tmp_path / "on.csv") == spectrum


def test_spectrum_sidecar_mismatch(tmp_path):
    spectrum = Spectrum(2000.0, 32.0, np.array([1, 2]), 150.0, "current_off")
    write_spectrum(spectrum, tmp_path / "off.csv")
    with open(tmp_path / "off.csv", "a") as f:
        f.write("2064.0,7\n")
    with pytest.raises(ValueError):
        read_spectrum(tmp_path / "off.csv")
