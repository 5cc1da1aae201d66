import struct
import wave

import numpy as np
import pytest

from vsegan import io
from vsegan.errors import ContractViolation


def write_raw_wav(path, channels=1, width=2, rate=16000, frames=b"\x00\x00" * 100):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(frames)


def test_wav_round_trip_within_one_lsb(tmp_path):
    x = np.sin(np.linspace(0, 40, 1600)) * 0.7
    io.write_wav(tmp_path / "a.wav", x)
    y = io.read_wav(tmp_path / "a.wav")
    assert y.sample_rate_hz == 16000
    assert np.abs(y.samples - x).max() <= 1 / 32768


def test_wav_header_is_pcm16_mono(tmp_path):
    io.write_wav(tmp_path / "a.wav", np.zeros(10))
    raw = (tmp_path / "a.wav").read_bytes()
    fmt_tag, channels, rate = struct.unpack_from("<HHI", raw, 20)
    assert (fmt_tag, channels, rate) == (1, 1, 16000)
    assert struct.unpack_from("<H", raw, 34)[0] == 16


def test_write_clips_out_of_range(tmp_path):
    io.write_wav(tmp_path / "a.wav", np.array([2.0, -2.0]))
    y = io.read_wav(tmp_path / "a.wav").samples
    assert y.max() < 1.0 and y.min() >= -1.0


@pytest.mark.parametrize("kwargs, message", [
    ({"channels": 2, "frames": b"\x00\x00" * 200}, "mono"),
    ({"width": 1, "frames": b"\x80" * 100}, "16-bit"),
    ({"rate": 44100}, "16000"),
])
def test_wav_rejects_other_formats(tmp_path, kwargs, message):
    write_raw_wav(tmp_path / "bad.wav", **kwargs)
    with pytest.raises(ContractViolation, match=message):
        io.read_wav(tmp_path / "bad.wav")


def test_pgm_round_trip_and_header(tmp_path):
    img = np.arange(80 * 30, dtype=np.uint16).reshape(80, 30).astype(np.uint8)
    io.write_pgm(tmp_path / "x.pgm", img)
    assert (tmp_path / "x.pgm").read_bytes().startswith(b"P5\n30 80\n255\n")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "x.pgm"), img)


def test_pgm_needs_uint8(tmp_path):
    with pytest.raises(ContractViolation):
        io.write_pgm(tmp_path / "x.pgm", np.zeros((4, 4)))


def test_minmax_mapping():
    out = io.to_uint8_minmax(np.array([[-3.0, 0.0, 5.0]]))
    assert out.dtype == np.uint8
    assert out.min() == 0 and out.max() == 255
    assert io.to_uint8_minmax(np.ones((2, 2))).max() == 0


def test_frames_dir_round_trip(tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, (7, 80, 80)).astype(np.uint8)
    io.write_frames_dir(tmp_path / "f", frames)
    assert sorted(p.name for p in (tmp_path / "f").iterdir())[0] == "00000.pgm"
    np.testing.assert_array_equal(io.read_frames_dir(tmp_path / "f"), frames)


def test_frames_dir_errors(tmp_path):
    with pytest.raises(ContractViolation):
        io.read_frames_dir(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(ContractViolation):
        io.read_frames_dir(tmp_path / "empty")


def test_missing_files_are_contract_violations(tmp_path):
    with pytest.raises(ContractViolation, match="cannot read"):
        io.read_wav(tmp_path / "none.wav")
    with pytest.raises(ContractViolation, match="cannot read"):
        io.read_pgm(tmp_path / "none.pgm")
