"""WAV (16-bit PCM mono, 16 kHz) and binary PGM (8-bit) file I/O."""

from __future__ import annotations

import os
import wave
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, Waveform
from .errors import ContractViolation


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ContractViolation(f"{path}: not a PCM WAV file ({exc})") from exc
    except OSError as exc:
        raise ContractViolation(f"cannot read {path}: {exc.strerror or exc}") from exc
    if channels != 1 or width != 2:
        raise ContractViolation(
            f"{path}: expected 16-bit mono PCM, got {channels} channel(s) of {8 * width}-bit samples")
    if rate != SAMPLE_RATE:
        raise ContractViolation(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz; resample first")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, waveform) -> None:
    if isinstance(waveform, Waveform):
        if waveform.sample_rate_hz != SAMPLE_RATE:
            raise ContractViolation(f"refusing to write {waveform.sample_rate_hz} Hz audio")
        samples = waveform.samples
    else:
        samples = np.asarray(waveform, dtype=np.float64)
    pcm = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit greyscale image (rows x columns) as binary P5 PGM."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ContractViolation(f"PGM export needs a 2-D uint8 array, got {image.dtype} {image.shape}")
    rows, cols = image.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ContractViolation(f"cannot read {path}: {exc.strerror or exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ContractViolation(f"{path}: only 8-bit binary PGM (P5, maxval 255) is supported")
    cols, rows = int(tokens[1]), int(tokens[2])
    body = data[pos:pos + rows * cols]
    if len(body) != rows * cols:
        raise ContractViolation(f"{path}: truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols).copy()


def to_uint8_minmax(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def read_frames_dir(path) -> np.ndarray:
    """Load every ``*.pgm`` in a directory, in name order, as ``[T, H, W]`` uint8."""
    path = Path(path)
    if not path.is_dir():
        raise ContractViolation(f"frames directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise ContractViolation(f"frames directory {path} contains no .pgm images")
    frames = [read_pgm(p) for p in files]
    if any(f.shape != frames[0].shape for f in frames):
        raise ContractViolation(f"frames in {path} have differing sizes")
    return np.stack(frames)


def write_frames_dir(path, frames: np.ndarray) -> None:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(frames):
        write_pgm(path / f"{i:05d}.pgm", frame)
