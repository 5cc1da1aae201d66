"""Objective speech metrics: STOI, SI-SDR and log-spectral distance.

STOI follows the classic short-time objective intelligibility measure:
10 kHz analysis, removal of frames more than 40 dB below the loudest clean
frame, 15 one-third-octave bands from 150 Hz, 384 ms envelope segments,
clipping at -15 dB signal-to-distortion and mean correlation.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import signal

from . import dsp
from .errors import ContractViolation

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30  # frames of 12.8 ms hop -> 384 ms
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
SISDR_CAP_DB = 100.0
EPS = np.finfo(np.float64).eps


@lru_cache(maxsize=None)
def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Binary band-selection matrix ``[bands, nfft//2 + 1]``."""
    f = np.linspace(0, fs, nfft + 1)[:nfft // 2 + 1]
    k = np.arange(num_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo_bin = int(np.argmin((f - lo[i]) ** 2))
        hi_bin = int(np.argmin((f - hi[i]) ** 2))
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _frames(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    if len(x) < size:
        return np.zeros((0, size))
    return np.lib.stride_tricks.sliding_window_view(x, size)[::hop]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, size: int, hop: int):
    window = np.hanning(size + 2)[1:-1]
    fx = _frames(x, size, hop) * window
    fy = _frames(y, size, hop) * window
    energy = 20.0 * np.log10(np.linalg.norm(fx, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range
    fx, fy = fx[keep], fy[keep]
    n = len(fx)
    length = (n - 1) * hop + size if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + size] += fx[i]
        ys[i * hop:i * hop + size] += fy[i]
    return xs, ys


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    window = np.hanning(STOI_FRAME + 2)[1:-1]
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * window
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(third_octave_matrix() @ (np.abs(spec) ** 2).T)  # bands x frames


def stoi(clean, degraded, sample_rate: int = dsp.SAMPLE_RATE) -> float:
    """Short-time objective intelligibility in [0, 1] (values can dip slightly below 0)."""
    x = np.asarray(clean.samples if isinstance(clean, dsp.Waveform) else clean, dtype=np.float64)
    y = np.asarray(degraded.samples if isinstance(degraded, dsp.Waveform) else degraded, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation(f"stoi needs equal-length 1-D signals, got {x.shape} and {y.shape}")
    if len(x) < int(0.384 * sample_rate):
        raise ContractViolation("stoi needs at least 384 ms of signal")
    if sample_rate != STOI_FS:
        x = signal.resample_poly(x, STOI_FS, sample_rate)
        y = signal.resample_poly(y, STOI_FS, sample_rate)
    x, y = _remove_silent_frames(x, y, STOI_DYN_RANGE_DB, STOI_FRAME, STOI_FRAME // 2)
    ex, ey = _band_envelopes(x), _band_envelopes(y)
    n_frames = ex.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ContractViolation("stoi: fewer than 384 ms of non-silent speech remain")

    clip = 10.0 ** (-STOI_BETA_DB / 20.0)
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = ex[:, m - STOI_SEGMENT:m]
        ys = ey[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + EPS)
        yp = np.minimum(ys * alpha, xs * (1.0 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        xc /= np.linalg.norm(xc, axis=1, keepdims=True) + EPS
        yc /= np.linalg.norm(yc, axis=1, keepdims=True) + EPS
        scores.append(np.sum(xc * yc, axis=1))
    return float(np.mean(scores))


def si_sdr(reference, estimate) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +100 dB."""
    r = np.asarray(reference.samples if isinstance(reference, dsp.Waveform) else reference, dtype=np.float64)
    e = np.asarray(estimate.samples if isinstance(estimate, dsp.Waveform) else estimate, dtype=np.float64)
    if r.shape != e.shape:
        raise ContractViolation(f"si_sdr needs equal lengths, got {r.shape} and {e.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy <= 0.0:
        raise ContractViolation("si_sdr reference is all zeros")
    target = (np.dot(e, r) / ref_energy) * r
    residual = e - target
    t, n = float(np.dot(target, target)), float(np.dot(residual, residual))
    if n <= t * 10.0 ** (-SISDR_CAP_DB / 10.0):
        return SISDR_CAP_DB
    if t <= 0.0:
        return -SISDR_CAP_DB
    return float(10.0 * np.log10(t / n))


def lsd(clean_spec: np.ndarray, enhanced_spec: np.ndarray, floor: float = 1e-10) -> float:
    """Log-spectral distance in dB between two ``[frames, bins]`` magnitude spectrograms."""
    a = np.abs(np.asarray(clean_spec))
    b = np.abs(np.asarray(enhanced_spec))
    if a.shape != b.shape or a.ndim != 2:
        raise ContractViolation(f"lsd needs aligned 2-D spectrograms, got {a.shape} and {b.shape}")
    diff = 20.0 * (np.log10(np.maximum(a, floor)) - np.log10(np.maximum(b, floor)))
    per_frame = np.sqrt(np.mean(diff ** 2, axis=1))
    return float(np.sqrt(np.mean(per_frame ** 2)))
