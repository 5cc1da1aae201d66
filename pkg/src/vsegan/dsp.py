"""Signal front-end: STFT, log-mel segments, mel inversion and SNR mixing.

All analysis runs at 16 kHz with a periodic Hann window of 640 samples
(40 ms) and a hop of 160 samples (10 ms). Log-mel spectrograms use 80 HTK
mel bands between 0 and 8 kHz and are cut into non-overlapping 20-frame
(200 ms) segments, each paired with 5 video frames at 25 fps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, signal

from .errors import ContractViolation

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 640
HOP_LENGTH = 160
N_BINS = WIN_LENGTH // 2 + 1  # 321
N_MELS = 80
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10
SEGMENT_FRAMES = 20
VIDEO_FPS = 25
VIDEO_FRAMES_PER_SEGMENT = 5
FRAME_SIZE = 80
SEGMENT_SAMPLES = SEGMENT_FRAMES * HOP_LENGTH  # 3200 samples = 200 ms
# steady-state overlap of the squared window is 1.5
NORM_FLOOR = 0.1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ContractViolation("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class LogMelSegment:
    """One 80x20 log-mel slice plus the affine map that normalised it."""

    values: np.ndarray
    norm_mean: float = 0.0
    norm_scale: float = 1.0

    def __post_init__(self):
        if self.values.shape != (N_MELS, SEGMENT_FRAMES):
            raise ContractViolation(f"log-mel segment must be {N_MELS}x{SEGMENT_FRAMES}, got {self.values.shape}")


@dataclass
class VideoSegment:
    frames: np.ndarray

    def __post_init__(self):
        shape = (VIDEO_FRAMES_PER_SEGMENT, FRAME_SIZE, FRAME_SIZE)
        if self.frames.shape != shape:
            raise ContractViolation(f"video segment must be {shape}, got {self.frames.shape}")
        if self.frames.min(initial=0.0) < 0.0 or self.frames.max(initial=0.0) > 1.0:
            raise ContractViolation("video frame values must lie in [0, 1]")


def _samples(x) -> np.ndarray:
    if isinstance(x, Waveform):
        if x.sample_rate_hz != SAMPLE_RATE:
            raise ContractViolation(
                f"expected {SAMPLE_RATE} Hz audio, got {x.sample_rate_hz} Hz; resample first")
        return x.samples
    return np.asarray(x, dtype=np.float64)


@lru_cache(maxsize=None)
def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    window = signal.get_window("hann", length, fftbins=True)
    window.setflags(write=False)
    return window


def n_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


# ---------------------------------------------------------------- STFT

def stft(x) -> np.ndarray:
    """Complex one-sided spectrogram, shape ``[frames, 321]``."""
    samples = _samples(x)
    if samples.ndim != 1 or len(samples) < WIN_LENGTH:
        raise ContractViolation(f"stft needs a 1-D signal of at least {WIN_LENGTH} samples, got {samples.shape}")
    frames = np.lib.stride_tricks.sliding_window_view(samples, WIN_LENGTH)[::HOP_LENGTH]
    return np.fft.rfft(frames * hann_window(), n=WIN_LENGTH, axis=-1)


def istft(spec: np.ndarray, length: int | None = None) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is windowed again and the sum is divided by the overlapped
    squared window. The divisor is floored at ``NORM_FLOOR`` so the first
    and last few milliseconds, where fewer than four frames overlap, cannot
    amplify magnitude errors; ``istft(stft(x))`` is exact everywhere the
    overlap is complete.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise ContractViolation(f"istft expects [frames, {N_BINS}] input, got {spec.shape}")
    count = spec.shape[0]
    total = (count - 1) * HOP_LENGTH + WIN_LENGTH if count else 0
    window = hann_window()
    frames = np.fft.irfft(spec, n=WIN_LENGTH, axis=-1) * window
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(count):
        start = i * HOP_LENGTH
        out[start:start + WIN_LENGTH] += frames[i]
        norm[start:start + WIN_LENGTH] += window * window
    out /= np.maximum(norm, NORM_FLOOR)
    if length is not None:
        if length > total:
            out = np.pad(out, (0, length - total))
        out = out[:length]
    return Waveform(out)


# ------------------------------------------------------------- log-mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WIN_LENGTH, sample_rate: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular HTK-mel filters with unit peak, shape ``[n_mels, n_fft//2 + 1]``."""
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (centre - lower)
    falling = (upper - bins[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def log_mel_spectrogram(magnitude: np.ndarray) -> np.ndarray:
    """``[frames, 321]`` magnitudes to ``[80, frames]`` log-mel values."""
    magnitude = np.asarray(magnitude)
    if magnitude.ndim != 2 or magnitude.shape[1] != N_BINS:
        raise ContractViolation(f"log_mel expects [frames, {N_BINS}] magnitudes, got {magnitude.shape}")
    return np.log(mel_filterbank() @ magnitude.T + LOG_FLOOR)


def slice_segments(log_mel: np.ndarray, max_segments: int | None = None) -> np.ndarray:
    """Cut ``[80, frames]`` into ``[S, 80, 20]``, dropping the trailing partial slice."""
    count = log_mel.shape[1] // SEGMENT_FRAMES
    if max_segments is not None:
        count = min(count, max_segments)
    used = log_mel[:, :count * SEGMENT_FRAMES]
    return np.ascontiguousarray(used.reshape(N_MELS, count, SEGMENT_FRAMES).transpose(1, 0, 2))


def log_mel(spec: np.ndarray) -> np.ndarray:
    """Complex or magnitude spectrogram to a stream of 80x20 log-mel segments."""
    return slice_segments(log_mel_spectrogram(np.abs(spec)))


def join_segments(segments: np.ndarray) -> np.ndarray:
    """Inverse of :func:`slice_segments`: ``[S, 80, 20] -> [80, S*20]``."""
    s = segments.shape[0]
    return segments.transpose(1, 0, 2).reshape(N_MELS, s * SEGMENT_FRAMES)


def segment_count(n_samples: int, n_video_frames: int | None = None) -> int:
    """Number of aligned 200 ms segments available in an utterance."""
    count = max(int(n_samples), 0) // SEGMENT_SAMPLES
    if n_video_frames is not None:
        count = min(count, n_video_frames // VIDEO_FRAMES_PER_SEGMENT)
    return count


def segment_spectrogram(x, count: int) -> np.ndarray:
    """STFT frames ``[count*20, 321]`` covering the first ``count`` segments.

    The signal is cut to ``count * 3200`` samples and padded with
    ``WIN_LENGTH - HOP_LENGTH`` zeros so that frame ``i`` starts at sample
    ``160 * i`` and exactly 20 frames fall in each 200 ms segment.
    """
    samples = _samples(x)
    used = count * SEGMENT_SAMPLES
    if count < 1 or len(samples) < used:
        raise ContractViolation(f"signal of {len(samples)} samples holds fewer than {count} segments")
    padded = np.concatenate([samples[:used], np.zeros(WIN_LENGTH - HOP_LENGTH)])
    return stft(padded)[:count * SEGMENT_FRAMES]


def video_segments(frames: np.ndarray, count: int | None = None) -> np.ndarray:
    """``[T, 80, 80]`` frames to ``[S, 5, 80, 80]`` non-overlapping segments."""
    available = frames.shape[0] // VIDEO_FRAMES_PER_SEGMENT
    count = available if count is None else min(count, available)
    used = frames[:count * VIDEO_FRAMES_PER_SEGMENT]
    return used.reshape(count, VIDEO_FRAMES_PER_SEGMENT, *frames.shape[1:])


# ----------------------------------------------------------- inversion

def nnls_mel_inverse(mel: np.ndarray, maxiter: int = 200) -> np.ndarray:
    """Non-negative least-squares magnitudes ``[frames, 321]`` from mel energies ``[80, frames]``.

    Starts at the minimum-norm least-squares solution, clipped at zero, and
    refines all frames jointly with bound-constrained L-BFGS.
    """
    fb = mel_filterbank()
    target = np.asarray(mel, dtype=np.float64)
    x0 = np.maximum(np.linalg.pinv(fb) @ target, 0.0)
    if not np.any(target > 0):
        return np.zeros((target.shape[1], N_BINS))
    scale = max(float(np.max(np.abs(target))), 1e-30)
    target_s = target / scale

    def objective(flat):
        x = flat.reshape(x0.shape)
        resid = fb @ x - target_s
        return 0.5 * float(np.sum(resid * resid)), (fb.T @ resid).ravel()

    result = optimize.minimize(objective, (x0 / scale).ravel(), jac=True, method="L-BFGS-B",
                               bounds=[(0.0, None)] * x0.size, options={"maxiter": maxiter})
    return (np.maximum(result.x, 0.0).reshape(x0.shape) * scale).T


def mel_pseudo_inverse(log_mel_values: np.ndarray, noisy_phase: np.ndarray,
                       length: int | None = None) -> Waveform:
    """Waveform from log-mel values ``[80, T]`` (or segments ``[S, 80, 20]``) and a phase source.

    ``noisy_phase`` is the complex spectrogram whose phase is reused; it
    must cover at least the same ``T`` frames.
    """
    values = np.asarray(log_mel_values, dtype=np.float64)
    if values.ndim == 3:
        values = join_segments(values)
    frames = values.shape[1]
    if noisy_phase.ndim != 2 or noisy_phase.shape[0] < frames or noisy_phase.shape[1] != N_BINS:
        raise ContractViolation(
            f"phase spectrogram {noisy_phase.shape} does not cover {frames} log-mel frames")
    mel = np.maximum(np.exp(values) - LOG_FLOOR, 0.0)
    magnitude = nnls_mel_inverse(mel)
    phase = np.angle(noisy_phase[:frames])
    return istft(magnitude * np.exp(1j * phase), length=length)


# -------------------------------------------------------- normalisation

@dataclass(frozen=True)
class NormStats:
    """Corpus log-mel range, from the training split only."""

    minimum: float
    maximum: float
    margin: float = 0.01

    @property
    def mean(self) -> float:
        return 0.5 * (self.minimum + self.maximum)

    @property
    def scale(self) -> float:
        return 0.5 * (self.maximum - self.minimum) * (1.0 + 2.0 * self.margin)

    @classmethod
    def from_arrays(cls, arrays) -> "NormStats":
        lo = min(float(np.min(a)) for a in arrays)
        hi = max(float(np.max(a)) for a in arrays)
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "maximum": self.maximum, "margin": self.margin}


def normalize(values: np.ndarray, stats: NormStats | None) -> np.ndarray:
    """Affine map of log-mel values into [-1, 1] using the corpus range plus a 1% margin."""
    if stats is None:
        raise ContractViolation("normalisation statistics are missing")
    return np.clip((np.asarray(values) - stats.mean) / stats.scale, -1.0, 1.0)


def denormalize(values: np.ndarray, stats: NormStats | None) -> np.ndarray:
    if stats is None:
        raise ContractViolation("normalisation statistics are missing")
    return np.asarray(values, dtype=np.float64) * stats.scale + stats.mean


def normalize_segment(seg: LogMelSegment, stats: NormStats) -> LogMelSegment:
    return LogMelSegment(normalize(seg.values, stats), stats.mean, stats.scale)


def denormalize_segment(seg: LogMelSegment) -> LogMelSegment:
    return LogMelSegment(seg.values * seg.norm_scale + seg.norm_mean)


# -------------------------------------------------------------- mixing

def power(x) -> float:
    samples = _samples(x)
    return float(np.mean(samples * samples))


def fit_length(noise, n: int) -> np.ndarray:
    """Tile (if short) then crop ``noise`` to exactly ``n`` samples."""
    samples = _samples(noise)
    if len(samples) == 0:
        raise ContractViolation("noise is empty")
    if len(samples) < n:
        samples = np.tile(samples, -(-n // len(samples)))
    return samples[:n]


def snr_gain(clean, noise, snr_db: float) -> float:
    """Amplitude factor putting ``noise`` at ``snr_db`` below ``clean``."""
    pc, pn = power(clean), power(noise)
    if pc <= 0.0 or pn <= 0.0:
        raise ContractViolation("mixing needs non-zero clean and noise power")
    return float(np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(clean, noise, snr_db: float) -> Waveform:
    clean_s = _samples(clean)
    noise_s = fit_length(noise, len(clean_s))
    mixed = clean_s + snr_gain(clean_s, noise_s, snr_db) * noise_s
    peak = float(np.max(np.abs(mixed), initial=0.0))
    if peak > 1.0:
        log.warning("mixture peak %.3f exceeds full scale", peak)
    return Waveform(mixed)


def measured_snr_db(clean, noise_component) -> float:
    return 10.0 * np.log10(power(clean) / power(noise_component))


AUGMENT_RANGE_DB = (-15.0, 0.0)


def augment(rng: np.random.Generator, low: float = AUGMENT_RANGE_DB[0],
            high: float = AUGMENT_RANGE_DB[1]) -> float:
    """Draw one noise attenuation in dB, uniform on ``[low, high]``."""
    return float(rng.uniform(low, high))


def attenuation_db(seed: int, iteration: int, index: int = 0,
                   low: float = AUGMENT_RANGE_DB[0], high: float = AUGMENT_RANGE_DB[1]) -> float:
    """Attenuation for batch item ``index`` of a given training iteration."""
    return augment(np.random.default_rng([seed, iteration, index]), low, high)


def attenuate(noise, db: float) -> np.ndarray:
    return _samples(noise) * 10.0 ** (db / 20.0)
