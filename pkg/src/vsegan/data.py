"""Segment-level training data assembled from a manifest.

Each utterance's clean and noise STFTs are cached once. A noisy segment for
any SNR is then ``S_clean + g * S_noise``, which equals the STFT of the
time-domain mixture because the transform is linear. Per-iteration
attenuation augmentation therefore costs one log-mel projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .corpus import load_row


@dataclass
class CachedUtterance:
    name: str
    clean_spec: np.ndarray  # [frames, 321] complex64
    noise_spec: np.ndarray
    gain: float  # noise amplitude gain at the manifest SNR
    frames: np.ndarray  # [segments*5, 80, 80] uint8
    n_segments: int


@dataclass
class Batch:
    clean: np.ndarray  # [B, 1, 80, 20], normalised
    noisy: np.ndarray  # [B, 1, 80, 20], normalised
    video: np.ndarray  # [B, 5, 80, 80] in [0, 1]
    items: list


class SegmentDataset:
    def __init__(self, manifest: dict):
        root = manifest.get("_root")
        self.utterances: list[CachedUtterance] = []
        for row in manifest["rows"]:
            utt = load_row(row, root)
            n_seg = dsp.segment_count(len(utt.clean), len(utt.frames))
            if n_seg == 0:
                continue
            self.utterances.append(CachedUtterance(
                utt.name,
                dsp.segment_spectrogram(utt.clean, n_seg).astype(np.complex64),
                dsp.segment_spectrogram(utt.noise, n_seg).astype(np.complex64),
                dsp.snr_gain(utt.clean, utt.noise, utt.snr_db),
                utt.frames[:n_seg * dsp.VIDEO_FRAMES_PER_SEGMENT],
                n_seg,
            ))
        self.items = [(u, s) for u, utt in enumerate(self.utterances) for s in range(utt.n_segments)]

    def __len__(self) -> int:
        return len(self.items)

    def _segment_specs(self, item):
        u, s = item
        utt = self.utterances[u]
        sl = slice(s * dsp.SEGMENT_FRAMES, (s + 1) * dsp.SEGMENT_FRAMES)
        return utt, utt.clean_spec[sl], utt.noise_spec[sl]

    def log_mels(self, item, attenuation_db: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Clean and noisy 80x20 log-mel values (not normalised) for one segment."""
        utt, clean, noise = self._segment_specs(item)
        gain = utt.gain * 10.0 ** (attenuation_db / 20.0)
        noisy = clean + np.float32(gain) * noise
        return (dsp.log_mel_spectrogram(np.abs(clean).astype(np.float64)),
                dsp.log_mel_spectrogram(np.abs(noisy).astype(np.float64)))

    def video(self, item) -> np.ndarray:
        u, s = item
        k = dsp.VIDEO_FRAMES_PER_SEGMENT
        return self.utterances[u].frames[s * k:(s + 1) * k].astype(np.float32) / 255.0

    def norm_stats(self) -> dsp.NormStats:
        """Range of clean and noisy (manifest SNR) log-mel values over every segment."""
        lo, hi = np.inf, -np.inf
        for item in self.items:
            for values in self.log_mels(item):
                lo = min(lo, float(values.min()))
                hi = max(hi, float(values.max()))
        return dsp.NormStats(lo, hi if hi > lo else lo + 1.0)

    def batch(self, items, stats: dsp.NormStats, attenuations=None, dtype=np.float32) -> Batch:
        attenuations = attenuations if attenuations is not None else [0.0] * len(items)
        clean, noisy, video = [], [], []
        for item, att in zip(items, attenuations):
            c, n = self.log_mels(item, att)
            clean.append(dsp.normalize(c, stats))
            noisy.append(dsp.normalize(n, stats))
            video.append(self.video(item))
        return Batch(
            np.stack(clean)[:, None].astype(dtype),
            np.stack(noisy)[:, None].astype(dtype),
            np.stack(video).astype(dtype),
            list(items),
        )
