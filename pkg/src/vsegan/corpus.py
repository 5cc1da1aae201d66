"""Deterministic synthetic audio-visual corpus.

Utterances are harmonic "vowel" streams with a wandering pitch, formant
weighting and a 3-6 Hz syllabic envelope. The matching video shows a mouth
ellipse whose opening follows that envelope. Twelve synthetic noise
categories stand in for recorded interference. Everything is a pure
function of integer seeds, so a manifest is enough to rebuild the corpus.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import signal

from . import dsp
from .errors import ContractViolation

SR = dsp.SAMPLE_RATE
FPS = dsp.VIDEO_FPS
FRAME = dsp.FRAME_SIZE
CLEAN_RMS = 0.05
NOISE_FLOOR_DB = -60.0  # recording floor relative to the speech RMS


@dataclass
class SynthUtterance:
    clean: dsp.Waveform
    frames: np.ndarray  # [T, 80, 80] uint8
    seed: int
    duration_s: float
    envelope: np.ndarray = field(repr=False)
    aperture: np.ndarray = field(repr=False)


def _utterance_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([0x5EED, int(seed)])


def _syllable_envelope(rng, t: np.ndarray) -> np.ndarray:
    rate = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0.0, 1.0)
    position = rate * t + phase
    index = np.floor(position).astype(int)
    n_syll = index.max() + 1
    amps = rng.uniform(0.35, 1.0, n_syll)
    amps[rng.random(n_syll) < 0.15] = 0.0  # short pauses
    shape = np.sin(np.pi * (position - index)) ** 2
    return amps[index] * shape


def _pitch_track(rng, n: int) -> np.ndarray:
    control = max(2, n // 160 + 2)
    steps = rng.normal(0.0, 4.0, control)
    f0 = np.empty(control)
    f0[0] = rng.uniform(100.0, 240.0)
    for i in range(1, control):
        f0[i] = np.clip(f0[i - 1] + steps[i], 90.0, 300.0)
    return np.interp(np.arange(n), np.linspace(0, n - 1, control), f0)


def _render_mouth(aperture: float, width: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME, 0:FRAME].astype(np.float64)
    cy, cx = 48.0 + rng.normal(0, 0.3), 40.0 + rng.normal(0, 0.3)
    half_h = 2.0 + 16.0 * aperture
    r_inner = np.sqrt(((xx - cx) / width) ** 2 + ((yy - cy) / half_h) ** 2)
    r_outer = np.sqrt(((xx - cx) / (width + 5.0)) ** 2 + ((yy - cy) / (half_h + 5.0)) ** 2)
    lips = 1.0 / (1.0 + np.exp((r_outer - 1.0) * 12.0))
    mouth = 1.0 / (1.0 + np.exp((r_inner - 1.0) * 12.0))
    image = 0.72 - 0.35 * lips - 0.32 * mouth
    image += rng.normal(0.0, 0.01, image.shape)
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def synth_utterance(seed: int, duration_s: float = 2.0) -> SynthUtterance:
    """Generate one speech-like utterance and its mouth-region video."""
    if duration_s < 0.4:
        raise ContractViolation(f"utterance duration must be at least 0.4 s, got {duration_s}")
    rng = _utterance_rng(seed)
    n = int(round(duration_s * SR))
    t = np.arange(n) / SR

    envelope = _syllable_envelope(rng, t)
    f0 = _pitch_track(rng, n)
    phase = 2.0 * np.pi * np.cumsum(f0) / SR
    n_harm = int(rng.integers(3, 6))
    formants = np.array([rng.uniform(300.0, 800.0), rng.uniform(900.0, 1500.0)])
    voice = np.zeros(n)
    for h in range(1, n_harm + 1):
        freq = h * f0
        weight = 0.25 + sum(np.exp(-0.5 * ((freq - f) / 180.0) ** 2) for f in formants)
        voice += weight / h ** 0.5 * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    voice /= np.sqrt(np.mean(voice ** 2)) + 1e-12
    # fricative energy in the upper bands, following the syllable envelope
    sos = signal.butter(4, [2500.0, 6500.0], btype="bandpass", fs=SR, output="sos")
    hiss = signal.sosfilt(sos, rng.standard_normal(n))
    hiss *= rng.uniform(0.15, 0.4) / (np.sqrt(np.mean(hiss ** 2)) + 1e-12)
    clean = envelope * (voice + hiss)
    clean *= CLEAN_RMS / np.sqrt(np.mean(clean ** 2) + 1e-12)
    clean += rng.normal(0.0, CLEAN_RMS * 10.0 ** (NOISE_FLOOR_DB / 20.0), n)

    n_frames = int(round(duration_s * FPS))
    per_frame = SR // FPS
    aperture = np.empty(n_frames)
    for k in range(n_frames):
        chunk = envelope[k * per_frame:(k + 1) * per_frame]
        aperture[k] = chunk.mean() if chunk.size else 0.0
    aperture = np.clip(aperture + rng.normal(0.0, 0.04, n_frames), 0.0, 1.0)
    width = rng.uniform(18.0, 24.0)
    frames = np.stack([_render_mouth(a, width, rng) for a in aperture]) if n_frames else \
        np.zeros((0, FRAME, FRAME), dtype=np.uint8)
    return SynthUtterance(dsp.Waveform(clean), frames, int(seed), float(duration_s), envelope, aperture)


def frame_envelope(envelope: np.ndarray, n_frames: int) -> np.ndarray:
    """Mean amplitude envelope over each 40 ms video frame."""
    per = SR // FPS
    return np.array([envelope[k * per:(k + 1) * per].mean() for k in range(n_frames)])


# ------------------------------------------------------------ noise bank

def _shaped(rng, n: int, exponent: float) -> np.ndarray:
    """Gaussian noise whose power spectral density falls as ``f**-exponent``."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SR)
    gain = np.zeros_like(f)
    gain[1:] = f[1:] ** (-exponent / 2.0)
    return np.fft.irfft(spec * gain, n=n)


def _white(rng, n):
    return rng.standard_normal(n)


def _pink(rng, n):
    return _shaped(rng, n, 1.0)


def _brown(rng, n):
    return _shaped(rng, n, 2.0)


def _hum(rng, n):
    t = np.arange(n) / SR
    x = sum((0.7 ** (k - 1)) * np.sin(2 * np.pi * 50.0 * k * t + rng.uniform(0, 2 * np.pi))
            for k in range(1, 8))
    return x + 0.01 * rng.standard_normal(n)


def _chirp(rng, n):
    t = np.arange(n) / SR
    period = rng.uniform(0.3, 0.7)
    local = np.mod(t + rng.uniform(0, period), period)
    return signal.chirp(local, f0=200.0, t1=period, f1=rng.uniform(3000.0, 5000.0), method="linear")


def _am_tone(rng, n):
    t = np.arange(n) / SR
    carrier = np.sin(2 * np.pi * rng.uniform(300.0, 2000.0) * t)
    return carrier * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 8.0) * t))


def _clicks(rng, n):
    x = 0.005 * rng.standard_normal(n)
    count = max(1, rng.poisson(20.0 * n / SR))
    pos = rng.integers(0, n, count)
    x[pos] += rng.choice([-1.0, 1.0], count) * rng.uniform(0.5, 1.0, count)
    decay = np.exp(-np.arange(64) / 8.0)
    return np.convolve(x, decay)[:n]


def _babble(rng, n):
    talkers = int(rng.integers(4, 7))
    dur = n / SR
    out = np.zeros(n)
    for _ in range(talkers):
        other = synth_utterance(int(rng.integers(2 ** 31, 2 ** 32)), max(dur, 0.4)).clean.samples
        out += dsp.fit_length(np.roll(other, int(rng.integers(0, len(other)))), n)
    return out + 0.002 * rng.standard_normal(n)


def _narrowband(rng, n):
    centre = rng.uniform(500.0, 3000.0)
    sos = signal.butter(4, [centre / 1.1, centre * 1.1], btype="bandpass", fs=SR, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _square(rng, n):
    t = np.arange(n) / SR
    return signal.square(2 * np.pi * rng.uniform(100.0, 400.0) * t + rng.uniform(0, 2 * np.pi))


def _burst(rng, n):
    gate = np.zeros(n)
    pos = 0
    on = bool(rng.random() < 0.5)
    while pos < n:
        length = int(rng.uniform(0.05, 0.3) * SR)
        if on:
            gate[pos:pos + length] = 1.0
        pos += length
        on = not on
    return rng.standard_normal(n) * (gate + 0.01)


def _ring(rng, n):
    t = np.arange(n) / SR
    f1 = rng.uniform(400.0, 500.0)
    tone = np.sin(2 * np.pi * f1 * t) + np.sin(2 * np.pi * (f1 + 40.0) * t)
    cadence = np.mod(t + rng.uniform(0.0, 0.6), 0.6) < 0.4
    return tone * (cadence + 0.01) + 0.001 * rng.standard_normal(n)


NOISE_BANK: dict[str, Callable] = {
    "white": _white,
    "pink": _pink,
    "brown": _brown,
    "hum": _hum,
    "chirp": _chirp,
    "am_tone": _am_tone,
    "clicks": _clicks,
    "babble": _babble,
    "narrowband": _narrowband,
    "square": _square,
    "burst": _burst,
    "ring": _ring,
}
NOISE_CATEGORIES = tuple(NOISE_BANK)


def synth_noise(category: str, seed: int, n_samples: int) -> dsp.Waveform:
    """Unit-RMS noise of one category, deterministic in ``(category, seed)``."""
    if category not in NOISE_BANK:
        raise ContractViolation(
            f"unknown noise category {category!r}; valid: {', '.join(NOISE_CATEGORIES)}")
    index = NOISE_CATEGORIES.index(category)
    rng = np.random.default_rng([0xA015E, index, int(seed)])
    x = NOISE_BANK[category](rng, int(n_samples))
    x = x - x.mean()
    return dsp.Waveform(x / np.sqrt(np.mean(x ** 2) + 1e-20))


# --------------------------------------------------------------- corpus

@dataclass
class CorpusConfig:
    train: int = 200
    val: int = 20
    test: int = 20
    seed: int = 0
    duration_s: float = 2.0
    train_snr_db: float = -5.0
    eval_snr_db: float = 0.0
    held_out_categories: list = field(default_factory=list)
    split_offsets: dict = field(default_factory=lambda: {"train": 0, "val": 400_000, "test": 800_000})

    def seed_range(self, split: str) -> range:
        start = self.seed * 1_000_000 + self.split_offsets[split]
        return range(start, start + getattr(self, split))


SPLITS = ("train", "val", "test")


def _check_disjoint(config: CorpusConfig) -> None:
    ranges = {s: config.seed_range(s) for s in SPLITS}
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            ra, rb = ranges[a], ranges[b]
            if len(ra) and len(rb) and ra.start < rb.stop and rb.start < ra.stop:
                raise ContractViolation(f"utterance seed ranges of {a} and {b} overlap")
    unknown = set(config.held_out_categories) - set(NOISE_CATEGORIES)
    if unknown:
        raise ContractViolation(f"unknown held-out categories {sorted(unknown)}")


def build_manifests(config: CorpusConfig) -> dict[str, dict]:
    """Manifest documents for train/val/test; nothing is written."""
    _check_disjoint(config)
    rng = np.random.default_rng([0xC0495, config.seed])
    held = set(config.held_out_categories)
    manifests = {}
    for split in SPLITS:
        pool = [c for c in NOISE_CATEGORIES if split == "test" or c not in held]
        if split == "test" and held:
            pool = sorted(held)
        snr = config.train_snr_db if split == "train" else config.eval_snr_db
        rows = []
        for utt_seed in config.seed_range(split):
            rows.append({
                "utterance_seed": int(utt_seed),
                "duration_s": float(config.duration_s),
                "noise_category": pool[int(rng.integers(len(pool)))],
                "noise_seed": int(rng.integers(0, 2 ** 31)),
                "snr_db": float(snr),
            })
        manifests[split] = {
            "split": split,
            "sample_rate_hz": SR,
            "fps": FPS,
            "corpus_config": asdict(config),
            "rows": rows,
        }
    return manifests


def write_manifest(path, manifest: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractViolation(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("rows"), list):
        raise ContractViolation(f"{path}: manifest must be an object with a 'rows' list")
    doc["_root"] = str(path.parent.resolve())
    return doc


@dataclass
class Utterance:
    """Clean audio, noise and frames for one manifest row."""

    name: str
    clean: np.ndarray
    noise: np.ndarray
    frames: np.ndarray
    snr_db: float


def _read_media(reader, path):
    try:
        return reader(path)
    except FileNotFoundError as exc:
        raise ContractViolation(f"missing media file {path}") from exc


def load_row(row: dict, root=None) -> Utterance:
    """Materialise a manifest row, from seeds or from files on disk.

    Synthetic rows carry ``utterance_seed``. Ingested rows instead carry
    ``clean_wav``, ``noise_wav`` and ``frames_dir`` paths, relative to the
    manifest directory.
    """
    from . import io

    snr = float(row.get("snr_db", 0.0))
    if "utterance_seed" in row:
        utt = synth_utterance(int(row["utterance_seed"]), float(row["duration_s"]))
        clean, frames = utt.clean.samples, utt.frames
        name = f"utt{int(row['utterance_seed'])}"
    else:
        missing = [k for k in ("clean_wav", "frames_dir") if k not in row]
        if missing:
            raise ContractViolation(f"manifest row lacks {', '.join(missing)}")
        base = Path(root or ".")
        clean = _read_media(io.read_wav, base / row["clean_wav"]).samples
        frames = _read_media(io.read_frames_dir, base / row["frames_dir"])
        name = row.get("name", Path(row["clean_wav"]).stem)
    if "noise_wav" in row:
        noise = _read_media(io.read_wav, Path(root or ".") / row["noise_wav"]).samples
    else:
        noise = synth_noise(row["noise_category"], int(row["noise_seed"]), len(clean)).samples
    if frames.shape[1:] != (FRAME, FRAME):
        raise ContractViolation(f"{name}: frames must be {FRAME}x{FRAME}, got {frames.shape[1:]}")
    return Utterance(name, clean, dsp.fit_length(noise, len(clean)), frames, snr)


def write_corpus(out_dir, config: CorpusConfig, media: bool = True) -> dict[str, Path]:
    """Write manifests (and WAV/PGM media) under ``out_dir``."""
    from . import io

    out = Path(out_dir)
    manifests = build_manifests(config)
    paths = {}
    for split, manifest in manifests.items():
        if media:
            for row in manifest["rows"]:
                utt = load_row(row)
                rel = Path(split) / utt.name
                io.write_wav(out / rel / "clean.wav", utt.clean)
                io.write_wav(out / rel / "noisy.wav", dsp.mix_at_snr(utt.clean, utt.noise, utt.snr_db))
                io.write_frames_dir(out / rel / "frames", utt.frames)
                row["media_dir"] = str(rel)
        paths[split] = out / f"{split}.json"
        write_manifest(paths[split], manifest)
    return paths
