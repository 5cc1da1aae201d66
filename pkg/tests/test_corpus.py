import hashlib
import json

import numpy as np
import pytest
from scipy import signal

from vsegan import dsp, io
from vsegan.corpus import (
    NOISE_CATEGORIES,
    CorpusConfig,
    build_manifests,
    frame_envelope,
    load_row,
    read_manifest,
    synth_noise,
    synth_utterance,
    write_corpus,
)
from vsegan.errors import ContractViolation

SR = dsp.SAMPLE_RATE


def octave_levels_db(x, centres):
    f, pxx = signal.welch(x, SR, nperseg=4096)
    out = []
    for c in centres:
        band = (f >= c / np.sqrt(2)) & (f < c * np.sqrt(2))
        out.append(10 * np.log10(pxx[band].mean()))  # mean density, so band width cancels
    return np.array(out)


def tree_hash(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------ utterances

def test_utterance_is_deterministic():
    a, b = synth_utterance(11), synth_utterance(11)
    np.testing.assert_array_equal(a.clean.samples, b.clean.samples)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert not np.array_equal(a.clean.samples, synth_utterance(12).clean.samples)


def test_rate_arithmetic():
    u = synth_utterance(0, 1.0)
    assert len(u.clean) == 16000
    assert u.frames.shape == (25, 80, 80)
    assert u.frames.dtype == np.uint8
    assert synth_utterance(0, 2.5).frames.shape[0] == round(2.5 * 25)


def test_minimum_duration():
    with pytest.raises(ContractViolation):
        synth_utterance(0, 0.3)


def test_aperture_tracks_envelope():
    corrs = []
    for seed in range(100):
        u = synth_utterance(seed, 1.0)
        corrs.append(np.corrcoef(frame_envelope(u.envelope, len(u.frames)), u.aperture)[0, 1])
    assert min(corrs) > 0.5


def test_mouth_opening_visible_in_pixels():
    # the rendered ellipse height, not only the aperture series, follows the envelope
    u = synth_utterance(5, 2.0)
    dark_rows = [(f < 128).any(axis=1).sum() for f in u.frames]
    assert np.corrcoef(dark_rows, u.aperture)[0, 1] > 0.8


def test_pitch_in_voice_range():
    for seed in range(5):
        u = synth_utterance(seed, 2.0)
        centre = int(np.argmax(u.envelope))
        chunk = u.clean.samples[max(centre - 320, 0):max(centre - 320, 0) + 640]
        ac = np.correlate(chunk, chunk, "full")[len(chunk) - 1:]
        lo, hi = SR // 320, SR // 85  # lags for 320 Hz .. 85 Hz
        f0 = SR / (lo + np.argmax(ac[lo:hi]))
        assert 85 <= f0 <= 320


def test_clean_level():
    assert synth_utterance(3, 2.0).clean.samples.std() == pytest.approx(0.05, rel=0.01)


# ----------------------------------------------------------------- noise

def test_twelve_categories():
    assert len(NOISE_CATEGORIES) == 12
    for name in NOISE_CATEGORIES:
        x = synth_noise(name, 1, 8000).samples
        assert x.shape == (8000,) and np.all(np.isfinite(x))
        assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0, rel=1e-6)
        np.testing.assert_array_equal(x, synth_noise(name, 1, 8000).samples)


def test_unknown_category_lists_valid_names():
    with pytest.raises(ContractViolation, match="pink"):
        synth_noise("traffic", 0, 100)


def test_white_is_flat():
    levels = octave_levels_db(synth_noise("white", 0, 5 * SR).samples, [125, 250, 500, 1000, 2000, 4000])
    assert np.ptp(levels) <= 4.0  # every band within +-2 dB of the middle


def test_pink_slope():
    centres = [125, 250, 500, 1000, 2000, 4000]
    levels = octave_levels_db(synth_noise("pink", 0, 10 * SR).samples, centres)
    slope = np.polyfit(np.log2(centres), levels, 1)[0]
    assert slope == pytest.approx(-3.0, abs=1.0)


def test_brown_falls_faster_than_pink():
    centres = [125, 250, 500, 1000, 2000]
    brown = np.polyfit(np.log2(centres), octave_levels_db(synth_noise("brown", 0, 10 * SR).samples, centres), 1)[0]
    assert brown < -4.5


def test_hum_has_50hz_fundamental_and_harmonics():
    f, pxx = signal.welch(synth_noise("hum", 0, 4 * SR).samples, SR, nperseg=8192)
    assert abs(f[np.argmax(pxx)] - 50.0) < 2.0
    floor = np.median(pxx)
    for h in (100.0, 150.0):
        assert pxx[np.argmin(np.abs(f - h))] > 100 * floor


def test_narrowband_is_concentrated():
    f, pxx = signal.welch(synth_noise("narrowband", 2, 4 * SR).samples, SR, nperseg=4096)
    peak = f[np.argmax(pxx)]
    share = pxx[np.abs(f - peak) < 500].sum() / pxx.sum()
    assert share > 0.9


def test_categories_are_distinct():
    # spectral shape plus the spread of short-time energy (burst noise is white but gated)
    sig = {}
    for name in NOISE_CATEGORIES:
        x = synth_noise(name, 0, 2 * SR).samples
        _, pxx = signal.welch(x, SR, nperseg=1024)
        energy = 10 * np.log10(np.mean(x[:len(x) // 320 * 320].reshape(-1, 320) ** 2, axis=1) + 1e-12)
        sig[name] = np.concatenate([np.log10(pxx + 1e-20), np.percentile(energy, [5, 50, 95]) / 10])
    names = list(sig)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert not np.allclose(sig[a], sig[b], atol=0.5), (a, b)


# -------------------------------------------------------------- manifests

def test_split_sizes_and_disjoint_seeds():
    m = build_manifests(CorpusConfig(train=200, val=20, test=20))
    assert [len(m[s]["rows"]) for s in ("train", "val", "test")] == [200, 20, 20]
    seeds = {s: {r["utterance_seed"] for r in m[s]["rows"]} for s in m}
    assert not seeds["train"] & seeds["test"]
    assert not seeds["train"] & seeds["val"]
    assert not seeds["val"] & seeds["test"]


def test_split_snrs():
    m = build_manifests(CorpusConfig(train=5, val=5, test=5, train_snr_db=-5, eval_snr_db=0))
    assert {r["snr_db"] for r in m["train"]["rows"]} == {-5.0}
    assert {r["snr_db"] for r in m["test"]["rows"]} == {0.0}


def test_overlapping_seed_ranges_rejected():
    cfg = CorpusConfig(train=500, val=5, test=5, split_offsets={"train": 0, "val": 100, "test": 1000})
    with pytest.raises(ContractViolation):
        build_manifests(cfg)


def test_held_out_noise_categories():
    cfg = CorpusConfig(train=60, val=0, test=30, held_out_categories=["babble", "ring"])
    m = build_manifests(cfg)
    train_cats = {r["noise_category"] for r in m["train"]["rows"]}
    test_cats = {r["noise_category"] for r in m["test"]["rows"]}
    assert not train_cats & {"babble", "ring"}
    assert test_cats <= {"babble", "ring"}


def test_rows_yield_aligned_streams():
    m = build_manifests(CorpusConfig(train=4, val=0, test=0, duration_s=1.3))
    for row in m["train"]["rows"]:
        utt = load_row(row)
        audio_segments = len(dsp.slice_segments(dsp.log_mel_spectrogram(
            np.abs(dsp.segment_spectrogram(utt.clean, dsp.segment_count(len(utt.clean)))))))
        video_segments = len(dsp.video_segments(utt.frames))
        assert audio_segments == video_segments == dsp.segment_count(len(utt.clean), len(utt.frames))


def test_write_corpus_is_reproducible(tmp_path):
    cfg = CorpusConfig(train=2, val=1, test=1, duration_s=0.6)
    write_corpus(tmp_path / "a", cfg)
    write_corpus(tmp_path / "b", cfg)
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
    manifest = read_manifest(tmp_path / "a" / "train.json")
    assert len(manifest["rows"]) == 2
    first = manifest["rows"][0]
    clean = io.read_wav(tmp_path / "a" / first["media_dir"] / "clean.wav")
    assert len(clean) == int(0.6 * SR)
    frames = io.read_frames_dir(tmp_path / "a" / first["media_dir"] / "frames")
    np.testing.assert_array_equal(frames, synth_utterance(first["utterance_seed"], 0.6).frames)


def test_ingested_rows_from_files(tmp_path):
    u = synth_utterance(9, 1.0)
    io.write_wav(tmp_path / "c.wav", u.clean)
    io.write_wav(tmp_path / "n.wav", synth_noise("pink", 0, 8000).samples * 0.1)
    io.write_frames_dir(tmp_path / "frames", u.frames)
    manifest = {"rows": [{"clean_wav": "c.wav", "noise_wav": "n.wav", "frames_dir": "frames", "snr_db": 3.0}]}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    loaded = read_manifest(tmp_path / "m.json")
    utt = load_row(loaded["rows"][0], loaded["_root"])
    assert len(utt.noise) == len(utt.clean) == 16000
    assert utt.snr_db == 3.0
    np.testing.assert_allclose(utt.clean, u.clean.samples, atol=1 / 32768)


def test_ingested_row_missing_field(tmp_path):
    with pytest.raises(ContractViolation, match="frames_dir"):
        load_row({"clean_wav": "x.wav", "noise_category": "white", "noise_seed": 0}, tmp_path)
