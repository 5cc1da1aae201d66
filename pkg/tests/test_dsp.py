import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsegan import dsp
from vsegan.corpus import synth_noise, synth_utterance
from vsegan.errors import ContractViolation
from vsegan.metrics import si_sdr

SR = dsp.SAMPLE_RATE


def dft_frame(frame):
    """Direct O(N^2) transform of one frame, first 321 bins."""
    n = np.arange(dsp.WIN_LENGTH)
    k = np.arange(dsp.N_BINS)[:, None]
    return (frame * np.exp(-2j * np.pi * k * n / dsp.WIN_LENGTH)).sum(axis=1)


def interior(n):
    # samples covered by the full four-frame overlap
    return slice(dsp.WIN_LENGTH, n - dsp.WIN_LENGTH)


# ------------------------------------------------------------------ STFT

def test_hann_is_periodic():
    n = np.arange(dsp.WIN_LENGTH)
    expected = 0.5 - 0.5 * np.cos(2 * np.pi * n / dsp.WIN_LENGTH)
    np.testing.assert_allclose(dsp.hann_window(), expected, atol=1e-15)


def test_squared_hann_overlap_is_constant():
    w2 = dsp.hann_window() ** 2
    total = sum(np.roll(w2, shift) for shift in range(0, dsp.WIN_LENGTH, dsp.HOP_LENGTH))
    np.testing.assert_allclose(total, 1.5, atol=1e-12)


def test_stft_matches_direct_transform():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(2000)
    spec = dsp.stft(x)
    for i in (0, 3, spec.shape[0] - 1):
        frame = x[i * dsp.HOP_LENGTH:i * dsp.HOP_LENGTH + dsp.WIN_LENGTH] * dsp.hann_window()
        np.testing.assert_allclose(spec[i], dft_frame(frame), atol=1e-9)


def test_sine_peak_at_expected_bin():
    t = np.arange(SR) / SR
    spec = dsp.stft(np.sin(2 * np.pi * 1000.0 * t))
    assert spec.shape[1] == 321
    assert np.all(np.argmax(np.abs(spec), axis=1) == 1000 // (SR // dsp.WIN_LENGTH))


def test_frame_count_formula():
    assert dsp.stft(np.zeros(3200)).shape == (17, 321)
    assert dsp.stft(np.zeros(640)).shape == (1, 321)
    assert dsp.n_frames(32000) == (32000 - 640) // 160 + 1


def test_zero_signal_zero_spectrogram():
    assert not np.any(dsp.stft(np.zeros(1600)))


def test_stft_rejects_short_input():
    with pytest.raises(ContractViolation):
        dsp.stft(np.zeros(639))


def test_stft_rejects_other_sample_rates():
    with pytest.raises(ContractViolation, match="16000"):
        dsp.stft(dsp.Waveform(np.zeros(1000), 8000))


@pytest.mark.parametrize("kind", ["noise", "tone"])
def test_round_trip_interior(kind):
    n = 8000
    if kind == "noise":
        x = np.random.default_rng(1).standard_normal(n)
    else:
        x = np.sin(2 * np.pi * 440.0 * np.arange(n) / SR)
    y = dsp.istft(dsp.stft(x), length=n).samples
    core = interior(n)
    rel = np.linalg.norm(y[core] - x[core]) / np.linalg.norm(x[core])
    assert rel < 1e-6


def test_istft_zero_and_geometry():
    assert not np.any(dsp.istft(np.zeros((10, 321), complex)).samples)
    with pytest.raises(ContractViolation):
        dsp.istft(np.zeros((10, 320), complex))


def test_istft_length_pads_and_crops():
    spec = dsp.stft(np.ones(1600))
    assert len(dsp.istft(spec, length=1000)) == 1000
    assert len(dsp.istft(spec, length=2000)) == 2000


# --------------------------------------------------------------- log-mel

def test_hz_mel_round_trip_and_reference_point():
    assert dsp.hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.05)
    f = np.linspace(0, 8000, 33)
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f, atol=1e-9)


def test_filterbank_shape_and_triangles():
    fb = dsp.mel_filterbank()
    assert fb.shape == (80, 321)
    assert fb.min() >= 0.0
    assert np.all(fb.max(axis=1) <= 1.0 + 1e-12)
    assert np.all(fb.sum(axis=1) > 0)  # no empty filter
    support = fb > 0
    assert support.sum(axis=0).max() <= 2
    for col in np.nonzero(support.sum(axis=0) == 2)[0]:
        rows = np.nonzero(support[:, col])[0]
        assert rows[1] - rows[0] == 1


def test_filterbank_centres_are_unit_peaks():
    fb = dsp.mel_filterbank()
    edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000.0), 82))
    bin_hz = SR / dsp.WIN_LENGTH
    for m in (10, 40, 79):
        peak_bin = int(np.argmax(fb[m]))
        assert abs(peak_bin * bin_hz - edges[m + 1]) <= bin_hz


def test_log_mel_of_unit_magnitude_is_log_filter_mass():
    fb = dsp.mel_filterbank()
    out = dsp.log_mel_spectrogram(np.ones((5, 321)))
    oracle = np.array([np.log(sum(fb[m, k] for k in range(321)) + 1e-10) for m in range(80)])
    np.testing.assert_allclose(out, np.repeat(oracle[:, None], 5, axis=1), rtol=1e-12)


def test_log_mel_floor():
    assert np.all(dsp.log_mel_spectrogram(np.zeros((3, 321))) == pytest.approx(np.log(1e-10)))


def test_slicing_forty_frames_two_segments():
    lm = np.arange(80 * 45, dtype=float).reshape(80, 45)
    seg = dsp.slice_segments(lm)
    assert seg.shape == (2, 80, 20)
    np.testing.assert_array_equal(seg[1], lm[:, 20:40])
    assert dsp.log_mel(np.ones((40, 321))).shape == (2, 80, 20)


@given(st.integers(1, 6), st.integers(0, 19))
def test_join_inverts_slice(segments, extra):
    lm = np.random.default_rng(segments).standard_normal((80, segments * 20 + extra))
    np.testing.assert_array_equal(dsp.join_segments(dsp.slice_segments(lm)), lm[:, :segments * 20])


def test_segments_are_200ms_and_align_with_video():
    assert dsp.SEGMENT_FRAMES * dsp.HOP_LENGTH / SR == pytest.approx(0.2)
    assert dsp.VIDEO_FRAMES_PER_SEGMENT / dsp.VIDEO_FPS == pytest.approx(0.2)
    x = np.random.default_rng(2).standard_normal(3 * 3200 + 100)
    spec = dsp.segment_spectrogram(x, 3)
    assert spec.shape == (60, 321)
    # frame i starts at 160*i; frames that fit in the unpadded signal agree with the plain STFT
    plain = dsp.stft(x[:9600])
    np.testing.assert_allclose(spec[:plain.shape[0]], plain, atol=1e-12)


def test_segment_count_takes_the_shorter_stream():
    assert dsp.segment_count(32000) == 10
    assert dsp.segment_count(32000, 50) == 10
    assert dsp.segment_count(32000, 42) == 8
    assert dsp.segment_count(3199) == 0


def test_video_segments_shape():
    frames = np.zeros((23, 80, 80), np.uint8)
    assert dsp.video_segments(frames).shape == (4, 5, 80, 80)
    assert dsp.video_segments(frames, 2).shape == (2, 5, 80, 80)


def test_segment_types_validate_shapes():
    dsp.LogMelSegment(np.zeros((80, 20)))
    with pytest.raises(ContractViolation):
        dsp.LogMelSegment(np.zeros((80, 21)))
    dsp.VideoSegment(np.ones((5, 80, 80)))
    with pytest.raises(ContractViolation):
        dsp.VideoSegment(np.full((5, 80, 80), 2.0))


# ------------------------------------------------------------- inversion

def test_self_reconstruction_above_10db():
    for seed in (0, 1, 2):
        clean = synth_utterance(seed).clean.samples
        count = dsp.segment_count(len(clean))
        spec = dsp.segment_spectrogram(clean, count)
        out = dsp.mel_pseudo_inverse(dsp.log_mel_spectrogram(np.abs(spec)), spec, length=count * 3200)
        assert si_sdr(clean[:count * 3200], out.samples) > 10.0


def test_floor_log_mel_gives_near_silence():
    values = np.full((80, 40), np.log(1e-10))
    phase = np.ones((40, 321), complex)
    assert np.abs(dsp.mel_pseudo_inverse(values, phase).samples).max() < 1e-4


def test_tone_at_filter_centre_keeps_its_frequency():
    fb = dsp.mel_filterbank()
    k = int(np.argmax(fb[30]))
    f = k * SR / dsp.WIN_LENGTH
    x = np.sin(2 * np.pi * f * np.arange(6400) / SR)
    spec = dsp.stft(x)
    out = dsp.mel_pseudo_inverse(dsp.log_mel_spectrogram(np.abs(spec)), spec)
    peak = np.argmax(np.abs(np.fft.rfft(out.samples[1000:5000] * np.hanning(4000))))
    assert abs(peak * SR / 4000 - f) <= SR / dsp.WIN_LENGTH


def test_nnls_inverse_is_non_negative_and_consistent():
    rng = np.random.default_rng(3)
    mag = np.abs(rng.standard_normal((12, 321)))
    mel = dsp.mel_filterbank() @ mag.T
    est = dsp.nnls_mel_inverse(mel)
    assert est.min() >= 0.0
    np.testing.assert_allclose(dsp.mel_filterbank() @ est.T, mel, rtol=1e-3, atol=1e-6)


def test_inverse_rejects_short_phase():
    with pytest.raises(ContractViolation):
        dsp.mel_pseudo_inverse(np.zeros((80, 40)), np.ones((30, 321), complex))


# --------------------------------------------------------- normalisation

def test_normalize_range_and_inverse():
    stats = dsp.NormStats(-10.0, 4.0)
    v = np.linspace(-10, 4, 50)
    n = dsp.normalize(v, stats)
    assert n.min() >= -1 and n.max() <= 1
    assert n.max() < 1.0  # margin keeps the corpus extremes off the tanh rails
    np.testing.assert_allclose(dsp.denormalize(n, stats), v, atol=1e-12)
    assert dsp.normalize(np.array([100.0, -100.0]), stats).tolist() == [1.0, -1.0]


def test_normalize_requires_stats():
    with pytest.raises(ContractViolation):
        dsp.normalize(np.zeros(3), None)
    with pytest.raises(ContractViolation):
        dsp.denormalize(np.zeros(3), None)


def test_segment_normalisation_records_the_map():
    stats = dsp.NormStats(-8.0, 2.0)
    seg = dsp.LogMelSegment(np.linspace(-8, 2, 1600).reshape(80, 20))
    norm = dsp.normalize_segment(seg, stats)
    assert (norm.norm_mean, norm.norm_scale) == (stats.mean, stats.scale)
    np.testing.assert_allclose(dsp.denormalize_segment(norm).values, seg.values, atol=1e-12)


# ----------------------------------------------------------------- mixing

@settings(max_examples=40, deadline=None)
@given(st.floats(-20.0, 20.0), st.sampled_from(["white", "pink", "babble", "hum"]), st.integers(0, 50))
def test_mix_hits_target_snr(snr, category, seed):
    clean = synth_utterance(seed, 0.5).clean.samples
    noise = synth_noise(category, seed, 3000).samples  # shorter than clean: tiled
    mixed = dsp.mix_at_snr(clean, noise, snr).samples
    assert abs(dsp.measured_snr_db(clean, mixed - clean) - snr) <= 0.1


def test_fit_length_tiles_then_crops():
    np.testing.assert_array_equal(dsp.fit_length(np.array([1.0, 2.0, 3.0]), 7), [1, 2, 3, 1, 2, 3, 1])
    np.testing.assert_array_equal(dsp.fit_length(np.arange(10.0), 4), [0, 1, 2, 3])


def test_mix_warns_on_clipping(caplog):
    with caplog.at_level(logging.WARNING):
        dsp.mix_at_snr(np.ones(1000), np.ones(1000), -10.0)
    assert "exceeds full scale" in caplog.text


def test_mix_rejects_silent_inputs():
    with pytest.raises(ContractViolation):
        dsp.mix_at_snr(np.zeros(100), np.ones(100), 0.0)


def test_attenuation_draws():
    draws = [dsp.attenuation_db(0, step, i) for step in range(50) for i in range(8)]
    assert all(-15.0 <= d <= 0.0 for d in draws)
    assert min(draws) < -13 and max(draws) > -2
    assert dsp.attenuation_db(4, 7, 2) == dsp.attenuation_db(4, 7, 2)
    assert dsp.attenuation_db(4, 7, 2) != dsp.attenuation_db(4, 8, 2)
    noise = np.ones(10)
    assert dsp.power(dsp.attenuate(noise, -10.0)) == pytest.approx(0.1)
