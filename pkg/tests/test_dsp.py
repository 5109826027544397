import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segssl.dsp import (LOG_EPS, GlobalStats, MelParams, MelSpec, WaveClip, compute_global_stats, denormalize,
                        hz_to_mel, mel_filterbank, mel_spectrogram, normalize, read_wav, resample, write_wav)


def sine(freq, rate, seconds, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return WaveClip(amp * np.sin(2 * np.pi * freq * t), rate)


# ---------------------------------------------------------------- resample

def test_resample_identity_is_bit_identical(rng):
    clip = WaveClip(rng.uniform(-1, 1, 16000), 16000)
    out = resample(clip, 16000)
    assert out.sample_rate == 16000
    assert np.array_equal(out.samples, clip.samples)


def test_resample_length_ratio(rng):
    out = resample(WaveClip(rng.uniform(-1, 1, 96000), 32000), 16000)
    assert out.sample_rate == 16000
    assert len(out.samples) == 48000


def test_resample_keeps_tone_frequency():
    out = resample(sine(440.0, 48000, 1.0), 16000)
    spectrum = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(len(out.samples), 1 / 16000)
    bin_width = freqs[1]
    assert abs(freqs[np.argmax(spectrum)] - 440.0) <= bin_width


def test_resample_preserves_duration(rng):
    clip = WaveClip(rng.uniform(-1, 1, 44100 * 2 + 17), 44100)
    out = resample(clip, 16000)
    assert abs(out.duration - clip.duration) <= 1 / 16000


def test_resample_rejects_empty():
    with pytest.raises(ValueError):
        resample(WaveClip(np.zeros(0), 16000), 8000)


def test_waveclip_invariants():
    with pytest.raises(ValueError):
        WaveClip(np.array([0.0, np.nan]), 16000)
    with pytest.raises(ValueError):
        WaveClip(np.zeros(4), 0)


# ---------------------------------------------------------------- mel

def test_six_second_clip_frame_count():
    spec = mel_spectrogram(WaveClip(np.zeros(96000), 16000))
    assert spec.values.shape == (598, 64)


def test_one_second_clip_frame_count():
    assert mel_spectrogram(WaveClip(np.zeros(16000), 16000)).n_frames == 98


@settings(max_examples=40, deadline=None)
@given(n=st.integers(min_value=400, max_value=40000))
def test_frame_count_formula(n):
    spec = mel_spectrogram(WaveClip(np.zeros(n), 16000))
    assert spec.n_frames == 1 + (n - 400) // 160
    assert spec.bin_count == 64


def test_silence_gives_log_floor():
    spec = mel_spectrogram(WaveClip(np.zeros(16000), 16000))
    assert np.all(spec.values == math.log(LOG_EPS))


def test_shorter_than_window_rejected():
    with pytest.raises(ValueError):
        mel_spectrogram(WaveClip(np.zeros(399), 16000))


def test_wrong_rate_rejected():
    with pytest.raises(ValueError):
        mel_spectrogram(WaveClip(np.zeros(48000), 48000))


def test_deterministic(rng):
    clip = WaveClip(rng.uniform(-1, 1, 20000), 16000)
    assert np.array_equal(mel_spectrogram(clip).values, mel_spectrogram(clip).values)


def test_matches_direct_dft_oracle(rng):
    """Frame, window and power computed with an explicit DFT matrix, frame by frame."""
    params = MelParams()
    clip = WaveClip(rng.uniform(-1, 1, 3000), 16000)
    spec = mel_spectrogram(clip, params)
    n_fft, win, hop = params.n_fft, 400, 160
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(win)[None, :]
    dft = np.exp(-2j * np.pi * k * n / n_fft)
    # periodic Hamming window written out
    window = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(win) / win)
    fb = mel_filterbank(params)
    for frame in (0, 3, spec.n_frames - 1):
        seg = clip.samples[frame * hop: frame * hop + win] * window
        power = np.abs(dft @ seg) ** 2
        expected = np.log(power @ fb + LOG_EPS)
        np.testing.assert_allclose(spec.values[frame], expected, rtol=1e-9, atol=1e-9)


def test_filterbank_shape_and_coverage():
    params = MelParams()
    fb = mel_filterbank(params)
    assert fb.shape == (params.n_fft // 2 + 1, 64)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=0) > 0), "every mel filter must touch at least one FFT bin"
    freqs = np.arange(fb.shape[0]) * params.sample_rate / params.n_fft
    assert np.all(fb[freqs < params.f_min - 1] == 0)
    assert np.all(fb[freqs > params.f_max + 1] == 0)


def test_filterbank_centres_on_mel_scale():
    params = MelParams()
    fb = mel_filterbank(params)
    freqs = np.arange(fb.shape[0]) * params.sample_rate / params.n_fft
    spacing = (hz_to_mel(params.f_max) - hz_to_mel(params.f_min)) / (params.n_bins + 1)
    expected = hz_to_mel(params.f_min) + spacing * np.arange(1, params.n_bins + 1)
    # the peak is an FFT bin adjacent to the centre: within one bin either side
    df = params.sample_rate / params.n_fft
    centre_hz = 700.0 * (10 ** (expected / 2595.0) - 1)
    assert np.all(np.abs(freqs[fb.argmax(axis=0)] - centre_hz) <= df)


def test_filterbank_area_normalized():
    params = MelParams()
    fb = mel_filterbank(params)
    df = params.sample_rate / params.n_fft
    area = fb.sum(axis=0) * df
    # triangles wide compared to the FFT grid integrate to 1 in Hz
    np.testing.assert_allclose(area[20:], 1.0, rtol=0.02)


def test_tone_lands_in_expected_bin():
    params = MelParams()
    spec = mel_spectrogram(sine(1000.0, 16000, 1.0), params)
    fb = mel_filterbank(params)
    freqs = np.arange(fb.shape[0]) * params.sample_rate / params.n_fft
    nearest = np.argmin(np.abs(freqs - 1000.0))
    assert spec.values.mean(axis=0).argmax() == fb[nearest].argmax()


def test_mel_params_invariants():
    with pytest.raises(ValueError):
        MelParams(f_min=0.0)
    with pytest.raises(ValueError):
        MelParams(f_max=9000.0)
    with pytest.raises(ValueError):
        MelParams(hop_s=0.03)


# ---------------------------------------------------------------- global stats

def test_stats_by_construction():
    values = np.full((10, 4), 3.0)
    values[2, 1] = 5.0
    stats = compute_global_stats([MelSpec(values)])
    assert (stats.min_val, stats.max_val, stats.n_frames_seen) == (3.0, 5.0, 10)


def test_stats_order_invariant(rng):
    a, b = WaveClip(rng.uniform(-1, 1, 8000), 16000), WaveClip(0.1 * rng.uniform(-1, 1, 12000), 16000)
    assert compute_global_stats([a, b]) == compute_global_stats([b, a])


def test_stats_match_brute_force(rng):
    clips = [WaveClip(rng.uniform(-1, 1, 400 + rng.integers(0, 3000)) * rng.uniform(0.01, 1), 16000)
             for _ in range(100)]
    stats = compute_global_stats(clips)
    stacked = np.concatenate([mel_spectrogram(c).values for c in clips])
    assert stats.min_val == stacked.min()
    assert stats.max_val == stacked.max()
    assert stats.n_frames_seen == len(stacked)


def test_stats_partial_reductions_merge(rng):
    clips = [WaveClip(rng.uniform(-1, 1, 4000) * s, 16000) for s in (0.01, 1.0, 0.3, 0.05)]
    whole = compute_global_stats(clips)
    merged = compute_global_stats(clips[:2]).merge(compute_global_stats(clips[2:]))
    assert merged == whole


def test_stats_errors():
    with pytest.raises(ValueError):
        compute_global_stats([])
    with pytest.raises(ValueError):
        compute_global_stats([MelSpec(np.ones((5, 4)))])


def test_stats_round_trip(tmp_path):
    stats = GlobalStats(-23.1, 4.5, 1000, "abc")
    stats.save(tmp_path / "stats.json")
    assert GlobalStats.load(tmp_path / "stats.json") == stats


# ---------------------------------------------------------------- normalize

def test_normalize_endpoints_and_midpoint():
    stats = GlobalStats(-3.0, 5.0, 1)
    out = normalize(MelSpec(np.array([[-3.0, 5.0]])), stats).values
    assert out.tolist() == [[0.0, 1.0]]
    assert normalize(MelSpec(np.array([[1.0]])), GlobalStats(0.0, 2.0, 1)).values[0, 0] == 0.5


def test_normalize_round_trip(rng):
    stats = GlobalStats(-20.0, 7.0, 1)
    values = rng.uniform(-30, 10, (50, 64))
    back = denormalize(normalize(MelSpec(values), stats), stats).values
    np.testing.assert_allclose(back, values, rtol=1e-6)


def test_normalize_affine_identity(rng):
    stats = GlobalStats(-11.0, 3.0, 1)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    alpha, beta = 0.3, -1.7
    lhs = normalize(MelSpec(alpha * a + beta * b), stats).values
    offset = stats.min_val / (stats.max_val - stats.min_val)
    rhs = alpha * normalize(MelSpec(a), stats).values + beta * normalize(MelSpec(b), stats).values
    rhs += (alpha + beta - 1) * offset
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_normalize_does_not_clip_unseen_values():
    out = normalize(MelSpec(np.array([[-1.0, 3.0]])), GlobalStats(0.0, 2.0, 1)).values
    assert out.tolist() == [[-0.5, 1.5]]


def test_dataset_values_land_in_unit_interval(rng):
    clips = [WaveClip(rng.uniform(-1, 1, 5000) * s, 16000) for s in (1e-3, 0.2, 1.0)]
    stats = compute_global_stats(clips)
    for clip in clips:
        out = normalize(mel_spectrogram(clip), stats).values
        assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- wav io

@pytest.mark.parametrize("pcm16", [True, False])
def test_wav_round_trip(tmp_path, rng, pcm16):
    clip = WaveClip(rng.uniform(-0.9, 0.9, 1234), 16000)
    write_wav(tmp_path / "a.wav", clip, pcm16=pcm16)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, clip.samples, atol=0.5 / 32768 + 1e-12 if pcm16 else 1e-7)
