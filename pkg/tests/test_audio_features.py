import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesturegen import audio_features as af
from oracles import dft_power

SR = 16000


def tone(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(seconds * sr)) / sr
    return af.AudioSignal(amp * np.sin(2 * np.pi * freq * t), sr)


def silence(seconds=1.0):
    return af.AudioSignal(np.zeros(int(seconds * SR)), SR)


# ---------------------------------------------------------------- STFT

def test_stft_zero_signal():
    assert not af.stft_power(silence(0.5), 0.046, 0.005).any()


def test_stft_frame_count_follows_formula():
    # 736-sample window, 80-sample hop: floor((16000 - 736) / 80) + 1
    p = af.stft_power(silence(1.0), 0.046, 0.005)
    assert p.shape == ((16000 - 736) // 80 + 1, 1024 // 2 + 1)
    assert p.shape[0] == 191


def test_stft_matches_brute_force_dft():
    rng = np.random.default_rng(0)
    sig = af.AudioSignal(rng.uniform(-1, 1, 480), SR)
    p = af.stft_power(sig, 0.02, 0.01)
    frame = sig.samples[160:480] * af.hann(320)
    np.testing.assert_allclose(p[1], dft_power(frame, 512), rtol=1e-9, atol=1e-9)


def test_stft_bin_centred_sine_concentrates_in_main_lobe():
    # window of exactly nfft samples, sine on bin 32
    nfft, k = 512, 32
    sr = nfft * 25
    t = np.arange(nfft * 4) / sr
    sig = af.AudioSignal(np.sin(2 * np.pi * k * sr / nfft * t), sr)
    p = af.stft_power(sig, nfft / sr, nfft / sr)
    for frame in p:
        assert frame.argmax() == k
        assert frame[k - 1 : k + 2].sum() > 0.9 * frame.sum()


def test_stft_short_signal_and_bad_args():
    with pytest.raises(af.AudioError):
        af.stft_power(af.AudioSignal(np.zeros(100), SR), 0.046, 0.005)
    with pytest.raises(af.AudioError):
        af.stft_power(silence(), 0.005, 0.01)


# ---------------------------------------------------------------- MFCC / spectrogram

def test_mfcc_silence_constant_and_rate():
    f = af.mfcc(silence())
    assert f.kind == "mfcc" and f.fps == 100 and f.dim == 26
    assert abs(f.n_frames - 100) <= 1
    assert np.all(f.data == f.data[0])
    np.testing.assert_allclose(f.data[0, 0], math.log(1e-10) * math.sqrt(26), rtol=1e-12)
    np.testing.assert_allclose(f.data[0, 1:], 0, atol=1e-9)


def test_mfcc_1khz_peaks_in_containing_band():
    energies = af.mel_band_energies(tone(1000.0), 26)
    nfft = 512
    fb = af.mel_filterbank(26, nfft, SR)
    bin_1k = int(round(1000 * nfft / SR))
    expected = int(np.argmax(fb[:, bin_1k]))
    assert np.all(energies.argmax(axis=1) == expected)


def test_mfcc_rejects_low_sample_rate():
    with pytest.raises(af.AudioError):
        af.mfcc(af.AudioSignal(np.zeros(8000), 8000))
    with pytest.raises(af.AudioError):
        af.spectrogram64(af.AudioSignal(np.zeros(8000), 8000))


def test_spectrogram_silence_and_shape():
    f = af.spectrogram64(silence())
    assert f.fps == 200 and f.dim == 64
    np.testing.assert_allclose(f.data, math.log(1e-10))


def test_spectrogram_white_noise_bands_within_20db():
    rng = np.random.default_rng(1)
    means = []
    for _ in range(10):
        f = af.spectrogram64(af.AudioSignal(rng.uniform(-1, 1, SR), SR))
        means.append(np.exp(f.data).mean(axis=0))
    db = 10 * np.log10(np.mean(means, axis=0))
    assert db.max() - db.min() < 20


def test_spectrogram_floor():
    rng = np.random.default_rng(2)
    f = af.spectrogram64(af.AudioSignal(rng.normal(size=SR) * 1e-6, SR))
    assert f.data.min() >= math.log(1e-10)


def test_trailing_zeros_shorter_than_hop():
    rng = np.random.default_rng(3)
    # lengths aligned to the hop so a partial hop cannot add a frame
    for extract, win, hop in ((af.mfcc, 320, 160), (af.spectrogram64, 736, 80)):
        base = rng.uniform(-1, 1, win + hop * 50)
        a = extract(af.AudioSignal(base, SR)).data
        b = extract(af.AudioSignal(np.concatenate([base, np.zeros(hop - 1)]), SR)).data
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- prosody

def test_energy_contour():
    assert not af.energy_contour(silence(0.2)).any()
    sq = af.AudioSignal(np.sign(np.sin(2 * np.pi * 100 * np.arange(SR) / SR + 0.1)), SR)
    np.testing.assert_allclose(af.energy_contour(sq), 1.0)
    rms = af.energy_contour(tone(250.0, amp=0.3))
    assert np.all(np.abs(rms / (0.3 / math.sqrt(2)) - 1) < 0.02)


def test_f0_silence_and_tone():
    assert not af.f0_contour(silence(0.5)).any()
    f0 = af.f0_contour(tone(220.0))
    interior = f0[5:-5]
    assert np.all(np.abs(interior - 220.0) <= 2.0)


@pytest.mark.parametrize("freq", [80.0, 130.0, 300.0, 390.0])
def test_f0_other_tones(freq):
    f0 = af.f0_contour(tone(freq))[5:-5]
    assert np.median(np.abs(f0 - freq)) <= 2.0


def test_f0_white_noise_mostly_unvoiced():
    rng = np.random.default_rng(4)
    f0 = af.f0_contour(af.AudioSignal(rng.uniform(-1, 1, SR), SR))
    assert np.mean(f0 == 0) >= 0.9


def test_pitch_normalisation_boundaries():
    assert af.normalize_pitch(0.0) == 0.0
    assert af.normalize_pitch(math.exp(4) - 1) == pytest.approx(0.0, abs=1e-12)
    assert af.normalize_pitch(math.exp(5) - 1) == pytest.approx(1.0)
    assert af.normalize_intensity(0.0) == pytest.approx(math.log(1e-10) - 3)
    assert af.normalize_intensity(math.e**3) == pytest.approx(0.0)


def test_prosodic_features_layout():
    # 250 Hz fits a whole number of periods into the 40 ms window
    f = af.prosodic_features(tone(250.0))
    assert f.fps == 200 and f.dim == 4
    assert np.all(f.data[0, [1, 3]] == 0)
    assert np.all(f.data[:, 2] >= 0)
    # steady tone: interior derivative dims vanish
    assert np.abs(f.data[10:-10, 1]).max() < 1e-6
    np.testing.assert_allclose(f.data[10:-10, 2], math.log(251) - 4, atol=0.01)
    flat = af.prosodic_features(silence(0.3))
    assert not flat.data[:, [1, 2, 3]].any()


# ---------------------------------------------------------------- resampling

def test_downsample_average():
    f = af.FeatureSequence("combined", 100, np.arange(1, 7, dtype=float)[:, None])
    out = af.downsample_average(f, 5)
    assert out.fps == 20 and out.data.tolist() == [[3.0]]
    same = af.downsample_average(f, 1)
    np.testing.assert_array_equal(same.data, f.data)
    with pytest.raises(ValueError):
        af.downsample_average(f, 0)
    with pytest.raises(ValueError):
        af.downsample_average(f, 7)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100), st.integers(1, 6), st.integers(0, 1000))
def test_downsample_commutes_with_scaling(c, factor, seed):
    rng = np.random.default_rng(seed)
    f = af.FeatureSequence("combined", 60, rng.normal(size=(37, 3)))
    a = af.downsample_average(af.FeatureSequence("combined", 60, c * f.data), factor).data
    b = c * af.downsample_average(f, factor).data
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_concat_and_feature_sets():
    assert af.feature_set_dim("mfcc+pros") == 30
    assert af.feature_set_dim("all") == 94
    sig = tone(200.0, seconds=1.0)
    m = af.extract(sig, "mfcc")
    assert m.fps == 20 and m.dim == 26
    assert af.concat_features([m]) is m
    combo = af.extract(sig, "all")
    assert combo.kind == "combined" and combo.dim == 94
    n = combo.n_frames
    np.testing.assert_array_equal(combo.data[:, :26], m.data[:n])
    with pytest.raises(ValueError):
        af.concat_features([m, af.FeatureSequence("prosodic", 200, np.zeros((3, 4)))])


def test_extractors_deterministic():
    rng = np.random.default_rng(5)
    sig = af.AudioSignal(rng.uniform(-1, 1, SR), SR)
    for name in af.FEATURE_SETS:
        np.testing.assert_array_equal(af.extract(sig, name).data, af.extract(sig, name).data)


def test_wav_and_feature_csv_roundtrip(tmp_path):
    sig = tone(300.0, seconds=0.5)
    af.write_wav(tmp_path / "a.wav", sig)
    back = af.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR
    np.testing.assert_allclose(back.samples, sig.samples, atol=1 / 32767)
    f = af.extract(back, "mfcc+pros")
    af.write_feature_csv(f, tmp_path / "f.csv")
    g = af.read_feature_csv(tmp_path / "f.csv")
    assert (g.kind, g.fps, g.dim) == (f.kind, f.fps, f.dim)
    np.testing.assert_array_equal(g.data, f.data)
