from __future__ import annotations

import numpy as np
import pytest

from slukit import tensor as T
from slukit.audio import AudioSignal, read_audio, read_rawf, read_wav, speed_perturb, write_rawf, write_wav
from slukit.errors import DataError, FormatError
from slukit.features import (
    FeatureNormalizer,
    FrontendConfig,
    LOG_FLOOR,
    compute_filterbank,
    hz_to_mel,
    load_features,
    mel_to_hz,
    project_features,
    save_features,
)


def tone(freq, seconds=1.0, sr=16000, amp=0.5):
    t = np.arange(int(seconds * sr)) / sr
    return AudioSignal((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32), sr)


def test_wav_round_trip(tmp_path):
    sig = tone(440.0, 0.25)
    write_wav(tmp_path / "a.wav", sig)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert len(back.samples) == len(sig.samples)
    # PCM16 quantization bounds the error
    assert np.abs(back.samples - sig.samples).max() < 1.0 / 32000


def test_rawf_round_trip_is_bit_exact(tmp_path):
    sig = tone(313.0, 0.1)
    write_rawf(tmp_path / "a.rawf", sig)
    back = read_rawf(tmp_path / "a.rawf")
    assert np.array_equal(back.samples, sig.samples)
    dispatched = read_audio(tmp_path / "a.rawf")
    assert np.array_equal(dispatched.samples, sig.samples)


def test_rawf_truncation_names_offset(tmp_path):
    sig = tone(313.0, 0.05)
    write_rawf(tmp_path / "a.rawf", sig)
    blob = (tmp_path / "a.rawf").read_bytes()
    (tmp_path / "cut.rawf").write_bytes(blob[:-5])
    with pytest.raises(FormatError, match="byte offset 12"):
        read_rawf(tmp_path / "cut.rawf")


def test_speed_perturb_identity_and_length():
    sig = tone(200.0, 1.0)
    assert speed_perturb(sig, 1.0) is sig
    fast = speed_perturb(sig, 1.1)
    slow = speed_perturb(sig, 0.9)
    assert len(fast.samples) == int((16000 - 1) / 1.1) + 1
    assert abs(len(slow.samples) - int(np.ceil(16000 / 0.9))) <= 1
    # triple-corpus total duration: 1/0.9 + 1 + 1/1.1 of the original
    total = sum(len(speed_perturb(sig, f).samples) for f in (0.9, 1.0, 1.1))
    assert abs(total / 16000 - 3.0202) < 0.005


def test_speed_perturb_shifts_dominant_frequency():
    sig = tone(440.0, 1.0)
    fast = speed_perturb(sig, 1.1)
    spec = np.abs(np.fft.rfft(fast.samples))
    freqs = np.fft.rfftfreq(len(fast.samples), 1 / 16000)
    peak = freqs[int(np.argmax(spec))]
    assert abs(peak - 440.0 * 1.1) < 5.0


def test_speed_perturb_rejects_nonpositive_factor():
    with pytest.raises(DataError):
        speed_perturb(tone(100.0, 0.1), 0.0)


def test_frame_count_one_second():
    feats = compute_filterbank(tone(440.0, 1.0))
    assert feats.shape == (98, 83)
    assert np.all(np.isfinite(feats))


def test_zero_signal_hits_log_floor():
    sig = AudioSignal(np.zeros(8000, dtype=np.float32))
    feats = compute_filterbank(sig)
    np.testing.assert_allclose(feats[:, :80], np.log(LOG_FLOOR))
    np.testing.assert_allclose(feats[:, 80:], 0.0)


def test_pure_tone_peaks_in_nearest_mel_bin():
    cfg = FrontendConfig()
    feats = compute_filterbank(tone(1000.0, 1.0), cfg)
    hot = np.argmax(feats[:, :80], axis=1)
    # independent center-frequency oracle from the mel scale definition
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(8000.0), cfg.n_mels + 2))
    centers = edges[1:-1]
    want = int(np.argmin(np.abs(centers - 1000.0)))
    assert np.all(np.abs(hot - want) <= 1)


def test_tone_pitch_slots_track_f0():
    feats = compute_filterbank(tone(200.0, 0.5))
    f0 = feats[:, 80] * 400.0
    voicing = feats[:, 81]
    mid = slice(5, -5)
    assert np.all(voicing[mid] > 0.8)
    assert np.abs(np.median(f0[mid]) - 200.0) < 10.0


def test_featurization_is_deterministic():
    sig = tone(333.0, 0.3)
    a = compute_filterbank(sig)
    b = compute_filterbank(sig)
    assert np.array_equal(a, b)


def test_too_short_audio_rejected():
    with pytest.raises(DataError):
        compute_filterbank(AudioSignal(np.zeros(100, dtype=np.float32)))


def test_sluf_round_trip_bit_exact(tmp_path, rng):
    m = rng.normal(size=(7, 512)).astype(np.float32)
    save_features(tmp_path / "f.sluf", m)
    back = load_features(tmp_path / "f.sluf")
    assert back.dtype == np.float32
    assert np.array_equal(back, m)


def test_sluf_bad_magic_and_truncation(tmp_path, rng):
    m = rng.normal(size=(3, 4)).astype(np.float32)
    save_features(tmp_path / "f.sluf", m)
    blob = (tmp_path / "f.sluf").read_bytes()
    (tmp_path / "bad.sluf").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="byte offset 0"):
        load_features(tmp_path / "bad.sluf")
    (tmp_path / "cut.sluf").write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="byte offset 12"):
        load_features(tmp_path / "cut.sluf")


def test_sluf_rejects_empty(tmp_path):
    import struct

    (tmp_path / "e.sluf").write_bytes(b"SLUF" + struct.pack("<II", 0, 83))
    with pytest.raises(FormatError):
        load_features(tmp_path / "e.sluf")


def test_projection_matches_oracle_and_clamps(rng):
    f = T.Tensor(rng.normal(size=(11, 512)).astype(np.float32))
    w = T.Tensor(rng.normal(size=(512, 83)).astype(np.float32) * 0.05)
    b = T.Tensor(rng.normal(size=(83,)).astype(np.float32))
    out = project_features(f, w, b)
    oracle = np.maximum(f.data.astype(np.float64) @ w.data + b.data, 0.0)
    np.testing.assert_allclose(out.data, oracle, atol=1e-5)
    assert np.all(out.data >= 0)
    zero = project_features(f, T.Tensor(np.zeros((512, 83))), T.Tensor(-np.ones(83)))
    assert np.all(zero.data == 0.0)


def test_normalizer_zero_mean_unit_var(rng):
    mats = [rng.normal(loc=3.0, scale=2.0, size=(50, 5)).astype(np.float32) for _ in range(4)]
    norm = FeatureNormalizer.fit(mats)
    stacked = np.concatenate([norm.apply(m) for m in mats])
    np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-3)
    np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-3)
