import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conmamba_asr import InputError
from conmamba_asr.frontend import (FeatureSequence, FrontendConfig, NormStats, SpecAugmentPolicy, Waveform,
                                   apply_time_masks, compute_log_mel, mel_center_frequencies, normalize,
                                   read_wav, write_wav)


def test_one_second_gives_98_frames():
    feats = compute_log_mel(Waveform(np.zeros(16000)))
    assert feats.frames.shape == ((16000 - 400) // 160 + 1, 80) == (98, 80)
    assert feats.frame_rate == 100


def test_silence_is_log_floor_everywhere():
    cfg = FrontendConfig()
    feats = compute_log_mel(Waveform(np.zeros(4000)), cfg)
    assert np.all(feats.frames == np.log(cfg.log_floor))


def test_sine_peaks_at_nearest_mel_centre():
    # centres recomputed here from the HTK mel formula, independent of the module
    top = 2595 * np.log10(1 + 8000 / 700)
    centres = 700 * (10 ** (np.linspace(0, top, 82)[1:-1] / 2595) - 1)
    nearest = int(np.argmin(np.abs(centres - 440)))
    np.testing.assert_allclose(mel_center_frequencies(FrontendConfig()), centres)
    t = np.arange(16000) / 16000
    feats = compute_log_mel(Waveform(0.5 * np.sin(2 * np.pi * 440 * t)))
    assert nearest == 15
    assert np.all(feats.frames.argmax(axis=1) == nearest)


def test_too_short_and_non_finite():
    with pytest.raises(InputError, match="too short"):
        compute_log_mel(Waveform(np.zeros(399)))
    bad = np.zeros(1000)
    bad[10] = np.nan
    with pytest.raises(InputError):
        compute_log_mel(Waveform(bad))


def test_shift_covariance_at_hop_granularity():
    rng = np.random.default_rng(0)
    x = np.concatenate([np.zeros(400), rng.uniform(-0.5, 0.5, 8000)])
    base = compute_log_mel(Waveform(x)).frames
    shifted = compute_log_mel(Waveform(np.concatenate([np.zeros(160), x]))).frames
    assert shifted.shape[0] == base.shape[0] + 1
    np.testing.assert_allclose(shifted[1:], base, atol=1e-6)
    assert np.all(shifted[0] == base[0])  # prepended frame is silence too


@settings(max_examples=20, deadline=None)
@given(n=st.integers(400, 5000), seed=st.integers(0, 1000))
def test_frame_count_and_finite(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    feats = compute_log_mel(Waveform(x))
    assert feats.num_frames == (n - 400) // 160 + 1
    assert np.all(np.isfinite(feats.frames))


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(1).uniform(-0.9, 0.9, 1234)
    write_wav(tmp_path / "a.wav", Waveform(x))
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    np.testing.assert_allclose(back.samples, x, atol=0.5 / 32768 + 1e-12)


# --- SpecAugment ---------------------------------------------------------------


def _feats(T=100, F=80, seed=0):
    return FeatureSequence(np.random.default_rng(seed).normal(size=(T, F)) + 3.0)


def test_zero_masks_is_identity():
    f = _feats()
    out = apply_time_masks(f, SpecAugmentPolicy(num_time_masks=0, seed=5))
    assert np.array_equal(out.frames, f.frames)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_masks_zero_fill_and_leave_rest_untouched(seed):
    f = _feats()
    out = apply_time_masks(f, SpecAugmentPolicy(2, 10, "zero", seed))
    changed = np.any(out.frames != f.frames, axis=1)
    assert np.all(out.frames[changed] == 0.0)
    assert np.array_equal(out.frames[~changed], f.frames[~changed])
    assert 0 <= changed.sum() <= 20


def test_masks_deterministic_and_mean_fill():
    f = _feats()
    p = SpecAugmentPolicy(3, 15, "mean", 42)
    a, b = apply_time_masks(f, p), apply_time_masks(f, p)
    assert np.array_equal(a.frames, b.frames)
    changed = np.any(a.frames != f.frames, axis=1)
    assert changed.any()
    np.testing.assert_array_equal(a.frames[changed], np.broadcast_to(f.frames.mean(0), a.frames[changed].shape))


def test_policy_validation():
    with pytest.raises(Exception):
        SpecAugmentPolicy(num_time_masks=-1)
    with pytest.raises(Exception):
        SpecAugmentPolicy(max_mask_width=-2)


# --- normalization ------------------------------------------------------------


def test_unit_stats_identity():
    f = _feats(10, 4)
    out = normalize(f, NormStats(np.zeros(4), np.ones(4)))
    assert np.array_equal(out.frames, f.frames)


def test_constant_bin_normalizes_to_zero():
    f = _feats(50, 5)
    f.frames[:, 2] = 0.7
    out = normalize(f)
    np.testing.assert_allclose(out.frames[:, 2], 0.0, atol=1e-9)


def test_self_stats_zero_mean_unit_variance():
    f = FeatureSequence(np.random.default_rng(3).normal(2.0, 5.0, size=(50, 80)))
    out = normalize(f).frames
    assert np.abs(out.mean(0)).max() < 1e-5
    np.testing.assert_allclose(out.var(0), 1.0, atol=1e-5)


def test_bin_mismatch_raises():
    with pytest.raises(InputError):
        normalize(_feats(5, 4), NormStats(np.zeros(3), np.ones(3)))


def test_corpus_stats_and_round_trip(tmp_path):
    seqs = [_feats(20, 6, s).frames for s in range(3)]
    stats = NormStats.from_corpus(seqs)
    stacked = np.concatenate(seqs)
    np.testing.assert_allclose(stats.mean, stacked.mean(0))
    np.testing.assert_allclose(stats.std, stacked.std(0))
    stats.save(tmp_path / "s.txt")
    back = NormStats.load(tmp_path / "s.txt")
    assert np.array_equal(back.mean, stats.mean) and np.array_equal(back.std, stats.std)
