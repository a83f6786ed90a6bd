import math

import numpy as np
import pytest

from mdrecon.numerics import inverse_dft_matrix
from mdrecon.synth import (CirSequence, CirWindow, ConfigError, SynthConfig,
                           doppler_axis, frame_windows, gen_grid_mask,
                           gen_window_mask, synth_sequence)


def test_config_validation_rejects_bad_delta():
    with pytest.raises(ConfigError):
        synth_sequence(SynthConfig(k=64, delta=0), 2)
    with pytest.raises(ConfigError):
        synth_sequence(SynthConfig(k=64, delta=65), 2)


def test_config_validation_rejects_aliasing_speed():
    # v_max mapping to a Doppler at or beyond 1/(2 t_c) must be refused
    with pytest.raises(ConfigError):
        synth_sequence(SynthConfig(v_max=5.0), 2)  # 4.63 m/s is the ceiling here


def test_zero_scatterers_without_noise_is_zero():
    cfg = SynthConfig(q_range=(0, 0), snr_db=math.inf, seed=1)
    seq = synth_sequence(cfg, 3)
    assert not seq.samples.any()


def test_zero_scatterers_with_noise_is_noise_only():
    cfg = SynthConfig(q_range=(0, 0), snr_db=20.0, seed=1)
    seq = synth_sequence(cfg, 3)
    assert seq.samples.any()


def test_single_grid_tone_hits_one_dft_bin():
    # oracle: closed-form DFT of an on-grid tone concentrates in one bin
    cfg = SynthConfig(q_range=(1, 1), freq_walk_std=0.0, snr_db=math.inf,
                      snap_to_grid=True, seed=7)
    seq = synth_sequence(cfg, 1)
    f = inverse_dft_matrix(cfg.k)
    z = f.conj().T @ seq.samples[:cfg.k]
    mags = np.abs(z)
    assert np.count_nonzero(mags > 1e-9 * mags.max()) == 1
    freq = cfg.meta_freq = seq.meta["window_freqs_hz"][0][0]
    bin_idx = round(freq * cfg.k * cfg.t_c) % cfg.k
    assert mags.argmax() == bin_idx


def test_zero_walk_keeps_frequencies_fixed():
    cfg = SynthConfig(freq_walk_std=0.0, seed=3)
    seq = synth_sequence(cfg, 6)
    freqs = np.array(seq.meta["window_freqs_hz"])
    assert np.all(freqs == freqs[0])


def test_generated_frequencies_below_alias_limit():
    cfg = SynthConfig(v_max=4.0, freq_walk_std=200.0, seed=11)
    seq = synth_sequence(cfg, 20)
    freqs = np.array(seq.meta["window_freqs_hz"])
    f_m = 1.0 / (2.0 * cfg.t_c)
    assert np.all(np.abs(freqs) < f_m)


def test_generation_is_deterministic():
    cfg = SynthConfig(seed=42)
    a = synth_sequence(cfg, 5)
    b = synth_sequence(cfg, 5)
    assert np.array_equal(a.samples, b.samples)
    assert a.meta == b.meta


def test_frame_window_count():
    seq = synth_sequence(SynthConfig(seed=0), 3)
    assert len(seq) == 128
    windows = frame_windows(seq, 64, 32)
    assert len(windows) == 3


def test_frame_single_window():
    seq = synth_sequence(SynthConfig(seed=0), 1)
    assert len(frame_windows(seq, 64, 32)) == 1


def test_frame_too_short_errors():
    seq = CirSequence(np.zeros(10, complex), np.ones(10, bool), 1e-3, 60e9)
    with pytest.raises(ValueError):
        frame_windows(seq, 64, 32)


def test_adjacent_windows_share_samples():
    cfg = SynthConfig(seed=5)
    seq = synth_sequence(cfg, 4)
    rng = np.random.default_rng(0)
    seq.grid_mask[:] = gen_grid_mask(len(seq), 0.5, rng, cfg.k, cfg.delta)
    seq = CirSequence(np.where(seq.grid_mask, seq.samples, 0.0), seq.grid_mask,
                      seq.t_c, seq.f_c, seq.meta)
    windows = frame_windows(seq, cfg.k, cfg.delta)
    for a, b in zip(windows, windows[1:]):
        shared = cfg.k - cfg.delta
        assert np.array_equal(a.values[-shared:], b.values[:shared])
        assert np.array_equal(a.mask[-shared:], b.mask[:shared])


def test_window_mask_all_true_at_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert gen_window_mask(64, 0.0, rng).all()


def test_window_mask_never_empty():
    rng = np.random.default_rng(1)
    for _ in range(500):
        assert gen_window_mask(8, 0.89, rng).any()


def test_window_mask_mean_missing_fraction():
    # Monte Carlo oracle: E[missing] = E[p] = p_max / 2
    rng = np.random.default_rng(123)
    k, draws = 64, 100_000
    missing = 0
    for _ in range(draws):
        missing += k - gen_window_mask(k, 0.9, rng).sum()
    assert abs(missing / (draws * k) - 0.45) < 0.01


def test_grid_mask_zero_fraction_all_available():
    rng = np.random.default_rng(0)
    assert gen_grid_mask(256, 0.0, rng).all()


def test_grid_mask_window_means():
    # binomial oracle: mean available per 64-window at 90% missing is 6.4
    rng = np.random.default_rng(9)
    counts = []
    for rep in range(300):
        mask = gen_grid_mask(1024, 0.9, rng, 64, 32)
        counts.extend(mask[t * 32:t * 32 + 64].sum() for t in range(31))
    assert abs(np.mean(counts) - 6.4) < 0.3


def test_grid_mask_windows_never_empty():
    rng = np.random.default_rng(2)
    for _ in range(50):
        mask = gen_grid_mask(256, 0.97, rng, 64, 32)
        for t in range((256 - 64) // 32 + 1):
            assert mask[t * 32:t * 32 + 64].any()


def test_window_invariant_rejects_unmasked_nonzero():
    with pytest.raises(ValueError):
        CirWindow(np.ones(4, complex), np.array([True, False, True, True]))


def test_doppler_axis_paper_scale_values():
    ax = doppler_axis(64, 2.7e-4, 60e9)
    assert round(ax.delta_v, 2) == 0.14          # table value
    assert abs(ax.delta_v - 0.14458) < 1e-4
    assert abs(ax.v_max - 4.62643) < 1e-3        # formula value, not the rounded 4.48
    assert abs(ax.delta_f - 1.0 / (64 * 2.7e-4)) < 1e-12
    assert abs(ax.f_max - 1.0 / (2 * 2.7e-4)) < 1e-12


def test_doppler_axis_scaling_with_k():
    a = doppler_axis(64, 2.7e-4, 60e9)
    b = doppler_axis(128, 2.7e-4, 60e9)
    assert abs(b.delta_v - a.delta_v / 2) < 1e-12
    assert b.v_max == a.v_max


def test_doppler_axis_bins_are_dft_ordered():
    ax = doppler_axis(8, 1e-3, 60e9)
    assert np.array_equal(ax.bin_freqs_hz, np.fft.fftfreq(8, 1e-3))
