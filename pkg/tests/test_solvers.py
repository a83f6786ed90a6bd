import math

import numpy as np
import pytest

from mdrecon.numerics import (complex_magnitudes, inverse_dft_matrix,
                              realize_vector)
from mdrecon.solvers import (build_sensing, full_window_targets,
                             ground_truth_spectrogram, ista_solve, iht_solve,
                             md_spectrum, minmax_normalize, omp_solve)
from mdrecon.synth import CirSequence, CirWindow, SynthConfig, synth_sequence

K = 64


def tone_window(bins, amps, k=K, mask=None):
    """Closed-form multi-tone window plus its exact DFT (the test oracle)."""
    n = np.arange(k)
    h = np.zeros(k, complex)
    z_true = np.zeros(k, complex)
    for b, a in zip(bins, amps):
        h += a * np.exp(2j * np.pi * b * n / k)
        z_true[b % k] = np.sqrt(k) * a
    if mask is None:
        mask = np.ones(k, bool)
    win = CirWindow(np.where(mask, h, 0.0), mask)
    return win, z_true


def test_build_sensing_full_mask_is_unitary():
    op = build_sensing(np.ones(16, bool))
    assert np.max(np.abs(op.gram() - np.eye(32))) < 1e-12


def test_build_sensing_single_sample_rank_one():
    mask = np.zeros(8, bool)
    mask[3] = True
    op = build_sensing(mask)
    assert op.m_t == 1
    assert np.linalg.matrix_rank(op.complex_phi) == 1


def test_build_sensing_rejects_empty():
    with pytest.raises(ValueError):
        build_sensing(np.zeros(8, bool))


def test_sensing_matches_complex_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k = 16
        mask = rng.random(k) > 0.4
        if not mask.any():
            mask[0] = True
        op = build_sensing(mask)
        z = rng.normal(size=k) + 1j * rng.normal(size=k)
        want = realize_vector(inverse_dft_matrix(k)[mask] @ z)
        got = op.apply(realize_vector(z))
        assert np.max(np.abs(want - got)) < 1e-12


def test_iht_zero_input_zero_output():
    win = CirWindow(np.zeros(K, complex), np.ones(K, bool))
    rep = iht_solve(win)
    assert not rep.z.any()
    assert rep.converged and rep.iterations == 1


def test_iht_exact_recovery_three_tones():
    # spec-scale oracle: noiseless on-grid tones, full window
    win, z_true = tone_window([5, 20, 40], [1 + 0.5j, -0.7 + 0.2j, 0.3 - 0.9j])
    rep = iht_solve(win, omega=5, mu=20.0, max_iter=50)
    assert rep.iterations <= 50
    err = np.linalg.norm(rep.z - realize_vector(z_true))
    assert err / np.linalg.norm(z_true) < 1e-6
    support = set(np.nonzero(complex_magnitudes(rep.z) > 1e-9)[0])
    assert support == {5, 20, 40}


def test_iht_without_debias_has_stepsize_scale_error():
    # raw fixed-step iterate contracts by (1 - 1/mu) per iteration
    win, z_true = tone_window([3, 9], [1.0, 0.5j])
    rep = iht_solve(win, omega=3, mu=20.0, max_iter=50, tol=0.0, debias=False)
    rel = np.linalg.norm(rep.z - realize_vector(z_true)) / np.linalg.norm(z_true)
    assert abs(rel - 0.95 ** 51) < 1e-9


def test_iht_output_is_omega_sparse():
    rng = np.random.default_rng(8)
    for _ in range(10):
        mask = rng.random(K) > 0.6
        if not mask.any():
            mask[0] = True
        vals = np.where(mask, rng.normal(size=K) + 1j * rng.normal(size=K), 0.0)
        rep = iht_solve(CirWindow(vals, mask), omega=5)
        assert np.count_nonzero(complex_magnitudes(rep.z)) <= 5


def test_ista_zero_penalty_full_mask_converges_to_dft():
    win, z_true = tone_window([7, 30], [1.0, -0.5 + 0.25j])
    rep = ista_solve(win, lam=0.0, mu=1.2, max_iter=400, tol=1e-14)
    assert np.linalg.norm(rep.z - realize_vector(z_true)) < 1e-8


def test_ista_large_penalty_gives_zero():
    win, _ = tone_window([4], [1.0])
    op = build_sensing(win.mask)
    corr = op.adjoint(realize_vector(win.values))
    lam = 20.0 * (1.1 * complex_magnitudes(corr).max())  # lam/mu above max magnitude
    rep = ista_solve(win, lam=lam, mu=20.0)
    assert not rep.z.any()


def test_ista_zero_input():
    win = CirWindow(np.zeros(K, complex), np.ones(K, bool))
    assert not ista_solve(win).z.any()


def test_omp_single_tone_one_step():
    win, z_true = tone_window([11], [2.0 - 1.0j])
    rep = omp_solve(win, omega=1)
    assert rep.iterations == 1
    assert rep.final_residual < 1e-10
    assert np.allclose(rep.z, realize_vector(z_true), atol=1e-8)


def test_omp_first_step_is_argmax_correlation():
    rng = np.random.default_rng(3)
    mask = rng.random(K) > 0.5
    vals = np.where(mask, rng.normal(size=K) + 1j * rng.normal(size=K), 0.0)
    win = CirWindow(vals, mask)
    # complex matched-filter oracle
    corr = np.abs(inverse_dft_matrix(K)[mask].conj().T @ vals[mask])
    rep = omp_solve(win, omega=1)
    picked = np.nonzero(complex_magnitudes(rep.z))[0]
    assert picked.size == 1 and picked[0] == corr.argmax()


def test_omp_zero_input_zero_coefficients():
    win = CirWindow(np.zeros(K, complex), np.ones(K, bool))
    rep = omp_solve(win, omega=3)
    assert not rep.z.any()


def test_omp_residual_nonincreasing():
    rng = np.random.default_rng(4)
    mask = rng.random(K) > 0.3
    vals = np.where(mask, rng.normal(size=K) + 1j * rng.normal(size=K), 0.0)
    win = CirWindow(vals, mask)
    op = build_sensing(mask)
    h = vals[mask]
    prev = np.linalg.norm(h)
    for omega in range(1, 8):
        res = omp_solve(win, omega=omega, op=op).final_residual
        assert res <= prev + 1e-9
        prev = res


def test_all_solvers_agree_on_grid_tones():
    win, z_true = tone_window([5, 20, 40], [1.0, 0.8j, -0.6])
    true_support = {5, 20, 40}
    for rep in (iht_solve(win, omega=5), omp_solve(win, omega=5),
                ista_solve(win, max_iter=500)):
        mags = complex_magnitudes(rep.z)
        support = set(np.nonzero(mags > 1e-3 * mags.max())[0])
        assert support == true_support


def test_omp_rejects_omega_above_samples():
    mask = np.zeros(K, bool)
    mask[:3] = True
    win = CirWindow(np.where(mask, 1.0 + 0j, 0.0), mask)
    with pytest.raises(ValueError):
        omp_solve(win, omega=5)


def test_ground_truth_zero_sequence_is_zero():
    seq = CirSequence(np.zeros(128, complex), np.ones(128, bool), 2.7e-4, 60e9)
    specs = ground_truth_spectrogram(seq)
    assert len(specs) == 3
    assert not np.array(specs).any()


def test_ground_truth_two_tone_support():
    cfg = SynthConfig(q_range=(2, 2), freq_walk_std=0.0, snr_db=math.inf,
                      snap_to_grid=True, amp_range=(0.5, 0.9), seed=21)
    seq = synth_sequence(cfg, 4)
    y_gt, z_gt, scale, degenerate = full_window_targets(seq)
    assert not degenerate.any()
    freqs = np.array(seq.meta["window_freqs_hz"][0])
    bins = sorted({round(f * cfg.k * cfg.t_c) % cfg.k for f in freqs})
    for t in range(4):
        active = np.nonzero(y_gt[t] > 1e-9)[0]
        assert sorted(active) == bins
    assert y_gt.min() == 0.0 and y_gt.max() == 1.0


def test_ground_truth_matches_per_window_solver():
    # batched full-window path must agree with iht_solve window by window
    cfg = SynthConfig(seed=9)
    seq = synth_sequence(cfg, 3)
    y_gt, z_gt, scale, _ = full_window_targets(seq, max_iter=300)
    from mdrecon.synth import frame_windows
    for t, win in enumerate(frame_windows(seq, cfg.k, cfg.delta)):
        rep = iht_solve(win, omega=5, mu=20.0, max_iter=300, tol=0.0)
        assert np.max(np.abs(rep.z - z_gt[t])) < 1e-9
        assert np.max(np.abs(md_spectrum(rep.z) / scale - y_gt[t])) < 1e-9


def test_minmax_normalize_bounds():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(5, 7))
    out = minmax_normalize(arr)
    assert out.min() == 0.0 and out.max() == 1.0
    assert not minmax_normalize(np.full((3, 3), 2.5)).any()
