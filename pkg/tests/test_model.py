import numpy as np
import pytest

from mdrecon.model import (ModelParams, PastBuffer, attention_context,
                           count_params, forward_sequence, forward_window,
                           gram_term, liht_forward, md_convert, param_init,
                           refine)
from mdrecon.numerics import complex_magnitudes, inverse_dft_matrix, realize_matrix
from mdrecon.solvers import iht_solve
from mdrecon.synth import CirWindow, SynthConfig, frame_windows, gen_window_mask, synth_sequence

K = 64


def random_window(rng, k=K, p=0.0):
    mask = rng.random(k) >= p
    if not mask.any():
        mask[0] = True
    vals = np.where(mask, rng.normal(size=k) + 1j * rng.normal(size=k), 0.0)
    return CirWindow(vals, mask)


def test_param_init_w_is_realized_dft():
    params = param_init(K, seed=0)
    expect = realize_matrix(inverse_dft_matrix(K))
    assert np.array_equal(params.w, expect)
    # unitary complex matrix realizes to an orthogonal real matrix
    assert np.max(np.abs(params.w.T @ params.w - np.eye(2 * K))) < 1e-13


def test_param_init_uniform_bounds():
    params = param_init(K, seed=1)
    bound = 1.0 / np.sqrt(K)
    for t in (params.u, params.v, params.b):
        assert np.all(np.abs(t) <= bound)
    # symmetric interval: both signs show up
    assert (params.u < 0).any() and (params.u > 0).any()


def test_param_init_deterministic():
    a, b = param_init(K, seed=5), param_init(K, seed=5)
    for ta, tb in zip(a.learnable().values(), b.learnable().values()):
        assert np.array_equal(ta, tb)


def test_param_init_learn_s_starts_tied():
    params = param_init(8, seed=0, variant="learn-s")
    expect = np.eye(16) - (params.w.T @ params.w) / params.mu
    assert np.array_equal(params.s, expect)
    assert np.array_equal(gram_term(params), params.s)


def test_count_params_paper_values():
    assert count_params(64, False) == 24640
    assert count_params(64, True) == 41024
    assert count_params(8, False) == 392


def test_liht_matches_one_solver_iteration_at_init():
    # oracle: the classical solver stopped after one raw update; the
    # equivalence is exact for full windows, where the fixed-shape W and the
    # mask-dependent sensing operator share the same Gram term
    rng = np.random.default_rng(0)
    params = param_init(K, seed=0)
    for _ in range(100):
        win = random_window(rng, p=0.0)
        z, _ = liht_forward(win, params)
        rep = iht_solve(win, omega=params.omega, mu=params.mu, max_iter=1,
                        tol=0.0, debias=False)
        assert np.max(np.abs(z - rep.z)) < 1e-9


def test_liht_zero_input():
    params = param_init(K, seed=0)
    win = CirWindow(np.zeros(K, complex), np.ones(K, bool))
    z, support = liht_forward(win, params)
    assert not z.any()


def test_liht_sparsity_bound():
    rng = np.random.default_rng(1)
    params = param_init(K, seed=2)
    # also after the weights move away from the DFT
    params.w += rng.normal(scale=0.05, size=params.w.shape)
    for _ in range(20):
        z, support = liht_forward(random_window(rng, p=0.5), params)
        assert np.count_nonzero(complex_magnitudes(z)) <= params.omega
        assert support.size == params.omega


def test_md_convert_matches_complex_magnitude():
    rng = np.random.default_rng(3)
    zc = rng.normal(size=K) + 1j * rng.normal(size=K)
    z = np.concatenate([zc.real, zc.imag])
    assert np.max(np.abs(md_convert(z) - np.abs(zc) ** 2)) < 1e-12
    assert not md_convert(np.zeros(2 * K)).any()
    unit = np.zeros(2 * K)
    unit[0] = 1.0
    expect = np.zeros(K)
    expect[0] = 1.0
    assert np.array_equal(md_convert(unit), expect)


def test_attention_identical_past_returns_it():
    rng = np.random.default_rng(4)
    s = np.abs(rng.normal(size=K))
    buf = np.tile(s, (6, 1))
    a, w = attention_context(rng.random(K), buf)
    assert np.allclose(a, s)
    assert np.allclose(w, 1.0 / 6.0)


def test_attention_zero_buffer_uniform_weights():
    a, w = attention_context(np.random.default_rng(0).random(K), np.zeros((6, K)))
    assert not a.any()
    assert np.allclose(w, 1.0 / 6.0)


def test_attention_convexity_properties():
    rng = np.random.default_rng(5)
    for _ in range(200):
        buf = np.abs(rng.normal(size=(6, K))) * rng.uniform(0.1, 10)
        y = np.abs(rng.normal(size=K)) * rng.uniform(0.1, 10)
        a, w = attention_context(y, buf)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.all(a >= buf.min(axis=0) - 1e-12)
        assert np.all(a <= buf.max(axis=0) + 1e-12)


def test_refine_dead_relu_half_gate():
    params = param_init(K, seed=6)
    params.b = -np.abs(params.b)  # additive branch inactive at a = 0
    y_tilde = np.abs(np.random.default_rng(1).normal(size=K))
    y = refine(y_tilde, np.zeros(K), params)
    assert np.allclose(y, 0.5 * y_tilde)


def test_refine_output_nonnegative_gate_in_unit_interval():
    rng = np.random.default_rng(7)
    params = param_init(K, seed=8)
    for _ in range(100):
        y_tilde = np.abs(rng.normal(size=K))
        a = rng.normal(size=K)
        y = refine(y_tilde, a, params)
        assert np.all(y >= 0)
        gate = 1.0 / (1.0 + np.exp(-(params.v @ a)))
        assert np.all((gate > 0) & (gate < 1))


def test_buffer_is_causal_ring():
    buf = PastBuffer(3, 2)
    assert buf.matrix().shape == (3, 2)
    buf.push([1.0, 1.0])
    buf.push([2.0, 2.0])
    assert np.array_equal(buf.matrix(), [[2, 2], [1, 1], [0, 0]])
    buf.push([3.0, 3.0])
    buf.push([4.0, 4.0])
    assert np.array_equal(buf.matrix(), [[4, 4], [3, 3], [2, 2]])


def test_forward_window_pushes_output():
    rng = np.random.default_rng(8)
    params = param_init(K, seed=9)
    buf = PastBuffer(params.n_past, K)
    y = forward_window(random_window(rng), buf, params)
    assert np.array_equal(buf.matrix()[0], y)


def test_first_window_uses_zero_buffer():
    rng = np.random.default_rng(9)
    params = param_init(K, seed=10)
    win = random_window(rng)
    got = forward_sequence([win], params)[0]
    cacheless = forward_window(win, PastBuffer(params.n_past, K), params)
    assert np.array_equal(got, cacheless)


def test_forward_sequence_causality():
    # truncating the future must not change earlier outputs
    rng = np.random.default_rng(10)
    params = param_init(K, seed=11)
    wins = [random_window(rng, p=0.5) for _ in range(8)]
    full = forward_sequence(wins, params)
    head = forward_sequence(wins[:5], params)
    assert np.array_equal(full[:5], head)


def test_forward_sequence_fresh_buffer_per_sequence():
    rng = np.random.default_rng(11)
    params = param_init(K, seed=12)
    a = [random_window(rng) for _ in range(3)]
    b = [random_window(rng) for _ in range(3)]
    out_a1 = forward_sequence(a, params)
    _ = forward_sequence(b, params)
    out_a2 = forward_sequence(a, params)
    assert np.array_equal(out_a1, out_a2)


def test_no_attention_variant_is_bare_liht():
    rng = np.random.default_rng(12)
    params = param_init(K, seed=13, variant="no-attention")
    wins = [random_window(rng, p=0.6) for _ in range(4)]
    out = forward_sequence(wins, params)
    for t, win in enumerate(wins):
        z, _ = liht_forward(win, params)
        assert np.array_equal(out[t], md_convert(z))


def test_only_add_variant_skips_gate():
    rng = np.random.default_rng(13)
    params = param_init(K, seed=14, variant="only-add")
    buf = PastBuffer(params.n_past, K)
    buf.push(np.abs(rng.normal(size=K)))
    win = random_window(rng)
    y = forward_window(win, PastBuffer(params.n_past, K), params)
    z, _ = liht_forward(win, params)
    y_tilde = md_convert(z)
    assert np.all(y >= y_tilde - 1e-12)  # additive branch only ever adds


def test_nonnegative_outputs_all_variants():
    rng = np.random.default_rng(14)
    for variant in ("none", "no-attention", "only-add", "learn-s"):
        params = param_init(K, seed=15, variant=variant)
        wins = [random_window(rng, p=0.7) for _ in range(5)]
        assert np.all(forward_sequence(wins, params) >= 0)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        param_init(K, variant="bogus")
