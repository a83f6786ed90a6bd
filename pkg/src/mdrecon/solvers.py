"""Classical sparse recovery over the partial-Fourier measurement model.

A window of available samples h relates to the full-window DFT z through
h = M F z + n, where F is the unitary inverse DFT matrix and M selects the
available rows.  All solvers run in the realized (real) domain where the
Hermitian transpose becomes a plain transpose.

iht_solve doubles as the ground-truth engine: run to convergence on complete
windows it defines the reference spectrogram that the learned model is
trained against.  The fixed-step iteration contracts slowly for large mu
(factor |1 - 1/mu| per iteration on the retained support), so by default a
final least-squares refit on the recovered support is applied; pass
debias=False for the raw iterate, e.g. when comparing against the unrolled
single-iteration layer.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import (complex_magnitudes, hard_threshold, inverse_dft_matrix,
                       realize_matrix, realize_vector, soft_threshold)
from .synth import CirSequence, CirWindow

_DFT_CACHE: dict = {}


def _dft(k: int) -> np.ndarray:
    if k not in _DFT_CACHE:
        _DFT_CACHE[k] = inverse_dft_matrix(k)
    return _DFT_CACHE[k]


@dataclass(eq=False)
class SensingOperator:
    """Realized partial-Fourier operator for one availability mask."""

    mask: np.ndarray
    complex_phi: np.ndarray      # (m_t, K) rows of F at available samples
    phi: np.ndarray              # (2 m_t, 2K) realization of complex_phi
    full: bool                   # True when every sample is available
    _gram: np.ndarray = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.mask.size

    @property
    def m_t(self) -> int:
        return int(self.mask.sum())

    def apply(self, z) -> np.ndarray:
        """Realized forward map, R(M F) @ z."""
        return self.phi @ z

    def adjoint(self, h) -> np.ndarray:
        """Realized adjoint, R(M F)^T @ h (zero-fill then conjugate DFT)."""
        return self.phi.T @ h

    def gram(self) -> np.ndarray:
        """phi.T @ phi, cached; the identity for a full mask."""
        if self._gram is None:
            if self.full:
                self._gram = np.eye(2 * self.k)
            else:
                self._gram = self.phi.T @ self.phi
        return self._gram


def build_sensing(mask) -> SensingOperator:
    """Operator selecting the masked rows of the inverse DFT matrix."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 1:
        raise ValueError("mask has no available samples")
    rows = _dft(mask.size)[mask, :]
    return SensingOperator(mask, rows, realize_matrix(rows), bool(mask.all()))


@dataclass(eq=False)
class SolveReport:
    """Outcome of one solver run on one window."""

    z: np.ndarray                # realized DFT estimate, shape (2K,)
    iterations: int
    final_residual: float
    converged: bool
    diverged: bool = False
    degenerate: bool = False     # OMP hit a rank-deficient subproblem


def _measured(window: CirWindow, op: SensingOperator) -> np.ndarray:
    return realize_vector(window.values[op.mask])


def _residual(op: SensingOperator, z, h) -> float:
    return float(np.linalg.norm(op.apply(z) - h))


def _debias(op: SensingOperator, z, h) -> np.ndarray:
    """Least-squares refit of the complex amplitudes on the support of z."""
    supp = np.nonzero(complex_magnitudes(z) > 0)[0]
    if supp.size == 0:
        return z
    a = op.complex_phi[:, supp]
    h_c = h[:h.size // 2] + 1j * h[h.size // 2:]
    coef, *_ = np.linalg.lstsq(a, h_c, rcond=None)
    k = op.k
    out = np.zeros(2 * k)
    out[supp] = coef.real
    out[supp + k] = coef.imag
    return out


def _thresholded_solve(window, op, threshold, mu, max_iter, tol):
    """Shared fixed-step iteration z <- T((1/mu) phi^T h + (I - (1/mu) phi^T phi) z)."""
    if op is None:
        op = build_sensing(window.mask)
    h = _measured(window, op)
    c = op.adjoint(h) / mu
    gram = None if op.full else op.gram()
    z = threshold(c)
    res0 = _residual(op, z, h)
    growth_streak = 0
    iters = 0
    converged = diverged = False
    for i in range(max_iter):
        if gram is None:
            u = c + (1.0 - 1.0 / mu) * z   # full mask: the Gram matrix is the identity
        else:
            u = c + z - (gram @ z) / mu
        z_next = threshold(u)
        iters = i + 1
        step = float(np.linalg.norm(z_next - z))
        z = z_next
        res = _residual(op, z, h)
        if res0 > 0 and res > 10.0 * res0:
            growth_streak += 1
            if growth_streak >= 5:
                diverged = True
                break
        else:
            growth_streak = 0
        if step < tol:
            converged = True
            break
    return op, h, z, iters, converged, diverged


def iht_solve(window: CirWindow, omega: int = 5, mu: float = 20.0,
              max_iter: int = 100, tol: float = 1e-6, debias: bool = True,
              op: SensingOperator = None) -> SolveReport:
    """Hard-thresholded fixed-step iteration keeping omega complex bins.

    Starts from z = H((1/mu) phi^T h).  Stops when the iterate moves less
    than tol in l2 or after max_iter updates; flags divergence when the
    residual exceeds 10x its initial value for five consecutive iterations.
    """
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if mu <= 0:
        raise ValueError("mu must be positive")
    thr = lambda v: hard_threshold(v, omega)[0]
    op, h, z, iters, converged, diverged = _thresholded_solve(
        window, op, thr, mu, max_iter, tol)
    if debias and not diverged:
        z = _debias(op, z, h)
    return SolveReport(z, iters, _residual(op, z, h), converged, diverged)


def ista_solve(window: CirWindow, lam: float = None, mu: float = 20.0,
               max_iter: int = 100, tol: float = 1e-6,
               op: SensingOperator = None) -> SolveReport:
    """Soft-thresholded iteration (elementwise shrinkage by lam/mu).

    lam=None scales the penalty to the data: 0.1 times the largest complex
    magnitude of phi^T h.
    """
    if lam is not None and lam < 0:
        raise ValueError("lam must be >= 0")
    if mu <= 0:
        raise ValueError("mu must be positive")
    if op is None:
        op = build_sensing(window.mask)
    if lam is None:
        corr = op.adjoint(_measured(window, op))
        lam = 0.1 * float(complex_magnitudes(corr).max())
    thr = lambda v: soft_threshold(v, lam / mu)
    op, h, z, iters, converged, diverged = _thresholded_solve(
        window, op, thr, mu, max_iter, tol)
    return SolveReport(z, iters, _residual(op, z, h), converged, diverged)


def omp_solve(window: CirWindow, omega: int = 5,
              op: SensingOperator = None) -> SolveReport:
    """Greedy atom selection with least-squares refit on the complex support.

    Each step picks the DFT column pair best correlated with the residual and
    refits all selected amplitudes by normal equations (Tikhonov jitter 1e-10).
    An atom that makes the subproblem numerically rank-deficient is skipped in
    favor of the next best and the report is flagged degenerate.
    """
    if omega < 1:
        raise ValueError("omega must be >= 1")
    if op is None:
        op = build_sensing(window.mask)
    if omega > op.m_t:
        raise ValueError(f"omega={omega} exceeds available samples m_t={op.m_t}")
    h_c = window.values[op.mask]
    k = op.k
    support: list = []
    coef = np.zeros(0, dtype=complex)
    residual = h_c.copy()
    res_norm = float(np.linalg.norm(residual))
    degenerate = False
    iters = 0
    for _ in range(omega):
        if res_norm < 1e-12 * max(1.0, float(np.linalg.norm(h_c))):
            break
        corr = np.abs(op.complex_phi.conj().T @ residual)
        corr[support] = -1.0
        candidates = np.argsort(-corr, kind="stable")
        for candidate in candidates:
            trial = support + [int(candidate)]
            a = op.complex_phi[:, trial]
            g = a.conj().T @ a
            cond = np.linalg.cond(g)
            if not np.isfinite(cond) or cond > 1e12:
                degenerate = True
                continue
            coef = np.linalg.solve(g, a.conj().T @ h_c)
            support = trial
            break
        else:
            # every remaining atom is rank-deficient with the current support;
            # accept the best-correlated one under a Tikhonov-jittered refit
            trial = support + [int(candidates[0])]
            a = op.complex_phi[:, trial]
            g = a.conj().T @ a
            coef = np.linalg.solve(g + 1e-10 * np.eye(len(trial)),
                                   a.conj().T @ h_c)
            support = trial
            degenerate = True
        residual = h_c - op.complex_phi[:, support] @ coef
        res_norm = float(np.linalg.norm(residual))
        iters += 1
    z = np.zeros(2 * k)
    if support:
        z[np.array(support)] = coef.real
        z[np.array(support) + k] = coef.imag
    return SolveReport(z, iters, res_norm, True, degenerate=degenerate)


def md_spectrum(z) -> np.ndarray:
    """Squared complex magnitude per bin of a realized DFT vector."""
    z = np.asarray(z, dtype=float)
    k = z.size // 2
    return z[:k] ** 2 + z[k:] ** 2


def minmax_normalize(arr) -> np.ndarray:
    """Scale an array to [0, 1]; a constant array maps to all zeros."""
    arr = np.asarray(arr, dtype=float)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def full_window_targets(seq: CirSequence, omega: int = 5, mu: float = 20.0,
                        k: int = 64, delta: int = 32, max_iter: int = 300):
    """Converged-IHT targets from the complete (unmasked) windows.

    Returns (y_gt, z_gt, scale, degenerate):
      y_gt        (T, K) micro-Doppler spectrogram, min-max normalized
      z_gt        (T, 2K) realized DFT reconstructions at convergence (raw scale)
      scale       max raw spectrogram value before normalization
      degenerate  (T,) bool, True for all-zero windows (excluded from losses)

    Missing samples are ignored: synthetic sequences carry the true values.
    All windows share the full-mask operator, so the iteration runs batched
    with the scalar Gram shortcut and a per-window least-squares debias.
    """
    length = len(seq)
    if length < k:
        raise ValueError("sequence shorter than one window")
    count = (length - k) // delta + 1
    dft = _dft(k)
    starts = np.arange(count) * delta
    wins = np.stack([seq.samples[s:s + k] for s in starts])      # (T, K)
    d = wins @ dft.conj()                                        # rows: F^H h
    c = np.concatenate([d.real, d.imag], axis=1)                 # (T, 2K) realized
    degenerate = np.all(wins == 0, axis=1)

    z = _batch_hard(c / mu, omega, k)
    for _ in range(max_iter):
        z = _batch_hard(c / mu + (1.0 - 1.0 / mu) * z, omega, k)
    # debias: with orthonormal full-mask columns the least-squares amplitudes
    # are exactly the matched-filter outputs on the retained support
    keep = (z[:, :k] ** 2 + z[:, k:] ** 2) > 0
    z_gt = np.where(np.concatenate([keep, keep], axis=1), c, 0.0)
    y_raw = z_gt[:, :k] ** 2 + z_gt[:, k:] ** 2
    scale = float(y_raw.max())
    y_gt = minmax_normalize(y_raw)
    return y_gt, z_gt, scale, degenerate


def _batch_hard(z, omega: int, k: int) -> np.ndarray:
    """Row-wise hard threshold of realized vectors, same tie rule as hard_threshold."""
    mags = np.hypot(z[:, :k], z[:, k:])
    order = np.argsort(-mags, axis=1, kind="stable")
    keep = order[:, :omega]
    sel = np.zeros_like(mags, dtype=bool)
    np.put_along_axis(sel, keep, True, axis=1)
    sel2 = np.concatenate([sel, sel], axis=1)
    return np.where(sel2, z, 0.0)


def ground_truth_spectrogram(seq: CirSequence, omega: int = 5, mu: float = 20.0,
                             k: int = 64, delta: int = 32) -> list:
    """Reference spectrogram: converged IHT on each complete window, normalized."""
    y_gt, _, _, _ = full_window_targets(seq, omega, mu, k, delta)
    return [y_gt[t] for t in range(y_gt.shape[0])]
