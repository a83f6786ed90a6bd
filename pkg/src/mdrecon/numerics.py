"""Complex/real realization maps, Fourier matrices and thresholding operators.

Everything downstream (solvers, the learned model, its gradients) works on
real vectors of doubled length, so the conventions here are load-bearing:

  vector map:  x in C^N      ->  [Re(x); Im(x)] in R^(2N)
  matrix map:  X in C^(MxN)  ->  [[Re(X), -Im(X)], [Im(X), Re(X)]]

With these two choices the map is a ring homomorphism,
realize_vector(X @ x) == realize_matrix(X) @ realize_vector(x), and the
Hermitian transpose of a complex matrix becomes the plain transpose of its
realization.  A complex "bin" k of a realized vector z of length 2K lives in
the entry pair (z[k], z[k+K]).
"""

import numpy as np


def realize_vector(x) -> np.ndarray:
    """Map a complex vector of length N to [Re(x); Im(x)] in R^(2N)."""
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag]).astype(float)


def unrealize_vector(xr) -> np.ndarray:
    """Inverse of realize_vector: [Re; Im] of length 2N back to C^N."""
    xr = np.asarray(xr, dtype=float)
    if xr.ndim != 1 or xr.size % 2:
        raise ValueError("realized vector must be 1-D with even length")
    n = xr.size // 2
    return xr[:n] + 1j * xr[n:]


def realize_matrix(X) -> np.ndarray:
    """Map a complex MxN matrix to its 2Mx2N real block realization."""
    X = np.asarray(X)
    return np.block([[X.real, -X.imag], [X.imag, X.real]])


def inverse_dft_matrix(n: int) -> np.ndarray:
    """Unitary inverse DFT matrix, F[a, b] = exp(j 2 pi a b / n) / sqrt(n)."""
    if n < 1:
        raise ValueError("matrix size must be >= 1")
    idx = np.arange(n)
    return np.exp(2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


def complex_magnitudes(z) -> np.ndarray:
    """Per-bin complex magnitudes sqrt(z_k^2 + z_{k+K}^2) of a realized vector."""
    z = np.asarray(z, dtype=float)
    k = z.size // 2
    return np.hypot(z[:k], z[k:])


def hard_threshold(z, omega: int):
    """Keep the omega largest complex bins of a realized vector, zero the rest.

    Bins are ranked by complex magnitude; ties are broken in favor of the
    lower bin index.  Returns (thresholded vector, kept bin indices sorted
    ascending).  The kept set is what gradient rules treat as the retained
    support.
    """
    z = np.asarray(z, dtype=float)
    k = z.size // 2
    if not 0 <= omega <= k:
        raise ValueError(f"sparsity level must be in [0, {k}], got {omega}")
    if omega == 0:
        return np.zeros_like(z), np.empty(0, dtype=int)
    mags = np.hypot(z[:k], z[k:])
    # stable sort on -mags keeps ascending index order among ties
    order = np.argsort(-mags, kind="stable")
    keep = np.sort(order[:omega])
    out = np.zeros_like(z)
    out[keep] = z[keep]
    out[keep + k] = z[keep + k]
    return out, keep


def soft_threshold(x, omega: float) -> np.ndarray:
    """Elementwise shrinkage sign(x) * max(|x| - omega, 0)."""
    if omega < 0:
        raise ValueError("soft threshold must be >= 0")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - omega, 0.0)
