"""Learned single-iteration reconstructor with temporal attention refinement.

The forward pass per window, in order:

  1. one unrolled hard-thresholding iteration with a learnable measurement
     matrix W (2K x 2K, initialized to the realized inverse DFT):
         z0 = H((1/mu) W^T h),  z = H((I - (1/mu) W^T W) z0 + (1/mu) W^T h)
     where h is the zero-filled realized window;
  2. conversion to the micro-Doppler spectrum, y~_i = z_i^2 + z_{i+K}^2;
  3. parameter-free scaled dot-product attention of y~ against the n_past
     most recent output spectra, giving a context vector a;
  4. refinement y = (y~ + ReLU(U a + b)) * sigmoid(V a), an additive
     correction gated by a multiplicative denoising mask.

Variants: "no-attention" stops after step 2, "only-add" drops the sigmoid
gate, "learn-s" replaces (I - (1/mu) W^T W) with a free matrix S.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import hard_threshold, inverse_dft_matrix, realize_matrix, realize_vector
from .synth import CirWindow

VARIANTS = ("none", "no-attention", "only-add", "learn-s")


@dataclass(eq=False)
class ModelParams:
    """Learnable tensors plus the fixed hyperparameters they were built for."""

    w: np.ndarray                # (2K, 2K)
    u: np.ndarray                # (K, K)
    v: np.ndarray                # (K, K)
    b: np.ndarray                # (K,)
    s: np.ndarray = None         # (2K, 2K), learn-s variant only
    k: int = 64
    omega: int = 5
    mu: float = 20.0
    n_past: int = 6
    variant: str = "none"

    def learnable(self) -> dict:
        """Name -> tensor map of everything the optimizer updates."""
        out = {"w": self.w, "u": self.u, "v": self.v, "b": self.b}
        if self.s is not None:
            out["s"] = self.s
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.w.copy(), self.u.copy(), self.v.copy(),
                           self.b.copy(), None if self.s is None else self.s.copy(),
                           self.k, self.omega, self.mu, self.n_past, self.variant)


def param_init(k: int, seed: int = 0, omega: int = 5, mu: float = 20.0,
               n_past: int = 6, variant: str = "none") -> ModelParams:
    """Fresh parameters: W from the realized inverse DFT, U, V, b uniform.

    U, V, b are drawn i.i.d. from U(-1/sqrt(K), 1/sqrt(K)).  The learn-s
    variant initializes S to I - (1/mu) W^T W so it starts equivalent to the
    tied form.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    rng = np.random.default_rng(seed)
    w = realize_matrix(inverse_dft_matrix(k))
    bound = 1.0 / np.sqrt(k)
    u = rng.uniform(-bound, bound, (k, k))
    v = rng.uniform(-bound, bound, (k, k))
    b = rng.uniform(-bound, bound, k)
    s = np.eye(2 * k) - (w.T @ w) / mu if variant == "learn-s" else None
    return ModelParams(w, u, v, b, s, k, omega, mu, n_past, variant)


def count_params(k: int, learn_s: bool = False) -> int:
    """Learnable parameter count: 4K^2 (W) + 2K^2 (U, V) + K (b), +4K^2 for S."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = 6 * k * k + k
    if learn_s:
        n += 4 * k * k
    return n


class PastBuffer:
    """Causal ring of the n_past most recent output spectra, newest first.

    Zero-initialized, always exactly n_past rows; row i holds the output of
    window t - 1 - i.
    """

    def __init__(self, n_past: int, k: int):
        if n_past < 1:
            raise ValueError("n_past must be >= 1")
        self.data = np.zeros((n_past, k))

    @property
    def n_past(self) -> int:
        return self.data.shape[0]

    def matrix(self) -> np.ndarray:
        """Snapshot of the buffer contents, shape (n_past, K)."""
        return self.data.copy()

    def push(self, y) -> None:
        self.data[1:] = self.data[:-1]
        self.data[0] = y

    def reset(self) -> None:
        self.data[:] = 0.0


def gram_term(params: ModelParams) -> np.ndarray:
    """The matrix multiplying z0 inside the unrolled iteration.

    I - (1/mu) W^T W, or S for the learn-s variant.  Recompute after every
    parameter update; reuse across the windows of a sequence.
    """
    if params.variant == "learn-s":
        return params.s
    return np.eye(2 * params.k) - (params.w.T @ params.w) / params.mu


def liht_forward(window: CirWindow, params: ModelParams, g: np.ndarray = None):
    """One unrolled hard-thresholding iteration on a zero-filled window.

    Returns (z, support): the realized DFT estimate with at most omega active
    complex bins, and the bin indices retained by the final threshold.
    """
    if g is None:
        g = gram_term(params)
    h_bar = realize_vector(window.values)
    c = (params.w.T @ h_bar) / params.mu
    z0, _ = hard_threshold(c, params.omega)
    z, support = hard_threshold(g @ z0 + c, params.omega)
    return z, support


def md_convert(z) -> np.ndarray:
    """Micro-Doppler spectrum of a realized DFT vector: z_i^2 + z_{i+K}^2."""
    z = np.asarray(z, dtype=float)
    k = z.size // 2
    return z[:k] ** 2 + z[k:] ** 2


def attention_context(y_tilde, buf_matrix):
    """Scaled dot-product attention of the current spectrum over past outputs.

    weights = softmax((1/sqrt(K)) Y y~), context a = Y^T weights.  No
    learnable parameters; a zero buffer yields uniform weights and a = 0.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    k = y_tilde.size
    scores = (buf_matrix @ y_tilde) / np.sqrt(k)
    scores = scores - scores.max()
    e = np.exp(scores)
    weights = e / e.sum()
    return buf_matrix.T @ weights, weights


def refine(y_tilde, a, params: ModelParams) -> np.ndarray:
    """Context-driven correction: (y~ + ReLU(U a + b)) * sigmoid(V a).

    The ReLU keeps the additive branch non-negative; the sigmoid gate lies in
    (0, 1), so the output is non-negative whenever y~ is.
    """
    add = np.maximum(params.u @ a + params.b, 0.0)
    gate = 1.0 / (1.0 + np.exp(-(params.v @ a)))
    return (y_tilde + add) * gate


@dataclass(eq=False)
class WindowCache:
    """Forward intermediates retained for the reverse pass."""

    h_bar: np.ndarray
    c: np.ndarray
    z0: np.ndarray
    keep0: np.ndarray
    z: np.ndarray
    keep1: np.ndarray
    y_tilde: np.ndarray
    buf: np.ndarray = None       # buffer snapshot used as keys/values
    weights: np.ndarray = None
    a: np.ndarray = None
    r: np.ndarray = None         # pre-ReLU additive branch
    gate: np.ndarray = None
    y: np.ndarray = None


def forward_window_cached(window: CirWindow, buf_matrix, params: ModelParams,
                          g: np.ndarray = None) -> WindowCache:
    """Forward pass recording every intermediate; buf_matrix is not mutated."""
    if g is None:
        g = gram_term(params)
    h_bar = realize_vector(window.values)
    c = (params.w.T @ h_bar) / params.mu
    z0, keep0 = hard_threshold(c, params.omega)
    z, keep1 = hard_threshold(g @ z0 + c, params.omega)
    y_tilde = md_convert(z)
    cache = WindowCache(h_bar, c, z0, keep0, z, keep1, y_tilde)
    if params.variant == "no-attention":
        cache.y = y_tilde
        return cache
    cache.buf = buf_matrix
    a, weights = attention_context(y_tilde, buf_matrix)
    cache.a, cache.weights = a, weights
    cache.r = params.u @ a + params.b
    add = np.maximum(cache.r, 0.0)
    if params.variant == "only-add":
        cache.y = y_tilde + add
        return cache
    cache.gate = 1.0 / (1.0 + np.exp(-(params.v @ a)))
    cache.y = (y_tilde + add) * cache.gate
    return cache


def forward_window(window: CirWindow, buf: PastBuffer,
                   params: ModelParams, g: np.ndarray = None) -> np.ndarray:
    """Reconstruct one window and push the result into the past buffer.

    The buffer is updated only after the output is computed, so window t
    never attends to itself.
    """
    cache = forward_window_cached(window, buf.matrix(), params, g)
    buf.push(cache.y)
    return cache.y


def forward_sequence(windows, params: ModelParams) -> np.ndarray:
    """Reconstruct a window sequence causally from a fresh zero buffer."""
    buf = PastBuffer(params.n_past, params.k)
    g = gram_term(params)
    out = np.zeros((len(windows), params.k))
    for i, win in enumerate(windows):
        out[i] = forward_window(win, buf, params, g)
    return out
