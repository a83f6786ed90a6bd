"""Loss, exact reverse-mode gradients, optimizer and the training loop.

Gradient rules that are not forced by calculus:

  * hard thresholding backpropagates unchanged on the retained support and
    zero elsewhere (exact wherever the support is locally constant);
  * ReLU uses subgradient 0 at the kink;
  * with detach_past=True (default) the buffer of past spectra enters the
    attention block as a constant, so credit never flows backwards in time;
    detach_past=False chains the full dependency through past outputs.

The finite-difference checker freezes both thresholding supports at their
baseline values while perturbing, which makes the analytic gradients exact
up to quadrature error.

Training streams each sequence in window order (the attention buffer couples
windows), accumulates one mean gradient per sequence and applies one Adam
step per sequence.
"""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .model import (ModelParams, PastBuffer, VARIANTS, WindowCache,
                    forward_window_cached, gram_term, param_init)
from .solvers import full_window_targets
from .synth import CirSequence, CirWindow, frame_windows, gen_window_mask

CHECKPOINT_MAGIC = b"STAR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the last finite checkpoint if any."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    alpha: float = 0.9           # micro-Doppler loss weight
    beta: float = 0.1            # DFT reconstruction loss weight
    lr: float = 2e-4
    epochs: int = 5
    n_past: int = 6
    omega: int = 5
    mu: float = 20.0
    k: int = 64
    delta: int = 32
    p_max: float = 0.9           # mask augmentation cap, p ~ U(0, p_max)
    val_fraction: float = 0.1
    oversample: dict = field(default_factory=dict)   # label -> replication factor
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    detach_past: bool = True
    ablation: str = "none"

    def validate(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha, beta >= 0 and alpha + beta > 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.p_max < 1:
            raise ValueError("p_max must be in [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.ablation not in VARIANTS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        for label, factor in self.oversample.items():
            if int(factor) < 1:
                raise ValueError(f"oversample factor for {label!r} must be >= 1")


@dataclass(eq=False)
class Gradients:
    """Same shapes as the learnable tensors of ModelParams."""

    w: np.ndarray
    u: np.ndarray
    v: np.ndarray
    b: np.ndarray
    s: np.ndarray = None

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls(np.zeros_like(params.w), np.zeros_like(params.u),
                   np.zeros_like(params.v), np.zeros_like(params.b),
                   None if params.s is None else np.zeros_like(params.s))

    def tensors(self) -> dict:
        out = {"w": self.w, "u": self.u, "v": self.v, "b": self.b}
        if self.s is not None:
            out["s"] = self.s
        return out

    def scale(self, factor: float) -> "Gradients":
        for t in self.tensors().values():
            t *= factor
        return self

    def check_finite(self):
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise TrainingDivergedError(f"non-finite gradient in tensor '{name}'")


def loss(y, y_gt, z, z_gt, alpha: float, beta: float) -> float:
    """alpha * MSE(y, y_gt) + beta * MSE(z, z_gt), means over entries."""
    y, y_gt = np.asarray(y, float), np.asarray(y_gt, float)
    z, z_gt = np.asarray(z, float), np.asarray(z_gt, float)
    if y.shape != y_gt.shape or z.shape != z_gt.shape:
        raise ValueError("loss inputs must have matching shapes")
    return float(alpha * np.mean((y - y_gt) ** 2) + beta * np.mean((z - z_gt) ** 2))


def _pair_mask(keep, k: int) -> np.ndarray:
    m = np.zeros(2 * k, dtype=bool)
    m[keep] = True
    m[keep + k] = True
    return m


def _backward_window(cache: WindowCache, params: ModelParams, g: np.ndarray,
                     dy, dz_direct, grads: Gradients, dgram: np.ndarray):
    """Reverse pass for one window; returns the buffer-row adjoints.

    dy and dz_direct are the loss adjoints of the final spectrum and of the
    realized DFT estimate.  Contributions to U, V, b and the h-path of W go
    straight into `grads`; the Gram-product path is accumulated in `dgram`
    and mapped to W (or S) once per sequence by the caller.
    """
    k = params.k
    variant = params.variant
    if variant == "no-attention":
        dyt = np.asarray(dy, float)
        dbuf = None
    else:
        y_tilde, a, r, wts = cache.y_tilde, cache.a, cache.r, cache.weights
        relu = np.maximum(r, 0.0)
        if variant == "only-add":
            dr = dy * (r > 0)
            dyt = np.asarray(dy, float).copy()
            da = params.u.T @ dr
        else:
            gate = cache.gate
            dgate = dy * (y_tilde + relu)
            dgi = dgate * gate * (1.0 - gate)
            grads.v += np.outer(dgi, a)
            da = params.v.T @ dgi
            dr = (dy * gate) * (r > 0)
            dyt = dy * gate
            da = da + params.u.T @ dr
        grads.u += np.outer(dr, a)
        grads.b += dr
        # attention: a = Y^T wts, wts = softmax(Y y~ / sqrt(K))
        dw = cache.buf @ da
        ds = wts * (dw - float(wts @ dw))
        dyt = dyt + (cache.buf.T @ ds) / np.sqrt(k)
        dbuf = np.outer(wts, da) + np.outer(ds, y_tilde) / np.sqrt(k)

    z = cache.z
    dz = np.asarray(dz_direct, float).copy()
    dz[:k] += 2.0 * z[:k] * dyt
    dz[k:] += 2.0 * z[k:] * dyt
    du_vec = dz * _pair_mask(cache.keep1, k)
    dgram += np.outer(du_vec, cache.z0)
    dz0 = g.T @ du_vec
    dc = du_vec + dz0 * _pair_mask(cache.keep0, k)
    grads.w += np.outer(cache.h_bar, dc) / params.mu
    return dbuf


def _finish_gram(params: ModelParams, grads: Gradients, dgram: np.ndarray):
    """Map the accumulated Gram-path adjoint onto W or S."""
    if params.variant == "learn-s":
        grads.s += dgram
    else:
        grads.w += -(params.w @ (dgram + dgram.T)) / params.mu


def backward(window: CirWindow, buf_snapshot, params: ModelParams, y_gt, z_gt,
             cfg: TrainConfig):
    """Loss and exact gradients for a single window against its targets.

    buf_snapshot is the attention buffer content at this window, treated as a
    constant (the detach_past=True rule).
    """
    g = gram_term(params)
    cache = forward_window_cached(window, np.asarray(buf_snapshot, float), params, g)
    val = loss(cache.y, y_gt, cache.z, z_gt, cfg.alpha, cfg.beta)
    k = params.k
    dy = 2.0 * cfg.alpha * (cache.y - y_gt) / k
    dz = cfg.beta * (cache.z - z_gt) / k
    grads = Gradients.zeros_like(params)
    dgram = np.zeros((2 * k, 2 * k))
    _backward_window(cache, params, g, dy, dz, grads, dgram)
    _finish_gram(params, grads, dgram)
    grads.check_finite()
    return val, grads


def sequence_gradients(windows, params: ModelParams, y_gt, z_gt, active,
                       cfg: TrainConfig):
    """Mean loss and gradients over one window sequence.

    `active` flags the windows that contribute to the loss (degenerate
    all-zero ground-truth windows are skipped); every window still passes
    through the forward pass so the buffer evolves causally.  With
    detach_past=False the reverse pass also chains through the past spectra
    held in the attention buffer.
    """
    g = gram_term(params)
    buf = PastBuffer(params.n_past, params.k)
    caches, snapshots = [], []
    for win in windows:
        snap = buf.matrix()
        cache = forward_window_cached(win, snap, params, g)
        buf.push(cache.y)
        caches.append(cache)
        snapshots.append(snap)

    n_eff = int(np.sum(active))
    grads = Gradients.zeros_like(params)
    if n_eff == 0:
        return 0.0, grads
    k = params.k
    total = 0.0
    dgram = np.zeros((2 * k, 2 * k))
    n_win = len(windows)
    lam = np.zeros((n_win, k)) if not cfg.detach_past else None
    for t in range(n_win - 1, -1, -1):
        cache = caches[t]
        if active[t]:
            total += loss(cache.y, y_gt[t], cache.z, z_gt[t], cfg.alpha, cfg.beta)
            dy = 2.0 * cfg.alpha * (cache.y - y_gt[t]) / (k * n_eff)
            dz = cfg.beta * (cache.z - z_gt[t]) / (k * n_eff)
        else:
            dy = np.zeros(k)
            dz = np.zeros(2 * k)
        if lam is not None:
            dy = dy + lam[t]
        dbuf = _backward_window(cache, params, g, dy, dz, grads, dgram)
        if lam is not None and dbuf is not None:
            for i in range(params.n_past):
                src = t - 1 - i
                if src >= 0:
                    lam[src] += dbuf[i]
    _finish_gram(params, grads, dgram)
    grads.check_finite()
    return total / n_eff, grads


def _forward_frozen(window, buf_matrix, params: ModelParams, keep0, keep1):
    """Forward pass with both thresholding supports pinned (for the FD oracle)."""
    k = params.k
    g = gram_term(params)
    h_bar = np.concatenate([window.values.real, window.values.imag])
    c = (params.w.T @ h_bar) / params.mu
    z0 = np.where(_pair_mask(keep0, k), c, 0.0)
    z = np.where(_pair_mask(keep1, k), g @ z0 + c, 0.0)
    y_tilde = z[:k] ** 2 + z[k:] ** 2
    if params.variant == "no-attention":
        return y_tilde, z
    scores = (buf_matrix @ y_tilde) / np.sqrt(k)
    scores = scores - scores.max()
    e = np.exp(scores)
    weights = e / e.sum()
    a = buf_matrix.T @ weights
    add = np.maximum(params.u @ a + params.b, 0.0)
    if params.variant == "only-add":
        return y_tilde + add, z
    gate = 1.0 / (1.0 + np.exp(-(params.v @ a)))
    return (y_tilde + add) * gate, z


def fd_gradients(window: CirWindow, buf_snapshot, params: ModelParams, y_gt,
                 z_gt, cfg: TrainConfig, eps: float = 1e-5) -> dict:
    """Central finite differences of the window loss, supports held fixed."""
    g = gram_term(params)
    cache = forward_window_cached(window, np.asarray(buf_snapshot, float), params, g)
    keep0, keep1 = cache.keep0, cache.keep1
    out = {}
    for name, tensor in params.learnable().items():
        grad = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            y_p, z_p = _forward_frozen(window, buf_snapshot, params, keep0, keep1)
            lp = loss(y_p, y_gt, z_p, z_gt, cfg.alpha, cfg.beta)
            flat[i] = orig - eps
            y_m, z_m = _forward_frozen(window, buf_snapshot, params, keep0, keep1)
            lm = loss(y_m, y_gt, z_m, z_gt, cfg.alpha, cfg.beta)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * eps)
        out[name] = grad
    return out


@dataclass(eq=False)
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(p) for n, p in params.learnable().items()},
                   {n: np.zeros_like(p) for n, p in params.learnable().items()}, 0)


def adam_step(params: ModelParams, grads: Gradients, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update, in place."""
    state.t += 1
    gt = grads.tensors()
    for name, p in params.learnable().items():
        g = gt[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** state.t)
        v_hat = state.v[name] / (1.0 - beta2 ** state.t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


@dataclass(eq=False)
class Checkpoint:
    params: ModelParams
    config_echo: dict
    step: int = 0
    adam_state: AdamState = None
    version: int = CHECKPOINT_VERSION


def _augmented_windows(seq: CirSequence, cfg: TrainConfig, rng):
    """Frame full windows, then impose fresh per-window random masks."""
    windows = frame_windows(seq, cfg.k, cfg.delta)
    out = []
    for win in windows:
        mask = gen_window_mask(cfg.k, cfg.p_max, rng) & win.mask
        while not mask.any():   # only reachable when the window itself has holes
            mask = gen_window_mask(cfg.k, cfg.p_max, rng) & win.mask
        out.append(CirWindow(np.where(mask, win.values, 0.0), mask, win.t))
    return out


def _sequence_loss(windows, params, y_gt, z_gt, active, cfg) -> float:
    """Forward-only mean loss (for validation)."""
    g = gram_term(params)
    buf = PastBuffer(params.n_past, params.k)
    total, n_eff = 0.0, 0
    for t, win in enumerate(windows):
        cache = forward_window_cached(win, buf.matrix(), params, g)
        buf.push(cache.y)
        if active[t]:
            total += loss(cache.y, y_gt[t], cache.z, z_gt[t], cfg.alpha, cfg.beta)
            n_eff += 1
    return total / n_eff if n_eff else 0.0


def train(dataset, cfg: TrainConfig, init_params: ModelParams = None,
          log=None):
    """Train on a list of CirSequences; returns (Checkpoint, history).

    Sequences are split into train/validation sets before any windowing.
    Per epoch, sequences are visited in a freshly shuffled order; each one is
    streamed window by window with fresh random masks, and one Adam step is
    taken per sequence from the mean window gradient.  Ground-truth targets
    (converged reconstructions of the complete windows) are computed once per
    sequence and cached.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = init_params.copy() if init_params is not None else param_init(
        cfg.k, seed=cfg.seed, omega=cfg.omega, mu=cfg.mu, n_past=cfg.n_past,
        variant=cfg.ablation)
    if params.k != cfg.k:
        raise ValueError(f"init_params built for k={params.k}, config says {cfg.k}")
    state = AdamState.zeros_like(params)

    order = rng.permutation(len(dataset))
    n_val = int(round(cfg.val_fraction * len(dataset)))
    n_val = min(n_val, len(dataset) - 1)
    val_idx = list(order[:n_val])
    train_idx = list(order[n_val:])
    # oversampling: replicate whole sequences of the flagged labels
    expanded = []
    for i in train_idx:
        label = dataset[i].meta.get("config", {}).get("label", "default")
        expanded.extend([i] * int(cfg.oversample.get(label, 1)))
    train_idx = expanded

    targets = {}

    def get_targets(i):
        if i not in targets:
            y_gt, z_gt, _, degenerate = full_window_targets(
                dataset[i], cfg.omega, cfg.mu, cfg.k, cfg.delta)
            targets[i] = (y_gt, z_gt, ~degenerate)
        return targets[i]

    history = []
    last_good = None
    step = 0
    for epoch in range(cfg.epochs):
        epoch_order = rng.permutation(len(train_idx))
        epoch_loss, n_seq = 0.0, 0
        for j in epoch_order:
            i = train_idx[j]
            y_gt, z_gt, active = get_targets(i)
            windows = _augmented_windows(dataset[i], cfg, rng)
            val, grads = sequence_gradients(windows, params, y_gt, z_gt, active, cfg)
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, sequence {i}", last_good)
            adam_step(params, grads, state, cfg.lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            step += 1
            epoch_loss += val
            n_seq += 1
        train_loss = epoch_loss / max(n_seq, 1)

        val_rng = np.random.default_rng((cfg.seed, epoch, 997))
        val_loss = float("nan")
        if val_idx:
            acc = 0.0
            for i in val_idx:
                y_gt, z_gt, active = get_targets(i)
                windows = _augmented_windows(dataset[i], cfg, val_rng)
                acc += _sequence_loss(windows, params, y_gt, z_gt, active, cfg)
            val_loss = acc / len(val_idx)
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(
                    f"non-finite validation loss at epoch {epoch}", last_good)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss})
        last_good = Checkpoint(params.copy(), asdict(cfg), step, state)
        if log:
            log(f"epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f}")
    return Checkpoint(params, asdict(cfg), step, state), history


_VARIANT_CODES = {name: i for i, name in enumerate(VARIANTS)}


def _write_array(fh, arr):
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh, what):
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"truncated checkpoint while reading {what} length")
    n = struct.unpack("<Q", raw)[0]
    data = fh.read(8 * n)
    if len(data) != 8 * n:
        raise CheckpointError(f"truncated checkpoint while reading {what} data")
    return np.frombuffer(data, dtype="<f8").copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned binary checkpoint: magic, dims, tensors, moments, metadata."""
    p = ckpt.params
    meta = json.dumps(ckpt.config_echo, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIIdII", ckpt.version, p.k,
                             _VARIANT_CODES[p.variant], p.omega, p.mu,
                             p.n_past, ckpt.step))
        for arr in (p.w, p.u, p.v, p.b):
            _write_array(fh, arr)
        if p.s is not None:
            _write_array(fh, p.s)
        has_moments = ckpt.adam_state is not None
        fh.write(struct.pack("<B", int(has_moments)))
        if has_moments:
            names = list(p.learnable())
            for name in names:
                _write_array(fh, ckpt.adam_state.m[name])
                _write_array(fh, ckpt.adam_state.v[name])
            fh.write(struct.pack("<Q", ckpt.adam_state.t))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_checkpoint(path, expect_k: int = None) -> Checkpoint:
    """Read a checkpoint; rejects bad magic, version or mismatched K."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        header = fh.read(struct.calcsize("<IIIIdII"))
        if len(header) != struct.calcsize("<IIIIdII"):
            raise CheckpointError("truncated checkpoint header")
        version, k, variant_code, omega, mu, n_past, step = struct.unpack(
            "<IIIIdII", header)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if expect_k is not None and k != expect_k:
            raise CheckpointError(f"checkpoint has K={k}, expected K={expect_k}")
        try:
            variant = VARIANTS[variant_code]
        except IndexError:
            raise CheckpointError(f"unknown variant code {variant_code}") from None
        w = _read_array(fh, "w").reshape(2 * k, 2 * k)
        u = _read_array(fh, "u").reshape(k, k)
        v = _read_array(fh, "v").reshape(k, k)
        b = _read_array(fh, "b").reshape(k)
        s = _read_array(fh, "s").reshape(2 * k, 2 * k) if variant == "learn-s" else None
        params = ModelParams(w, u, v, b, s, k, omega, mu, n_past, variant)
        raw = fh.read(1)
        if len(raw) != 1:
            raise CheckpointError("truncated checkpoint before moments flag")
        adam_state = None
        if raw[0]:
            m, vv = {}, {}
            for name, tensor in params.learnable().items():
                m[name] = _read_array(fh, f"m[{name}]").reshape(tensor.shape)
                vv[name] = _read_array(fh, f"v[{name}]").reshape(tensor.shape)
            traw = fh.read(8)
            if len(traw) != 8:
                raise CheckpointError("truncated checkpoint before step counter")
            adam_state = AdamState(m, vv, struct.unpack("<Q", traw)[0])
        mraw = fh.read(4)
        if len(mraw) != 4:
            raise CheckpointError("truncated checkpoint before metadata")
        meta_len = struct.unpack("<I", mraw)[0]
        blob = fh.read(meta_len)
        if len(blob) != meta_len:
            raise CheckpointError("truncated checkpoint metadata")
        config_echo = json.loads(blob.decode("utf-8")) if meta_len else {}
    return Checkpoint(params, config_echo, step, adam_state, version)
