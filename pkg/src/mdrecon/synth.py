"""Synthetic channel impulse response sequences, framing and masks.

A sequence is a superposition of Q complex sinusoids sampled on a regular
grid with period t_c.  Each sinusoid models one scatterer: a persistent
complex amplitude and a Doppler frequency that drifts across processing
windows as a clipped Gaussian random walk.  The drift is what gives adjacent
windows correlated spectra, which the attention stage of the learned model
relies on.  Phases accumulate continuously across the walk so that
overlapping windows agree sample for sample.

Two mask generators are provided.  Per-window masks (training augmentation)
first draw a drop probability p ~ U(0, p_max) and then drop each sample
independently.  Grid masks (evaluation) drop samples on the sequence grid so
that overlapping windows see consistent availability.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

SPEED_OF_LIGHT = 299792458.0


class ConfigError(ValueError):
    """Raised when a configuration violates its invariants."""


@dataclass
class SynthConfig:
    """Generator settings.

    k / delta        window length and shift, in samples
    t_c              channel sampling period [s]
    f_c              carrier frequency [Hz]
    q_range          (min, max) scatterer count, drawn once per sequence
    v_max            maximum scatterer radial speed [m/s]; mapped to Doppler
                     with the two-way convention f = 2 v f_c / c
    freq_walk_std    per-window std of the Doppler random walk [Hz]
    amp_range        (lo, hi) of per-scatterer amplitude magnitudes
    snr_db           per-sample signal power over complex noise variance;
                     math.inf disables noise
    snap_to_grid     snap frequencies to DFT bin centers (diagnostics only)
    """

    k: int = 64
    delta: int = 32
    t_c: float = 2.7e-4
    f_c: float = 60e9
    q_range: tuple = (2, 3)
    v_max: float = 3.0
    freq_walk_std: float = 8.0
    amp_range: tuple = (0.4, 0.8)
    snr_db: float = 20.0
    seed: int = 0
    snap_to_grid: bool = False
    label: str = "default"

    def validate(self):
        if not 0 < self.delta <= self.k:
            raise ConfigError(f"need 0 < delta <= k, got delta={self.delta}, k={self.k}")
        if self.t_c <= 0 or self.f_c <= 0:
            raise ConfigError("t_c and f_c must be positive")
        qlo, qhi = self.q_range
        if not (0 <= qlo <= qhi):
            raise ConfigError(f"bad scatterer count range {self.q_range}")
        if qhi > self.k // 4:
            raise ConfigError(f"scatterer count {qhi} too large for window length {self.k}")
        lo, hi = self.amp_range
        if not (0 <= lo <= hi):
            raise ConfigError(f"bad amplitude range {self.amp_range}")
        if self.v_max < 0 or self.freq_walk_std < 0:
            raise ConfigError("v_max and freq_walk_std must be >= 0")
        f_gen = 2.0 * self.v_max * self.f_c / SPEED_OF_LIGHT
        f_m = 1.0 / (2.0 * self.t_c)
        if f_gen >= f_m:
            raise ConfigError(
                f"v_max={self.v_max} m/s maps to |f|={f_gen:.1f} Hz, at or above "
                f"the maximum resolvable frequency {f_m:.1f} Hz"
            )

    @property
    def max_doppler_hz(self) -> float:
        return 2.0 * self.v_max * self.f_c / SPEED_OF_LIGHT


@dataclass(eq=False)
class CirSequence:
    """One channel time series on the sampling grid plus availability mask."""

    samples: np.ndarray          # complex128, shape (L,)
    grid_mask: np.ndarray        # bool, shape (L,)
    t_c: float
    f_c: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        self.grid_mask = np.asarray(self.grid_mask, dtype=bool)
        if self.samples.shape != self.grid_mask.shape:
            raise ValueError("samples and grid_mask must have equal length")
        if not np.all(np.isfinite(self.samples.view(float))):
            raise ValueError("samples must be finite")

    def __len__(self):
        return self.samples.size


@dataclass(eq=False)
class CirWindow:
    """A length-K measurement window; unavailable entries are zero-filled."""

    values: np.ndarray           # complex128, shape (K,), zero where mask is False
    mask: np.ndarray             # bool, shape (K,)
    t: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape:
            raise ValueError("values and mask must have equal length")
        if self.mask.sum() < 1:
            raise ValueError(f"window {self.t} has no available samples")
        if np.any(self.values[~self.mask] != 0):
            raise ValueError("values must be zero where the mask is False")

    @property
    def m_t(self) -> int:
        return int(self.mask.sum())


def synth_sequence(config: SynthConfig, n_windows: int) -> CirSequence:
    """Generate a sequence covering n_windows overlapping windows.

    The emitted grid has (n_windows - 1) * delta + k samples and an all-True
    availability mask; evaluation masks are applied afterwards.  Frequencies
    evolve once per delta-block, so window t starts on the block holding its
    recorded per-window frequencies.  meta carries the config echo plus the
    per-window true frequencies and amplitudes for oracle tests.
    """
    config.validate()
    if n_windows < 1:
        raise ConfigError("n_windows must be >= 1")
    rng = np.random.default_rng(config.seed)
    k, delta, t_c = config.k, config.delta, config.t_c
    length = (n_windows - 1) * delta + k
    n_blocks = -(-length // delta)  # ceil
    f_gen = config.max_doppler_hz
    grid_step = 1.0 / (k * t_c)

    q = int(rng.integers(config.q_range[0], config.q_range[1] + 1))
    mags = rng.uniform(config.amp_range[0], config.amp_range[1], q)
    phases = rng.uniform(0.0, 2.0 * np.pi, q)
    amps = mags * np.exp(1j * phases)

    freqs = np.zeros((n_blocks, q))
    if q:
        f = rng.uniform(-f_gen, f_gen, q)
        if config.snap_to_grid:
            f = np.round(f / grid_step) * grid_step
        freqs[0] = f
        for b in range(1, n_blocks):
            f = f + rng.normal(0.0, config.freq_walk_std, q)
            f = np.clip(f, -f_gen, f_gen)
            if config.snap_to_grid:
                f = np.round(f / grid_step) * grid_step
            freqs[b] = f

    clean = np.zeros(length, dtype=complex)
    if q:
        # frequency per sample (block-constant), phase accumulated continuously
        f_per_sample = freqs[np.minimum(np.arange(length) // delta, n_blocks - 1)]
        phase = np.zeros((length, q))
        phase[1:] = 2.0 * np.pi * t_c * np.cumsum(f_per_sample[:-1], axis=0)
        clean = (np.exp(1j * phase) * amps).sum(axis=1)

    samples = clean
    if np.isfinite(config.snr_db):
        p_sig = float(np.mean(np.abs(clean) ** 2))
        if p_sig == 0.0:
            # zero-signal fallback: nominal single mid-range scatterer power
            p_sig = ((config.amp_range[0] + config.amp_range[1]) / 2.0) ** 2
        var = p_sig * 10.0 ** (-config.snr_db / 10.0)
        noise = rng.normal(size=length) + 1j * rng.normal(size=length)
        samples = clean + np.sqrt(var / 2.0) * noise

    window_blocks = np.minimum(np.arange(n_windows), n_blocks - 1)
    cfg_echo = asdict(config)
    cfg_echo["q_range"] = list(cfg_echo["q_range"])   # JSON-canonical echo
    cfg_echo["amp_range"] = list(cfg_echo["amp_range"])
    meta = {
        "config": cfg_echo,
        "seed": config.seed,
        "q": q,
        "window_freqs_hz": freqs[window_blocks].tolist(),
        "amps_re": amps.real.tolist(),
        "amps_im": amps.imag.tolist(),
    }
    return CirSequence(samples, np.ones(length, dtype=bool), t_c, config.f_c, meta)


def frame_windows(seq: CirSequence, k: int, delta: int) -> list:
    """Split a sequence into overlapping windows of length k shifted by delta.

    Window t covers grid samples [t*delta, t*delta + k); the count is
    floor((L - k) / delta) + 1.  Masked-out samples are zero-filled.
    """
    length = len(seq)
    if length < k:
        raise ValueError(f"sequence of length {length} is shorter than one window ({k})")
    if not 0 < delta <= k:
        raise ValueError(f"need 0 < delta <= k, got delta={delta}")
    count = (length - k) // delta + 1
    windows = []
    for t in range(count):
        s = t * delta
        mask = seq.grid_mask[s:s + k].copy()
        values = np.where(mask, seq.samples[s:s + k], 0.0)
        windows.append(CirWindow(values, mask, t))
    return windows


def gen_window_mask(k: int, p_max: float, rng) -> np.ndarray:
    """Draw one per-window availability mask.

    First p ~ U(0, p_max), then each sample is dropped independently with
    probability p.  An all-False draw is rejected and the whole mask redrawn,
    so at least one sample is always available.
    """
    if not 0 <= p_max < 1:
        raise ValueError(f"p_max must be in [0, 1), got {p_max}")
    p = rng.uniform(0.0, p_max)
    mask = rng.random(k) >= p
    while not mask.any():
        mask = rng.random(k) >= p
    return mask


def gen_grid_mask(seq_len: int, missing_fraction: float, rng, k: int = 64,
                  delta: int = 32) -> np.ndarray:
    """Drop grid samples independently with the given probability.

    Windows framed with (k, delta) from the result are guaranteed at least
    one available sample: offending stretches are redrawn in place.
    """
    if not 0 <= missing_fraction < 1:
        raise ValueError(f"missing_fraction must be in [0, 1), got {missing_fraction}")
    mask = rng.random(seq_len) >= missing_fraction
    if seq_len >= k:
        count = (seq_len - k) // delta + 1
        for _ in range(1000):
            bad = [t for t in range(count) if not mask[t * delta:t * delta + k].any()]
            if not bad:
                break
            for t in bad:
                s = t * delta
                mask[s:s + k] = rng.random(k) >= missing_fraction
        else:  # pragma: no cover - probability ~0 for valid fractions
            raise RuntimeError("failed to draw a grid mask with nonempty windows")
    elif not mask.any():
        idx = int(rng.integers(0, seq_len))
        mask[idx] = True
    return mask


@dataclass
class DopplerAxis:
    """Frequency/velocity resolution of a window, plus DFT-ordered bin centers."""

    delta_f: float       # frequency resolution [Hz]
    f_max: float         # maximum resolvable frequency [Hz]
    delta_v: float       # velocity resolution [m/s]
    v_max: float         # maximum resolvable velocity [m/s]
    bin_freqs_hz: np.ndarray  # DFT-ordered; np.fft.fftshift for display


def doppler_axis(k: int, t_c: float, f_c: float) -> DopplerAxis:
    """Resolution formulas for a k-sample window at period t_c, carrier f_c."""
    if k < 1 or t_c <= 0 or f_c <= 0:
        raise ValueError("k, t_c, f_c must be positive")
    delta_f = 1.0 / (k * t_c)
    f_max = 1.0 / (2.0 * t_c)
    delta_v = SPEED_OF_LIGHT / (2.0 * f_c * k * t_c)
    v_max = SPEED_OF_LIGHT / (4.0 * f_c * t_c)
    bins = np.fft.fftfreq(k, d=t_c)
    return DopplerAxis(delta_f, f_max, delta_v, v_max, bins)
