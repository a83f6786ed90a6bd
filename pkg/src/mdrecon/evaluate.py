"""Missing-measurement sweeps, runtime benchmarks and the overhead estimator.

Sweep protocol: for each test sequence a grid availability mask is drawn per
missing fraction (shared across methods, so comparisons are paired), windows
are framed from the masked grid and each method reconstructs the whole
spectrogram causally.  Learned variants and the hard-thresholding baselines
are scored against the converged-IHT reference from complete windows; the
greedy and soft-thresholding baselines are scored against their own
full-window reconstructions, which isolates the degradation caused by the
missing samples from the difference between solver families.

Scaling: references are min-max normalized to [0, 1], and each raw-scale
reconstruction is mapped with its reference's affine normalization (same
offset and scale), so amplitude errors are measured in reference units
rather than washed out by self-normalization.  Learned models are trained
against normalized references and already output in those units.
"""

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .metrics import rmse, ssim
from .model import forward_sequence, gram_term, PastBuffer, forward_window
from .solvers import (build_sensing, full_window_targets, ista_solve,
                      iht_solve, md_spectrum, minmax_normalize, omp_solve)
from .synth import frame_windows, gen_grid_mask, CirSequence

CLASSICAL_METHODS = ("iht", "iht-1iter", "omp", "ista")
LEARNED_PREFIX = "learned"


@dataclass
class SweepRow:
    method: str
    missing_fraction: float
    rmse: float
    rmse_stderr: float
    ssim: float
    ssim_stderr: float
    n_windows: int
    median_ms_per_window: float


SWEEP_CSV_HEADER = ("method,missing_fraction,rmse,rmse_stderr,"
                    "ssim,ssim_stderr,n_windows,median_ms_per_window")


def sweep_rows_to_csv(rows) -> str:
    lines = [SWEEP_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.method},{r.missing_fraction},{r.rmse!r},"
                     f"{r.rmse_stderr!r},{r.ssim!r},{r.ssim_stderr!r},"
                     f"{r.n_windows},{r.median_ms_per_window!r}")
    return "\n".join(lines) + "\n"


def method_label(params) -> str:
    """CSV label of a learned variant ('learned', 'learned-no-attention', ...)."""
    return LEARNED_PREFIX if params.variant == "none" else f"{LEARNED_PREFIX}-{params.variant}"


def _classical_spectrogram(windows, solver, **kw) -> np.ndarray:
    out = np.zeros((len(windows), windows[0].mask.size))
    for t, win in enumerate(windows):
        out[t] = md_spectrum(solver(win, **kw).z)
    return out


def _omp_clamped(win, omega: int = 5, **kw):
    """Greedy pursuit cannot select more atoms than available samples."""
    return omp_solve(win, omega=min(omega, win.m_t), **kw)


def _own_reference(seq, method, omega, mu, k, delta):
    """Full-window reconstruction of a method evaluated against itself.

    Returns (normalized reference, (offset, scale)) where offset/scale define
    the affine map applied to raw reconstructions of the same method.
    """
    full = CirSequence(seq.samples, np.ones(len(seq), bool), seq.t_c, seq.f_c)
    windows = frame_windows(full, k, delta)
    if method == "omp":
        spec = _classical_spectrogram(windows, _omp_clamped, omega=omega)
    elif method == "ista":
        spec = _classical_spectrogram(windows, ista_solve, mu=mu)
    else:
        raise ValueError(method)
    lo, hi = float(spec.min()), float(spec.max())
    scale = hi - lo if hi > lo else 1.0
    return (spec - lo) / scale, (lo, scale)


def sweep_missing(methods, fractions, sequences, learned_params=None,
                  omega: int = 5, mu: float = 20.0, k: int = 64,
                  delta: int = 32, seed: int = 0) -> list:
    """Evaluate reconstruction quality across missing-measurement fractions.

    methods: names from CLASSICAL_METHODS plus any number of trained
    parameter sets under their method_label; learned_params maps label ->
    ModelParams.  Returns a list of SweepRow, one per (method, fraction),
    aggregated over sequences (standard error = std / sqrt(n_sequences)).
    """
    learned_params = learned_params or {}
    for m in methods:
        if m in learned_params:
            continue
        if m not in CLASSICAL_METHODS:
            raise ValueError(f"method {m!r} has no checkpoint and is not one of "
                             f"{CLASSICAL_METHODS}")
    per_cell = {(m, f): {"rmse": [], "ssim": [], "ms": [], "n": 0}
                for m in methods for f in fractions}
    for si, seq in enumerate(sequences):
        y_ref_iht, _, gt_scale, _ = full_window_targets(seq, omega, mu, k, delta)
        own_refs = {m: _own_reference(seq, m, omega, mu, k, delta)
                    for m in ("omp", "ista") if m in methods}
        for fi, frac in enumerate(fractions):
            rng = np.random.default_rng((seed, si, fi))
            mask = gen_grid_mask(len(seq), frac, rng, k, delta)
            masked = CirSequence(np.where(mask, seq.samples, 0.0), mask,
                                 seq.t_c, seq.f_c)
            windows = frame_windows(masked, k, delta)
            for method in methods:
                t0 = time.perf_counter()
                if method in learned_params:
                    # trained against the normalized reference: native units
                    spec = forward_sequence(windows, learned_params[method])
                    ref = y_ref_iht
                elif method == "iht":
                    spec = _classical_spectrogram(windows, iht_solve,
                                                  omega=omega, mu=mu)
                    spec = spec / gt_scale if gt_scale > 0 else spec
                    ref = y_ref_iht
                elif method == "iht-1iter":
                    spec = _classical_spectrogram(windows, iht_solve,
                                                  omega=omega, mu=mu,
                                                  max_iter=1, debias=False)
                    spec = spec / gt_scale if gt_scale > 0 else spec
                    ref = y_ref_iht
                elif method == "omp":
                    spec = _classical_spectrogram(windows, _omp_clamped,
                                                  omega=omega)
                    ref, (lo, sc) = own_refs["omp"]
                    spec = (spec - lo) / sc
                else:
                    spec = _classical_spectrogram(windows, ista_solve, mu=mu)
                    ref, (lo, sc) = own_refs["ista"]
                    spec = (spec - lo) / sc
                elapsed_ms = (time.perf_counter() - t0) * 1e3 / len(windows)
                cell = per_cell[(method, frac)]
                cell["rmse"].append(rmse(spec, ref))
                cell["ssim"].append(ssim(spec, ref))
                cell["ms"].append(elapsed_ms)
                cell["n"] += len(windows)
    rows = []
    for method in methods:
        for frac in fractions:
            cell = per_cell[(method, frac)]
            r = np.array(cell["rmse"])
            s = np.array(cell["ssim"])
            n = len(r)
            rows.append(SweepRow(
                method, frac, float(r.mean()),
                float(r.std(ddof=0) / np.sqrt(n)) if n > 1 else 0.0,
                float(s.mean()),
                float(s.std(ddof=0) / np.sqrt(n)) if n > 1 else 0.0,
                cell["n"], float(np.median(cell["ms"]))))
    return rows


@dataclass
class BenchRow:
    method: str
    median_ms_per_window: float
    median_iterations: float
    n_windows: int


def bench_runtime(methods, windows, learned_params=None, omega: int = 5,
                  mu: float = 20.0) -> list:
    """Median per-window wall time (and iteration count) per method.

    Learned variants run the deployment path: the Gram term of the unrolled
    layer is prepared once per parameter set, then windows stream through.
    """
    learned_params = learned_params or {}
    rows = []
    for method in methods:
        times, iters = [], []
        if method in learned_params:
            params = learned_params[method]
            g = gram_term(params)
            buf = PastBuffer(params.n_past, params.k)
            for win in windows:
                t0 = time.perf_counter()
                forward_window(win, buf, params, g)
                times.append(time.perf_counter() - t0)
                iters.append(1)
        else:
            for win in windows:
                t0 = time.perf_counter()
                if method == "iht":
                    rep = iht_solve(win, omega=omega, mu=mu)
                elif method == "iht-1iter":
                    rep = iht_solve(win, omega=omega, mu=mu, max_iter=1,
                                    debias=False)
                elif method == "omp":
                    rep = _omp_clamped(win, omega=omega)
                elif method == "ista":
                    rep = ista_solve(win, mu=mu)
                else:
                    raise ValueError(f"unknown method {method!r}")
                times.append(time.perf_counter() - t0)
                iters.append(rep.iterations)
        rows.append(BenchRow(method, float(np.median(times) * 1e3),
                             float(np.median(iters)), len(windows)))
    return rows


@dataclass
class OverheadParams:
    """Packet accounting for the sensing-overhead estimate.

    Defaults describe one 64-slot processing window in which 10 data packets
    are transmitted, each carrying a 4 kB payload plus a 4352-symbol preamble,
    and each channel estimate costs one appended 768-symbol training field.
    bits_per_symbol summarizes the modulation and coding of the payload;
    absolute ratios are illustrative, only comparisons are meaningful.
    """

    trn_symbols_per_estimate: int = 768
    preamble_symbols: int = 4352
    psdu_bytes: int = 4096
    packets_per_window: int = 10
    window_slots: int = 64
    bits_per_symbol: float = 4.0

    def validate(self):
        for name, val in asdict(self).items():
            if val <= 0:
                raise ValueError(f"{name} must be positive, got {val}")


@dataclass
class OverheadReport:
    samples_per_window: int
    overhead: float              # added sensing symbols / communication symbols
    sensing_symbols: int
    communication_symbols: float
    assumptions: dict = field(default_factory=dict)


def overhead_estimate(samples_per_window: int,
                      p: OverheadParams = None) -> OverheadReport:
    """Sensing overhead of collecting a given number of channel estimates.

    Every estimate adds one training field of trn_symbols_per_estimate
    symbols; the denominator is the window's communication symbol budget
    (payload at bits_per_symbol plus per-packet preambles).  Linear in the
    estimate count: estimates beyond the packets in the window are assumed to
    ride on dedicated training-only transmissions of the same field length.
    """
    if samples_per_window < 1:
        raise ValueError("samples_per_window must be >= 1")
    p = p or OverheadParams()
    p.validate()
    payload_symbols = p.psdu_bytes * 8.0 / p.bits_per_symbol
    comm_symbols = p.packets_per_window * (p.preamble_symbols + payload_symbols)
    sensing = samples_per_window * p.trn_symbols_per_estimate
    return OverheadReport(
        samples_per_window, sensing / comm_symbols, sensing, comm_symbols,
        {"params": asdict(p),
         "extra_estimates_use_dedicated_trn": samples_per_window > p.packets_per_window})
