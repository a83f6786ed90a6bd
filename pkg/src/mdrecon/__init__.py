"""Micro-Doppler spectrogram reconstruction from incomplete channel windows.

Classical sparse-recovery baselines (hard/soft thresholding, greedy pursuit)
over a partial-Fourier measurement model, plus a lightweight learned
reconstructor: one unrolled hard-thresholding layer followed by
parameter-free temporal attention over past spectra and a learned
additive/multiplicative refinement.  Includes a synthetic channel generator,
a manual-backprop training engine, evaluation metrics and a CLI.
"""

__version__ = "0.1.0"

from .numerics import (hard_threshold, inverse_dft_matrix, realize_matrix,
                       realize_vector, soft_threshold)
from .synth import (CirSequence, CirWindow, SynthConfig, doppler_axis,
                    frame_windows, gen_grid_mask, gen_window_mask,
                    synth_sequence)
from .cirio import load_cir, save_cir
from .solvers import (SolveReport, build_sensing, ground_truth_spectrogram,
                      ista_solve, iht_solve, omp_solve)
from .model import (ModelParams, PastBuffer, attention_context, count_params,
                    forward_sequence, forward_window, liht_forward,
                    md_convert, param_init, refine)
from .training import (Checkpoint, TrainConfig, adam_step, backward,
                       load_checkpoint, loss, save_checkpoint, train)
from .metrics import rmse, ssim, write_pgm
from .evaluate import (OverheadParams, bench_runtime, overhead_estimate,
                       sweep_missing)
