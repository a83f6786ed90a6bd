"""Reconstruction quality metrics and spectrogram image export.

Spectrograms are compared as 2-D images with frequency bins on rows and
window index on columns, both sides min-max normalized to [0, 1] beforehand.
SSIM uses an 8x8 uniform window slid with stride 1 over valid positions
(population moments, C1 = 0.01^2 and C2 = 0.03^2 for unit dynamic range);
images smaller than the window are scored on the single full-image window.
"""

import numpy as np

SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def rmse(recon, gt) -> float:
    """Root mean squared elementwise difference over the whole spectrogram."""
    recon, gt = np.asarray(recon, float), np.asarray(gt, float)
    if recon.shape != gt.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {gt.shape}")
    return float(np.sqrt(np.mean((recon - gt) ** 2)))


def _window_sums(img, wh, ww):
    """Sum of every wh x ww patch (valid positions) via integral images."""
    pad = np.zeros((img.shape[0] + 1, img.shape[1] + 1))
    pad[1:, 1:] = np.cumsum(np.cumsum(img, axis=0), axis=1)
    return (pad[wh:, ww:] - pad[:-wh, ww:] - pad[wh:, :-ww]
            + pad[:-wh, :-ww])


def ssim(recon, gt, win: int = SSIM_WINDOW, c1: float = SSIM_C1,
         c2: float = SSIM_C2) -> float:
    """Mean local structural similarity between two spectrogram images."""
    a, b = np.asarray(recon, float), np.asarray(gt, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] < win or a.shape[1] < win:
        wh, ww = a.shape  # one window covering the whole image
    else:
        wh = ww = win
    n = wh * ww
    mu_a = _window_sums(a, wh, ww) / n
    mu_b = _window_sums(b, wh, ww) / n
    var_a = _window_sums(a * a, wh, ww) / n - mu_a ** 2
    var_b = _window_sums(b * b, wh, ww) / n - mu_b ** 2
    cov = _window_sums(a * b, wh, ww) / n - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
             ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def spectrogram_image(spec) -> np.ndarray:
    """(T, K) spectrogram to an 8-bit image, frequency rows fftshifted.

    Rows run from -f_max (top) to just below +f_max (bottom); columns are
    window indices.  Values are min-max scaled to 0..255.
    """
    spec = np.asarray(spec, float)
    img = np.fft.fftshift(spec.T, axes=0)
    lo, hi = img.min(), img.max()
    if hi > lo:
        img = (img - lo) / (hi - lo)
    else:
        img = np.zeros_like(img)
    return np.round(img * 255.0).astype(np.uint8)


def write_pgm(path, spec) -> None:
    """Write a spectrogram as a binary (P5) 8-bit PGM image."""
    img = spectrogram_image(spec)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
