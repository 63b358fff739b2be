"""Color losses with analytic gradients: L1, D-SSIM and the dual-path loss.

The appearance render carries the (1-lambda) L1 + lambda D-SSIM pair; the
geometric render gets an auxiliary plain L1 weighted by lambda_s so the base
opacities keep explaining the opaque scene content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class ColorLossWeights:
    lambda_dssim: float = 0.2
    lambda_s: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.lambda_dssim <= 1.0):
            raise InvalidParameterError("lambda_dssim must be in [0, 1]")
        if self.lambda_s < 0:
            raise InvalidParameterError("lambda_s must be >= 0")


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise InvalidParameterError(f"image shapes differ: {a.shape} vs {b.shape}")


# |a - b| at or below this counts as a tie (zero subgradient). Sits at the
# resolution of single-precision image data; without it, rounding noise turns
# into full-magnitude +-1/N sign gradients.
L1_TIE_TOL = 1e-6


def l1_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference and its subgradient w.r.t. a (sign(0) = 0)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    diff = a - b
    value = float(np.mean(np.abs(diff)))
    grad = np.where(np.abs(diff) > L1_TIE_TOL, np.sign(diff), 0.0) / diff.size
    return value, grad


def _gauss_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n, dtype=float) - (n - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW_1D = _gauss_window()


def _smooth(img: np.ndarray) -> np.ndarray:
    # half-sample reflection keeps the operator self-adjoint for the
    # symmetric window, so the same smoothing implements the gradient chain
    out = correlate1d(img, _WINDOW_1D, axis=0, mode="reflect")
    return correlate1d(out, _WINDOW_1D, axis=1, mode="reflect")


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    mu_x = _smooth(x)
    mu_y = _smooth(y)
    sig_x = _smooth(x * x) - mu_x**2
    sig_y = _smooth(y * y) - mu_y**2
    sig_xy = _smooth(x * y) - mu_x * mu_y

    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sig_xy + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = sig_x + sig_y + SSIM_C2
    s = (a1 * a2) / (b1 * b2)

    d_mu = 2 * mu_y * a2 / (b1 * b2) - 2 * mu_x * s / b1
    d_sigx = -s / b2
    d_sigxy = 2 * a1 / (b1 * b2)
    grad = (
        _smooth(d_mu - 2 * mu_x * d_sigx - mu_y * d_sigxy)
        + 2 * x * _smooth(d_sigx)
        + y * _smooth(d_sigxy)
    )
    return s, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over channels, 11x11 Gaussian window on [0, 1] range."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c])[0].mean() for c in range(a.shape[2])]))


def dssim_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """(1 - SSIM)/2 and its analytic gradient w.r.t. a."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[:, :, None], b[:, :, None]
    total = 0.0
    grad = np.empty_like(a)
    nch = a.shape[2]
    for c in range(nch):
        s, g = _ssim_channel(a[:, :, c], b[:, :, c])
        total += s.mean()
        grad[:, :, c] = -0.5 * g / s.size
    value = 0.5 * (1.0 - total / nch)
    grad /= nch
    return value, (grad[:, :, 0] if squeeze else grad)


def gaussian_3dgs_loss(rendered: np.ndarray, gt: np.ndarray, lambda_dssim: float = 0.2):
    """(1-lambda) L1 + lambda D-SSIM, the standard splatting color loss."""
    v1, g1 = l1_loss(rendered, gt)
    v2, g2 = dssim_loss(rendered, gt)
    return (1 - lambda_dssim) * v1 + lambda_dssim * v2, (1 - lambda_dssim) * g1 + lambda_dssim * g2


def color_loss(out_o, out_s, gt: np.ndarray, w: ColorLossWeights):
    """Dual-path color objective.

    Returns (value, grad w.r.t. appearance color, grad w.r.t. geometric color).
    out_o/out_s may be RenderOutput instances or raw HxWx3 arrays.
    """
    c_o = out_o.color if hasattr(out_o, "color") else np.asarray(out_o, dtype=float)
    c_s = out_s.color if hasattr(out_s, "color") else np.asarray(out_s, dtype=float)
    gt = np.asarray(gt, dtype=float)
    main, grad_o = gaussian_3dgs_loss(c_o, gt, w.lambda_dssim)
    aux, grad_s_raw = l1_loss(c_s, gt)
    return main + w.lambda_s * aux, grad_o, w.lambda_s * grad_s_raw


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB (metric utility, not a loss)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(data_range**2 / mse)
