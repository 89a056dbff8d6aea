"""Quantitative evaluation: NRMSD and SSIM against reference reconstructions."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from .core import Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(x):
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def nrmsd(image, reference, mask=None) -> float:
    """Normalized root mean square difference in percent:
    ``100 * ||x - x*|| / ||x*||`` over the masked voxels."""
    x = _as_array(image)
    ref = _as_array(reference)
    if x.shape != ref.shape:
        raise ValueError("image and reference shapes differ")
    if mask is not None:
        x = x[mask]
        ref = ref[mask]
    denom = np.linalg.norm(ref.ravel())
    if denom == 0:
        raise ValueError("reference is all-zero under the mask")
    return float(100.0 * np.linalg.norm((x - ref).ravel()) / denom)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(image, reference, data_range: float) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) and the
    standard stabilization constants K1 = 0.01, K2 = 0.03.

    Local statistics are taken over fully-supported window positions
    (valid-mode convolution), matching the original formulation.
    """
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("need two 2-D slices of the same shape")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = convolve2d(x, w, mode="valid")
    mu_y = convolve2d(y, w, mode="valid")
    xx = convolve2d(x * x, w, mode="valid") - mu_x ** 2
    yy = convolve2d(y * y, w, mode="valid") - mu_y ** 2
    xy = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim_volume(image, reference, data_range: float | None = None,
                mask=None) -> float:
    """Volume-level SSIM: computed per z-slice and averaged."""
    x = _as_array(image)
    ref = _as_array(reference)
    if x.shape != ref.shape:
        raise ValueError("image and reference shapes differ")
    if data_range is None:
        ref_vals = ref[mask] if mask is not None else ref
        data_range = float(ref_vals.max() - ref_vals.min())
    vals = [ssim(x[:, :, k], ref[:, :, k], data_range)
            for k in range(x.shape[2])]
    return float(np.mean(vals))


def roi_cylinder_mask(volume: Volume, radius: float) -> np.ndarray:
    """Boolean mask of the reconstruction ROI cylinder |(x, y)| <= radius."""
    x = volume.axis_coords(0)
    y = volume.axis_coords(1)
    in_plane = (x[:, None] ** 2 + y[None, :] ** 2) <= radius ** 2
    return np.repeat(in_plane[:, :, None], volume.data.shape[2], axis=2)
