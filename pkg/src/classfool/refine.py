"""
Model-driven perturbation refinement.

The perturbation is pushed through the classifier's convolutional base, the
resulting feature maps are averaged over channels, thresholded with Otsu's
method, turned into a {0, lambda} mask and upsampled bicubically back to the
input resolution. The perturbation is then multiplied by that mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nn import conv_base_activations

LAMBDA = 5.0
OTSU_BINS = 256
KEYS_A = -0.5
PERTURBATION_CLIP = 255.0


class DegenerateMaskWarning(UserWarning):
    """The averaged activation map is constant, so the mask is empty."""


def channel_average(omega):
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim != 3 or omega.shape[2] < 1:
        raise ValueError("expected an (H, W, C) activation stack")
    return omega.mean(axis=2)


def otsu_bins(a, bins=OTSU_BINS):
    """Bin index of every value of ``a`` on a uniform grid over [min, max]."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    width = (hi - lo) / bins
    idx = np.floor((a - lo) / width).astype(np.int64)
    return np.clip(idx, 0, bins - 1), lo, width


def otsu_threshold(a, bins=OTSU_BINS, return_degenerate=False):
    """Otsu threshold of a real-valued array.

    Values are histogrammed into ``bins`` uniform bins over [min, max]; the
    candidate thresholds are the ``bins - 1`` interior bin boundaries. The
    between-class variance is compared in exact integer arithmetic (bin-index
    units, which is an affine map of bin centres), ties going to the smaller
    threshold. A constant array yields ``min(a)`` and a degenerate flag.
    """
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        warnings.warn("constant activation map; Otsu threshold is degenerate", DegenerateMaskWarning, stacklevel=2)
        return (lo, True) if return_degenerate else lo
    idx, lo, width = otsu_bins(a, bins)
    counts = np.bincount(idx.ravel(), minlength=bins)
    n = int(counts.sum())
    total = int((counts * np.arange(bins)).sum())
    c0 = s0 = 0
    best_k, best_num, best_den = None, -1, 1
    for k in range(1, bins):
        c0 += int(counts[k - 1])
        s0 += (k - 1) * int(counts[k - 1])
        c1 = n - c0
        if c0 == 0 or c1 == 0:
            num, den = 0, 1
        else:
            num, den = (n * s0 - total * c0) ** 2, c0 * c1
        # num/den > best_num/best_den, without floating point
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    tau = lo + best_k * width
    return (tau, False) if return_degenerate else tau


def binarize_scale(a, tau, lam=LAMBDA):
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > tau, lam, 0.0)


def keys_kernel(x, a=KEYS_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_weights(n_in, n_out, a=KEYS_A):
    """``(n_out, n_in)`` matrix of 1-D cubic convolution weights.

    Half-pixel alignment ``src = (dst + 0.5) * n_in / n_out - 0.5``; taps that
    fall outside the input are folded onto the nearest edge sample.
    """
    weights = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    for offset in (-1, 0, 1, 2):
        w = keys_kernel(frac - offset, a)
        cols = np.clip(base + offset, 0, n_in - 1)
        np.add.at(weights, (np.arange(n_out), cols), w)
    return weights


def bicubic_resize(a, size, a_param=KEYS_A):
    """Resample a 2-D field, or each channel of an (H, W, C) stack, to ``size``."""
    a = np.asarray(a, dtype=np.float64)
    wy = bicubic_weights(a.shape[0], size[0], a_param)
    wx = bicubic_weights(a.shape[1], size[1], a_param)
    if a.ndim == 2:
        return wy @ a @ wx.T
    return np.einsum("ij,jkc,lk->ilc", wy, a, wx)


def bicubic_upsample(a, size, a_param=KEYS_A):
    if size[0] < np.shape(a)[0] or size[1] < np.shape(a)[1]:
        raise ValueError("bicubic_upsample only enlarges")
    return bicubic_resize(a, size, a_param)


@dataclass
class Refinement:
    average: np.ndarray
    tau: float
    degenerate: bool
    mask: np.ndarray
    filter: np.ndarray
    perturbation: np.ndarray

    def event(self):
        return {
            "event": "refine",
            "tau": self.tau,
            "degenerate": self.degenerate,
            "mask_fraction": float(np.mean(self.mask > 0)),
        }


def refine_details(classifier, p, lam=LAMBDA, clip=PERTURBATION_CLIP):
    p = np.asarray(p, dtype=np.float64)
    omega = conv_base_activations(classifier, p)
    avg = channel_average(omega)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMaskWarning)
        tau, degenerate = otsu_threshold(avg, return_degenerate=True)
    if degenerate:
        warnings.warn("refinement mask is empty; perturbation zeroed", DegenerateMaskWarning, stacklevel=2)
    mask = binarize_scale(avg, tau, lam)
    f2d = bicubic_upsample(mask, p.shape[:2])
    f = np.repeat(f2d[:, :, None], p.shape[2], axis=2)
    refined = np.clip(p * f, -clip, clip)
    return Refinement(avg, float(tau), degenerate, mask, f, refined)


def refine_perturbation(classifier, p, lam=LAMBDA, clip=PERTURBATION_CLIP):
    return refine_details(classifier, p, lam, clip).perturbation
