"""Bump-function approximate identity and grid mollification."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .errors import InvalidParameter


def bump(r2):
    """S as a function of |x|^2: exp(-1/(1-|x|^2)) inside the unit ball, 0 outside."""
    r2 = np.asarray(r2, float)
    out = np.zeros_like(r2)
    m = r2 < 1
    out[m] = np.exp(-1.0 / (1.0 - r2[m]))
    return out


def kernel_stencil(h, sigma):
    """Discrete Gamma_{S,sigma} on a grid with spacings h, renormalized to unit sum."""
    h = np.atleast_1d(np.asarray(h, float))
    half = [int(np.floor(sigma / hh)) for hh in h]
    axes = [np.arange(-k, k + 1) * hh for k, hh in zip(half, h)]
    mesh = np.meshgrid(*axes, indexing="ij")
    r2 = sum(m ** 2 for m in mesh) / sigma ** 2
    K = bump(r2)
    if K.sum() <= 0:
        K = np.zeros([2 * k + 1 for k in half])
        K[tuple(half)] = 1.0
    return K / K.sum()


def mollify(values, h, sigma, boundary="zero"):
    """Convolve grid samples with the normalized bump kernel of width sigma.

    ``boundary="zero"`` treats the field as zero outside the grid (compact
    support).  ``boundary="renormalize"`` divides by the kernel mass inside
    the grid, so constants are preserved up to the boundary.
    """
    values = np.asarray(values, float)
    h = np.atleast_1d(np.asarray(h, float))
    if not sigma > 0:
        raise InvalidParameter("sigma must be positive")
    if sigma < h.max():
        warnings.warn("mollifier width below grid spacing: kernel under-resolved", RuntimeWarning)
    K = kernel_stencil(h, sigma)
    out = ndimage.convolve(values, K, mode="constant", cval=0.0)
    if boundary == "renormalize":
        out = out / ndimage.convolve(np.ones_like(values), K, mode="constant", cval=0.0)
    return out
