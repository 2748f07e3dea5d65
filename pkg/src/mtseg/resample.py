"""Separable bilinear resampling on plain numpy arrays.

Half-pixel-center convention: output pixel i samples input coordinate
(i + 0.5) * (in_size / out_size) - 0.5, clamped to the valid range.  A
resize to the same size is the identity, and constant images stay
constant for any target size.
"""

import numpy as np


def linear_coeffs(in_size, out_size):
    """Index pairs and blend weights mapping an axis of length in_size
    onto out_size samples.  Returns (lo, hi, w) with
    out[i] = in[lo[i]] * (1 - w[i]) + in[hi[i]] * w[i]."""
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be positive, got {in_size} -> {out_size}")
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    w = src - lo
    return lo, hi, w


def bilinear_resize(img, out_h, out_w):
    """Resize the trailing two axes of img to (out_h, out_w)."""
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    rlo, rhi, rw = linear_coeffs(h, out_h)
    rw = rw.astype(img.dtype, copy=False)
    rows = img[..., rlo, :] * (1.0 - rw)[:, None] + img[..., rhi, :] * rw[:, None]
    clo, chi, cw = linear_coeffs(w, out_w)
    cw = cw.astype(img.dtype, copy=False)
    return rows[..., clo] * (1.0 - cw) + rows[..., chi] * cw
