"""Shared brute-force oracles, independent of the optimized code paths."""

import numpy as np


def naive_conv2d(x, w, stride=1, padding=0):
    """Quadruple-nested-loop cross-correlation."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, o, ho, wo), dtype=np.float64)
    for bi in range(b):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = x[bi, :, i * stride:i * stride + k,
                              j * stride:j * stride + k]
                    out[bi, oi, i, j] = np.sum(patch.astype(np.float64) * w[oi])
    return out


def naive_rotate_kernel(kern, theta):
    """Per-pixel bilinear resampling of (k,k) under CCW rotation by theta."""
    k = kern.shape[-1]
    ctr = (k - 1) / 2.0
    out = np.zeros_like(kern, dtype=np.float64)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    for r in range(k):
        for c in range(k):
            x = c - ctr
            y = ctr - r
            xs = x * cos_t + y * sin_t
            ys = -x * sin_t + y * cos_t
            rs = ctr - ys
            cs = xs + ctr
            r0, c0 = int(np.floor(rs)), int(np.floor(cs))
            fr, fc = rs - r0, cs - c0
            val = 0.0
            for dr, wr in ((0, 1 - fr), (1, fr)):
                for dc, wc in ((0, 1 - fc), (1, fc)):
                    ri, ci = r0 + dr, c0 + dc
                    if 0 <= ri < k and 0 <= ci < k:
                        val += wr * wc * kern[ri, ci]
            out[r, c] = val
    return out
