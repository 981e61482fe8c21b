"""Pure-numpy implementations of the hot convolution/pooling kernels.

Same API as the compiled `_kernels_c` extension; selected by
:mod:`se2vae.backend` when the extension is unavailable.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    """(B,C,H,W) -> (B, C*k*k, Ho*Wo) patch matrix, zero padded."""
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B,C,Ho,Wo,k,k) -> (B, C,k,k, Ho,Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, h, w, k, stride, pad):
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    b = cols.shape[0]
    c = cols.shape[1] // (k * k)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols6 = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        xp = xp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(xp)


def maxpool(x, kh, kw, sh, sw, ph, pw):
    """Max pooling with -inf padding.

    Returns (out, idx) where idx holds the row-major in-window argmax
    (first occurrence wins ties).
    """
    b, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
                   constant_values=-np.inf)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(b, c, ho, wo, kh * kw)
    idx = np.argmax(flat, axis=-1).astype(np.int32)
    out = np.take_along_axis(flat, idx[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(g, idx, h, w, kh, kw, sh, sw, ph, pw):
    """Route gradients to the argmax cell of each window."""
    b, c, ho, wo = g.shape
    dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=g.dtype)
    wi, wj = np.divmod(idx.astype(np.int64), kw)
    oi = np.arange(ho)[:, None] * sh
    oj = np.arange(wo)[None, :] * sw
    rows = (oi[None, None] + wi).ravel()
    cols = (oj[None, None] + wj).ravel()
    bi = np.repeat(np.arange(b), c * ho * wo)
    ci = np.tile(np.repeat(np.arange(c), ho * wo), b)
    np.add.at(dxp, (bi, ci, rows, cols), g.ravel())
    if ph or pw:
        dxp = dxp[:, :, ph:h + ph, pw:w + pw]
    return np.ascontiguousarray(dxp)
