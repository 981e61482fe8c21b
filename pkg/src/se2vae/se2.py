"""Roto-translation group-equivariant layers.

Feature maps with an explicit orientation axis are plain tensors of shape
(batch, channels, N, height, width). Kernel rotation is a precomputed
bilinear-interpolation linear map, so every rotated copy stays
differentiable in the base kernel. Rotations by multiples of 90 degrees
are exact pixel permutations; all equivariance contracts are asserted at
those angles.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor


@lru_cache(maxsize=None)
def rotation_weights(k: int, n: int) -> np.ndarray:
    """(n, k*k, k*k) table: rotated_flat[j] = base_flat @ weights[j].T.

    Entry [j, t, s] is the bilinear weight of source pixel s in target
    pixel t under rotation by 2*pi*j/n about the kernel center. Values
    falling outside the original support are zero-padded, so each target
    row sums to at most 1.
    """
    ctr = (k - 1) / 2.0
    table = np.zeros((n, k * k, k * k))
    for j in range(n):
        theta = 2.0 * np.pi * j / n
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
                t = r * k + c
                for dr, wr in ((0, 1.0 - fr), (1, fr)):
                    for dc, wc in ((0, 1.0 - fc), (1, fc)):
                        ri, ci = r0 + dr, c0 + dc
                        if 0 <= ri < k and 0 <= ci < k and wr * wc > 0:
                            table[j, t, ri * k + ci] += wr * wc
    # snap the exact quarter-turn permutations to remove roundoff
    table[np.abs(table) < 1e-12] = 0.0
    table[np.abs(table - 1.0) < 1e-12] = 1.0
    return table


def _weights_tensor(k: int, n: int, j: int, dtype) -> Tensor:
    return Tensor(rotation_weights(k, n)[j].T, dtype=dtype)


def rotate_kernel(base: Tensor, j: int, n: int) -> Tensor:
    """Rotate (..., k, k) kernels by 2*pi*j/n; linear in the base kernel."""
    if not 0 <= j < n:
        raise IndexError(f"orientation index {j} out of range for N={n}")
    k = base.shape[-1]
    lead = base.shape[:-2]
    flat = T.reshape(base, (int(np.prod(lead)) if lead else 1, k * k))
    rot = T.matmul(flat, _weights_tensor(k, n, j, base.dtype))
    return T.reshape(rot, tuple(lead) + (k, k))


def lifting_conv(image: Tensor, base: Tensor, n: int, stride: int = 1,
                 padding: int = 0) -> Tensor:
    """Correlate an image with N rotated copies of each base kernel.

    (B,C,H,W) x (M,C,k,k) -> (B,M,N,H',W').
    """
    m, c, k, _ = base.shape
    rotated = T.stack([rotate_kernel(base, j, n) for j in range(n)], axis=1)
    big = T.reshape(rotated, (m * n, c, k, k))
    out = T.conv2d(image, big, stride=stride, padding=padding)
    b, _, ho, wo = out.shape
    return T.reshape(out, (b, m, n, ho, wo))


def _se2_kernel_stack(kern: Tensor, n: int) -> Tensor:
    """Expand (Mout,Min,N,k,k) into the (N*Mout, Min*N, k, k) conv kernel.

    Output orientation j uses the base kernels cyclically shifted by j along
    their orientation axis and spatially rotated by j.
    """
    m_out, m_in, n_k, k, _ = kern.shape
    if n_k != n:
        raise ValueError(f"kernel orientation axis {n_k} does not match N={n}")
    per_j = []
    for j in range(n):
        shifted = T.roll(kern, j, axis=2)
        per_j.append(T.reshape(rotate_kernel(shifted, j, n),
                               (m_out, m_in * n, k, k)))
    return T.reshape(T.stack(per_j, axis=0), (n * m_out, m_in * n, k, k))


def se2_conv(x: Tensor, kern: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Group convolution on orientation maps.

    (B,Min,N,H,W) x (Mout,Min,N,k,k) -> (B,Mout,N,H',W').
    """
    b, m_in, n, h, w = x.shape
    m_out = kern.shape[0]
    if kern.shape[1] != m_in or kern.shape[2] != n:
        raise ValueError(f"kernel {kern.shape} does not match input {x.shape}")
    big = _se2_kernel_stack(kern, n)
    flat = T.reshape(x, (b, m_in * n, h, w))
    out = T.conv2d(flat, big, stride=stride, padding=padding)
    _, _, ho, wo = out.shape
    out = T.reshape(out, (b, n, m_out, ho, wo))
    return T.transpose(out, (0, 2, 1, 3, 4))


def se2_transposed_conv(x: Tensor, kern: Tensor, stride: int = 1,
                        padding: int = 0) -> Tensor:
    """Adjoint of se2_conv: (B,Mout,N,H,W) x (Mout,Min,N,k,k) -> (B,Min,N,H',W')."""
    b, m_out, n, h, w = x.shape
    if kern.shape[0] != m_out or kern.shape[2] != n:
        raise ValueError(f"kernel {kern.shape} does not match input {x.shape}")
    m_in = kern.shape[1]
    big = _se2_kernel_stack(kern, n)
    flat = T.reshape(T.transpose(x, (0, 2, 1, 3, 4)), (b, n * m_out, h, w))
    out = T.transposed_conv2d(flat, big, stride=stride, padding=padding)
    _, _, ho, wo = out.shape
    return T.reshape(out, (b, m_in, n, ho, wo))


def lifting_transposed(x: Tensor, base: Tensor, n: int, stride: int = 1,
                       padding: int = 0) -> Tensor:
    """Adjoint of lifting_conv: (B,M,N,H,W) x (M,C,k,k) -> (B,C,H',W')."""
    b, m, n_x, h, w = x.shape
    if base.shape[0] != m or n_x != n:
        raise ValueError(f"kernel {base.shape} does not match input {x.shape}")
    c, k = base.shape[1], base.shape[-1]
    rotated = T.stack([rotate_kernel(base, j, n) for j in range(n)], axis=1)
    big = T.reshape(rotated, (m * n, c, k, k))
    flat = T.reshape(x, (b, m * n, h, w))
    return T.transposed_conv2d(flat, big, stride=stride, padding=padding)


def orientation_project(x: Tensor, mode: str = "mean") -> Tensor:
    """Reduce the orientation axis; invariant to cyclic shifts of it."""
    if mode == "mean":
        return T.tmean(x, axis=2)
    if mode == "max":
        return T.amax(x, axis=2)
    raise ValueError(f"unknown projection mode {mode!r}")


def cyclic_shift(x: Tensor, k: int, axis: int = 2) -> Tensor:
    """Shift the orientation axis: index j maps to (j + k) mod N."""
    n = x.shape[axis]
    return T.roll(x, k % n, axis=axis)


def orientation_batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                           running_mean: np.ndarray, running_var: np.ndarray,
                           eps: float = 1e-5, momentum: float = 0.9,
                           train: bool = True) -> Tensor:
    """Batch norm with per-channel statistics over batch, orientation and space."""
    if train and x.shape[0] < 2:
        raise ValueError("orientation_batch_norm needs batch >= 2 in train mode")
    return T.batch_norm(x, gamma, beta, axes=(0, 2, 3, 4),
                        running_mean=running_mean, running_var=running_var,
                        eps=eps, momentum=momentum, train=train, channel_axis=1)


def spatial_max_pool(x: Tensor) -> Tensor:
    """2x-downsampling max pool applied independently per orientation slice."""
    b, m, n, h, w = x.shape
    pooled = T.max_pool2d(T.reshape(x, (b, m * n, h, w)))
    _, _, ho, wo = pooled.shape
    return T.reshape(pooled, (b, m, n, ho, wo))


def rotate_se2_map(x: Tensor, quarter_turns: int) -> Tensor:
    """Combined group action on an orientation map: spatial quarter-turn
    rotation plus the matching cyclic shift of the orientation axis."""
    n = x.shape[2]
    if n % 4 != 0:
        raise ValueError("combined action at quarter turns needs N divisible by 4")
    return cyclic_shift(T.rotate_image(x, quarter_turns),
                        quarter_turns * (n // 4), axis=2)
