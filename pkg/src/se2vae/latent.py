"""Latent posteriors, reparameterized samplers, and KL terms.

Three posterior families are supported: a plain diagonal Gaussian
(baseline), a Gaussian over an orientation-by-channel grid, and the
disentangled pair of a rotation-invariant Gaussian block plus a
row-stochastic angular block. All samplers take noise explicitly (or an
RngStream to draw it), so a loss can be re-evaluated bit-for-bit.

Angular conventions: the circle [0, 2pi) is split into N equal bins, bin
j covering [2pi*j/N, 2pi*(j+1)/N). The angular posterior is the
piecewise-constant density with bin masses Q, and its sampler inverts the
piecewise-linear CDF. The CDF is anchored at the argmax bin of each row
rather than at angle zero; this draws from the identical distribution but
makes the sampler exactly equivariant in (Q, fixed noise) under cyclic
shifts, which anchoring at zero is not (a mass redistribution across the
anchor changes which bin a fixed quantile lands in).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

TWO_PI = 2.0 * np.pi


@dataclass
class IsoPosterior:
    """Diagonal Gaussian q(z_iso | x): shapes (..., M), sigma > 0."""

    mu: Tensor
    sigma: Tensor


@dataclass
class OriPosterior:
    """Angular posterior q(z_ori | x): bin masses Q of shape (..., M', N)."""

    Q: Tensor


@dataclass
class Se2GridPosterior:
    """Gaussian over an (N, M) orientation grid: shapes (..., N, M)."""

    mu: Tensor
    sigma: Tensor


@dataclass
class LatentSample:
    """A draw from the disentangled posterior."""

    z_iso: Tensor
    z_ori: Tensor


def sample_iso(post: IsoPosterior, rng=None, eps: np.ndarray | None = None) -> Tensor:
    """Reparameterized draw mu + eps * sigma, eps ~ N(0, 1) per element."""
    if eps is None:
        eps = rng.normal(post.mu.shape, dtype=post.mu.dtype)
    return post.mu + post.sigma * Tensor(eps, dtype=post.mu.dtype)


def kl_iso(post: IsoPosterior) -> Tensor:
    """KL to the standard normal, summed over the latent axis.

    Returns one value per leading index: sum_i 0.5*(s_i^2 + m_i^2 - 1 - ln s_i^2).
    """
    mu, sigma = post.mu, post.sigma
    return T.tsum(0.5 * (sigma * sigma + mu * mu - 1.0) - T.log(sigma),
                  axis=-1)


def _check_rows(q: np.ndarray, tol: float = 1e-4) -> None:
    sums = q.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(q < -tol):
        raise ValueError("angular posterior rows must lie on the simplex")


def sample_ori(post: OriPosterior, rng=None, eps: np.ndarray | None = None) -> Tensor:
    """Inverse-transform draw of angles in [0, 2pi) from each Q row.

    Differentiable in Q with eps held fixed (bin choice is treated as a
    constant, giving the left-segment derivative at CDF knots).
    """
    q = post.Q
    n = q.shape[-1]
    _check_rows(q.data)
    if eps is None:
        eps = rng.uniform(q.shape[:-1], dtype=q.dtype)
    eps = np.asarray(eps, dtype=q.dtype)

    # anchor each row's CDF at its argmax bin (shift-covariant choice)
    start = np.argmax(q.data, axis=-1)
    # cumulative mass walking n bins forward from the anchor
    fwd = (start[..., None] + np.arange(n)) % n
    rel = np.take_along_axis(q.data, fwd, axis=-1).cumsum(axis=-1)
    t = np.minimum(np.sum(rel < eps[..., None], axis=-1), n - 1)
    j = (start + t) % n

    # prev = mass of the t bins between the anchor and the landing bin,
    # rebuilt on-tape so the draw stays differentiable in Q
    doubled = T.concat([q, q], axis=-1)
    cum = T.cumsum_last(T.concat(
        [Tensor(np.zeros(q.shape[:-1] + (1,)), dtype=q.dtype), doubled],
        axis=-1))
    prev = T.gather_last(cum, start + t) - T.gather_last(cum, start)
    mass = T.gather_last(q, j)
    frac = (Tensor(eps, dtype=q.dtype) - prev) / (mass + 1e-12)
    z = (Tensor(j, dtype=q.dtype) + frac) * (TWO_PI / n)
    # wrap by a constant multiple of 2pi; gradient passes through unchanged
    return z - Tensor(TWO_PI * np.floor(z.data / TWO_PI), dtype=q.dtype)


def kl_ori(post: OriPosterior) -> Tensor:
    """KL of the binned density to uniform on [0, 2pi): sum_i (ln N - H(Q_i)).

    Summed over the latent axis, one value per leading index.
    """
    q = post.Q
    n = q.shape[-1]
    ent = -T.tsum(q * T.log(q + 1e-12), axis=-1)
    return T.tsum(np.log(n) - ent, axis=-1)


def encode_angle_soft(z_ori: Tensor, n: int, width: float = 1.0) -> Tensor:
    """Smooth angles (..., M') into orientation vectors (..., M', N).

    Circular triangular weights over the bin centers 2pi*j/n; at the
    default one-bin width the two nearest centers share the mass and the
    rows sum to 1 with no renormalization.
    """
    centers = np.arange(n) * (TWO_PI / n)
    diff = T.reshape(z_ori, z_ori.shape + (1,)) - Tensor(centers, dtype=z_ori.dtype)
    # wrap to [-pi, pi) by subtracting a constant multiple of 2pi
    diff = diff - Tensor(TWO_PI * np.round(diff.data / TWO_PI), dtype=z_ori.dtype)
    w = T.relu(1.0 - T.absolute(diff) * (n / (TWO_PI * width)))
    return w / T.tsum(w, axis=-1, keepdims=True)


def expand_iso(z_iso: Tensor, n: int) -> Tensor:
    """Repeat each value n times along a new trailing orientation axis."""
    return T.broadcast_to(T.reshape(z_iso, z_iso.shape + (1,)),
                          z_iso.shape + (n,))


def sample_se2_grid(post: Se2GridPosterior, rng=None,
                    eps: np.ndarray | None = None) -> Tensor:
    """Elementwise reparameterized draw over the orientation grid."""
    if eps is None:
        eps = rng.normal(post.mu.shape, dtype=post.mu.dtype)
    return post.mu + post.sigma * Tensor(eps, dtype=post.mu.dtype)


def kl_se2_grid(post: Se2GridPosterior) -> Tensor:
    """Standard-normal KL summed over the grid (both trailing axes)."""
    flat_shape = post.mu.shape[:-2] + (-1,)
    return kl_iso(IsoPosterior(T.reshape(post.mu, flat_shape),
                               T.reshape(post.sigma, flat_shape)))
