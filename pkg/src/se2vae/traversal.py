"""Latent traversals rendered as tiled image grids.

All modes work on the disentangled variant, encode deterministically
(posterior mean for the isotropic block, circular median for the angular
block), and decode in eval mode, so a traversal is a pure function of the
checkpoint and the source patches.
"""

from __future__ import annotations

import numpy as np

from . import latent as L
from . import models as M
from .tensor import Tensor, no_grad

TWO_PI = 2.0 * np.pi

MODES = ("ori-cycle", "iso-sweep", "interpolate")


def _require_disentangled(config):
    if config.variant != "disentangled":
        raise ValueError("latent traversal requires the disentangled "
                         f"variant, got {config.variant!r}")


def encode_deterministic(x: Tensor, store, config) -> L.LatentSample:
    """Posterior mean isotropic latents, circular-median angular latents."""
    _require_disentangled(config)
    iso_post, ori_post = M.encode(x, store, config, mode="eval")
    z_ori = L.sample_ori(ori_post,
                         eps=np.full(ori_post.Q.shape[:-1], 0.5))
    return L.LatentSample(iso_post.mu, z_ori), iso_post


def _decode(z_iso, z_ori, store, config) -> np.ndarray:
    out = M.decode(L.LatentSample(z_iso, z_ori), store, config, mode="eval")
    return out.data[0]


def ori_cycle(x: Tensor, store, config) -> np.ndarray:
    """Hold the isotropic block, advance every angle by j*2*pi/N.

    Returns (N, c, h, w) tiles; by decoder equivariance, stepping by a
    quarter of the cycle rotates the reconstruction by 90 degrees.
    """
    with no_grad():
        sample, _ = encode_deterministic(x, store, config)
        n = config.n_orientations
        tiles = []
        for j in range(n):
            shifted = Tensor(np.mod(sample.z_ori.data + j * TWO_PI / n,
                                    TWO_PI), dtype=sample.z_ori.dtype)
            tiles.append(_decode(sample.z_iso, shifted, store, config))
    return np.stack(tiles)


def iso_sweep(x: Tensor, store, config, coord: int,
              steps: int | None = None, width: float = 3.0) -> np.ndarray:
    """Hold the angular block, sweep one isotropic coordinate over
    mu +- width*sigma in evenly spaced steps (default N tiles)."""
    if steps is None:
        steps = config.n_orientations
    if steps < 2:
        raise ValueError("iso_sweep needs at least two steps")
    with no_grad():
        sample, iso_post = encode_deterministic(x, store, config)
        if not 0 <= coord < config.latent_iso:
            raise ValueError(f"iso coordinate {coord} out of range "
                             f"[0, {config.latent_iso})")
        mu = iso_post.mu.data[0, coord]
        sigma = iso_post.sigma.data[0, coord]
        values = mu + width * sigma * np.linspace(-1.0, 1.0, steps)
        tiles = []
        for v in values:
            z = sample.z_iso.data.copy()
            z[0, coord] = v
            tiles.append(_decode(Tensor(z, dtype=sample.z_iso.dtype),
                                 sample.z_ori, store, config))
    return np.stack(tiles)


def interpolate(xa: Tensor, xb: Tensor, store, config,
                iso_steps: int = 5, ori_steps: int = 5) -> np.ndarray:
    """Grid of decodes: rows walk the angular block along the shortest
    circular path from patch A to patch B, columns interpolate the
    isotropic block linearly. Corner (0, 0) is A's reconstruction and
    corner (-1, -1) is B's, exactly."""
    if iso_steps < 2 or ori_steps < 2:
        raise ValueError("interpolation needs at least two steps per axis")
    with no_grad():
        sa, _ = encode_deterministic(xa, store, config)
        sb, _ = encode_deterministic(xb, store, config)
        a_ori, b_ori = sa.z_ori.data, sb.z_ori.data
        # shortest signed circular displacement per angle component
        delta = np.mod(b_ori - a_ori + np.pi, TWO_PI) - np.pi
        rows = []
        for ti in np.linspace(0.0, 1.0, ori_steps):
            z_ori = a_ori + ti * delta if ti < 1.0 else b_ori
            z_ori = np.mod(z_ori, TWO_PI)
            row = []
            for tj in np.linspace(0.0, 1.0, iso_steps):
                z_iso = (1.0 - tj) * sa.z_iso.data + tj * sb.z_iso.data
                row.append(_decode(Tensor(z_iso, dtype=sa.z_iso.dtype),
                                   Tensor(z_ori, dtype=sa.z_ori.dtype),
                                   store, config))
            rows.append(np.stack(row))
    return np.stack(rows)


def tile_grid(tiles: np.ndarray, pad: int = 2, fill: float = 1.0) -> np.ndarray:
    """Assemble (rows, cols, c, h, w) tiles into one (c, H, W) image."""
    if tiles.ndim == 4:
        tiles = tiles[None]
    rows, cols, c, h, w = tiles.shape
    out = np.full((c, rows * (h + pad) - pad, cols * (w + pad) - pad),
                  fill, dtype=tiles.dtype)
    for i in range(rows):
        for j in range(cols):
            out[:, i * (h + pad):i * (h + pad) + h,
                j * (w + pad):j * (w + pad) + w] = tiles[i, j]
    return out


def traverse(mode: str, patches, store, config, coord: int = 0,
             steps: int | None = None) -> np.ndarray:
    """Dispatch a traversal mode; returns the tiled (c, H, W) image grid.

    `patches` is a (k, c, h, w) array; interpolate needs two patches, the
    other modes use the first one.
    """
    if mode not in MODES:
        raise ValueError(f"unknown traversal mode {mode!r}; "
                         f"choose from {MODES}")
    patches = np.asarray(patches)
    x = Tensor(patches[:1])
    if mode == "ori-cycle":
        tiles = ori_cycle(x, store, config)
    elif mode == "iso-sweep":
        tiles = iso_sweep(x, store, config, coord, steps)
    else:
        if len(patches) < 2:
            raise ValueError("interpolate needs two source patches")
        tiles = interpolate(x, Tensor(patches[1:2]), store, config,
                            iso_steps=steps or 5, ori_steps=steps or 5)
    return tile_grid(np.clip(tiles, 0.0, 1.0))
