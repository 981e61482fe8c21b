"""Tests for latent traversal grids."""

import numpy as np
import pytest

from se2vae import latent as L
from se2vae import models as M
from se2vae.models import ModelConfig, build_model
from se2vae.rng import RngStream
from se2vae.tensor import Tensor, no_grad
from se2vae.traversal import (encode_deterministic, interpolate, iso_sweep,
                              ori_cycle, tile_grid, traverse)


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(variant="disentangled", n_orientations=4,
                      latent_iso=2, latent_ori=2, channels=(2, 2, 2, 2),
                      baseline_channels=(2, 2, 2, 2), patch_size=16,
                      kernel_size=3, disc_channels=(2, 2, 2, 2))
    store = build_model(cfg, RngStream(0, stream=1))
    return cfg, store


@pytest.fixture(scope="module")
def patch():
    return RngStream(1, stream=2).uniform((1, 1, 16, 16), dtype=np.float32)


class TestOriCycle:
    def test_shape_and_quarter_turn_equivariance(self, model, patch):
        cfg, store = model
        tiles = ori_cycle(Tensor(patch), store, cfg)
        assert tiles.shape == (4, 1, 16, 16)
        # stepping a quarter of the cycle rotates the reconstruction by
        # exactly 90 degrees (up to float roundoff)
        step = cfg.n_orientations // 4
        for j in range(3):
            want = np.rot90(tiles[j], 1, axes=(-2, -1))
            mae = np.abs(want - tiles[j + step]).mean()
            assert mae < 1e-3      # headline tolerance
            assert mae < 1e-6      # actually exact in float32

    def test_deterministic(self, model, patch):
        cfg, store = model
        a = ori_cycle(Tensor(patch), store, cfg)
        b = ori_cycle(Tensor(patch), store, cfg)
        assert np.array_equal(a, b)


class TestIsoSweep:
    def test_default_step_count_is_n(self, model, patch):
        cfg, store = model
        tiles = iso_sweep(Tensor(patch), store, cfg, coord=0)
        assert tiles.shape == (cfg.n_orientations, 1, 16, 16)

    def test_zero_width_gives_identical_tiles(self, model, patch):
        cfg, store = model
        tiles = iso_sweep(Tensor(patch), store, cfg, coord=1, width=0.0)
        for j in range(1, len(tiles)):
            assert np.array_equal(tiles[0], tiles[j])

    def test_nonzero_width_varies(self, model, patch):
        cfg, store = model
        tiles = iso_sweep(Tensor(patch), store, cfg, coord=0, width=3.0)
        assert np.abs(tiles[0] - tiles[-1]).max() > 0

    def test_coord_out_of_range(self, model, patch):
        cfg, store = model
        with pytest.raises(ValueError, match="out of range"):
            iso_sweep(Tensor(patch), store, cfg, coord=5)


class TestInterpolate:
    def test_endpoints_reproduce_reconstructions(self, model, patch):
        cfg, store = model
        other = RngStream(2, stream=2).uniform((1, 1, 16, 16),
                                               dtype=np.float32)
        grid = interpolate(Tensor(patch), Tensor(other), store, cfg,
                           iso_steps=3, ori_steps=3)
        assert grid.shape == (3, 3, 1, 16, 16)
        with no_grad():
            for x, corner in ((patch, grid[0, 0]), (other, grid[-1, -1])):
                sample, _ = encode_deterministic(Tensor(x), store, cfg)
                recon = M.decode(L.LatentSample(sample.z_iso, sample.z_ori),
                                 store, cfg, mode="eval").data[0]
                assert np.array_equal(recon, corner)

    def test_rejects_single_step(self, model, patch):
        cfg, store = model
        with pytest.raises(ValueError, match="two steps"):
            interpolate(Tensor(patch), Tensor(patch), store, cfg,
                        iso_steps=1)


class TestDispatchAndTiling:
    def test_tile_grid_geometry(self):
        tiles = np.zeros((2, 3, 1, 8, 8))
        out = tile_grid(tiles, pad=2, fill=1.0)
        assert out.shape == (1, 2 * 10 - 2, 3 * 10 - 2)
        assert out[0, 8, 0] == 1.0 and out[0, 0, 8] == 1.0
        assert out[0, 0, 0] == 0.0

    def test_traverse_modes(self, model, patch):
        cfg, store = model
        img = traverse("ori-cycle", patch, store, cfg)
        assert img.ndim == 3 and img.min() >= 0.0 and img.max() <= 1.0
        img = traverse("iso-sweep", patch, store, cfg, coord=1)
        assert img.ndim == 3
        two = np.concatenate([patch, patch])
        img = traverse("interpolate", two, store, cfg, steps=3)
        assert img.ndim == 3

    def test_traverse_errors(self, model, patch):
        cfg, store = model
        with pytest.raises(ValueError, match="unknown traversal mode"):
            traverse("spin", patch, store, cfg)
        with pytest.raises(ValueError, match="two source patches"):
            traverse("interpolate", patch, store, cfg)

    def test_requires_disentangled(self, patch):
        cfg = ModelConfig(variant="baseline", patch_size=16, kernel_size=3,
                          channels=(2, 2, 2, 2), latent_baseline=4,
                          baseline_channels=(2, 2, 2, 2),
                          disc_channels=(2, 2, 2, 2))
        store = build_model(cfg, RngStream(0, stream=1))
        with pytest.raises(ValueError, match="disentangled"):
            traverse("ori-cycle", patch, store, cfg)
