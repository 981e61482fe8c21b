"""Synthetic benchmark data: oriented ellipse patches with known factors.

Each patch shows a centered anisotropic ellipse ("nucleus") at a uniformly
drawn orientation, with per-patch isotropic factors (size, intensity,
boundary rim thickness), optional distractor blobs, and additive Gaussian
noise. Every generative factor is recorded so downstream probes can be
scored against ground truth. Rendering is supersampled for anti-aliasing,
and the pixel grid is symmetric about the patch center, so rotating theta0
by a quarter turn is an exact 90-degree rotation of the image up to float
roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PatchDataset
from .rng import RngStream

TWO_PI = 2.0 * np.pi
BACKGROUND = 0.12
RIM_VALUE = 0.08


@dataclass
class SyntheticConfig:
    n_bags: int = 300
    patches_per_bag: int = 32
    patch_size: int = 36
    size_range: tuple = (3.0, 8.0)          # ellipse semi-major axis, px
    intensity_range: tuple = (0.45, 0.95)   # interior brightness
    boundary_range: tuple = (0.6, 1.8)      # rim thickness, px
    aspect: float = 0.55                    # semi-minor / semi-major
    max_distractors: int = 3
    noise: float = 0.02
    marker: bool = True                     # asymmetric dot, makes theta0
                                            # identifiable modulo 2*pi
    bag_size_jitter: float = 0.35           # within-bag size spread, px
    split_fractions: tuple = (0.6, 0.2, 0.2)
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_bags < 1 or self.patches_per_bag < 1:
            raise ValueError("need at least one bag and one patch per bag")
        if self.patch_size < 8:
            raise ValueError("patch_size must be at least 8")
        for name in ("size_range", "intensity_range", "boundary_range"):
            lo, hi = getattr(self, name)
            if not hi >= lo:
                raise ValueError(f"{name} is degenerate: ({lo}, {hi})")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 \
                or len(self.split_fractions) != 3 \
                or min(self.split_fractions) <= 0:
            raise ValueError("split_fractions must be three positive "
                             "values summing to 1")
        if not 0 < self.aspect <= 1:
            raise ValueError("aspect must be in (0, 1]")
        if self.noise < 0 or self.max_distractors < 0:
            raise ValueError("noise and max_distractors must be non-negative")

    @property
    def period(self) -> float:
        """Orientation identifiability period of the rendered shape."""
        return TWO_PI if self.marker else np.pi


def render_patch(patch_size: int, theta0: float, size: float,
                 intensity: float, boundary: float, aspect: float = 0.55,
                 distractors=(), marker: bool = True,
                 supersample: int = 4) -> np.ndarray:
    """Render one noiseless patch as a (patch_size, patch_size) float array.

    `distractors` is a sequence of (radius_px, angle, blob_radius_px,
    amplitude) tuples placed in polar coordinates around the center,
    independent of theta0.
    """
    s = patch_size * supersample
    coords = (np.arange(s) + 0.5) / supersample - patch_size / 2.0
    x = coords[None, :]
    y = coords[:, None]
    img = np.full((s, s), BACKGROUND)

    for dist_r, dist_ang, blob_r, amp in distractors:
        cx = dist_r * np.cos(dist_ang)
        cy = dist_r * np.sin(dist_ang)
        img[(x - cx) ** 2 + (y - cy) ** 2 <= blob_r ** 2] = amp

    a = size
    b = aspect * size
    u = x * np.cos(theta0) + y * np.sin(theta0)
    v = -x * np.sin(theta0) + y * np.cos(theta0)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    img[(d > 1.0) & ((d - 1.0) * b <= boundary)] = RIM_VALUE
    img[d <= 1.0] = intensity
    if marker:
        # straddles the ellipse edge, so it contrasts against both the
        # interior and the background and stays visible at any intensity
        mx = 0.85 * a * np.cos(theta0)
        my = 0.85 * a * np.sin(theta0)
        r_m = max(1.4, 0.3 * a)
        img[(x - mx) ** 2 + (y - my) ** 2 <= r_m ** 2] = \
            min(1.0, intensity + 0.35)

    return img.reshape(patch_size, supersample,
                       patch_size, supersample).mean(axis=(1, 3))


def _quantile_labels(values: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """Equal-count quantile binning via ranks: counts differ by at most 1."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(len(values))
    return (ranks * n_classes) // len(values)


def _assign_splits(labels: np.ndarray, fractions, rng) -> np.ndarray:
    """Stratified bag-to-split assignment; ≥ 3 bags per split per class."""
    splits = np.empty(len(labels), dtype=object)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_test = n - n_train - n_val
        if min(n_train, n_val, n_test) < 3:
            raise ValueError(
                f"class {cls}: split sizes ({n_train}, {n_val}, {n_test}) "
                "leave fewer than 3 bags per split per class")
        splits[idx[:n_train]] = "train"
        splits[idx[n_train:n_train + n_val]] = "val"
        splits[idx[n_train + n_val:]] = "test"
    return splits.astype("U8")


def generate_dataset(config: SyntheticConfig) -> PatchDataset:
    """Build the full synthetic dataset in memory, seed-deterministically.

    Bag labels are the tercile of the bag's mean size factor; splits are
    stratified by label. Images come back as (n, 1, h, w) float32.
    """
    n_total = config.n_bags * config.patches_per_bag
    bag_rng = RngStream(config.seed, stream=21)
    lo, hi = config.size_range
    size_centers = bag_rng.uniform((config.n_bags,)) * (hi - lo) + lo

    images = np.empty((n_total, 1, config.patch_size, config.patch_size),
                      dtype=np.float32)
    bags = np.repeat(np.arange(config.n_bags), config.patches_per_bag)
    factors = {name: np.empty(n_total)
               for name in ("theta0", "size", "intensity", "boundary",
                            "distractors")}
    half = config.patch_size / 2.0
    for i in range(n_total):
        # one private stream slice per patch: generation order (or a
        # parallel split over patches) cannot change the content
        rng = RngStream(config.seed, stream=22, counter=16 * i)
        theta0 = float(rng.uniform()) * TWO_PI
        size = float(np.clip(
            size_centers[bags[i]]
            + (2.0 * float(rng.uniform()) - 1.0) * config.bag_size_jitter,
            lo, hi))
        i_lo, i_hi = config.intensity_range
        intensity = float(rng.uniform()) * (i_hi - i_lo) + i_lo
        b_lo, b_hi = config.boundary_range
        boundary = float(rng.uniform()) * (b_hi - b_lo) + b_lo
        n_dist = int(rng.integers(0, config.max_distractors + 1)) \
            if config.max_distractors else 0
        draws = rng.uniform((4, max(n_dist, 1)))
        dist = [(half * (0.6 + 0.32 * draws[0, j]),
                 TWO_PI * draws[1, j],
                 1.0 + 1.5 * draws[2, j],
                 0.25 + 0.3 * draws[3, j]) for j in range(n_dist)]
        patch = render_patch(config.patch_size, theta0, size, intensity,
                             boundary, config.aspect, dist, config.marker,
                             config.supersample)
        if config.noise > 0:
            patch = patch + config.noise * rng.normal(patch.shape)
        images[i, 0] = np.clip(patch, 0.0, 1.0)
        factors["theta0"][i] = theta0
        factors["size"][i] = size
        factors["intensity"][i] = intensity
        factors["boundary"][i] = boundary
        factors["distractors"][i] = n_dist

    bag_mean_size = np.array([factors["size"][bags == b].mean()
                              for b in range(config.n_bags)])
    bag_labels = _quantile_labels(bag_mean_size)
    bag_splits = _assign_splits(bag_labels, config.split_fractions,
                                RngStream(config.seed, stream=23))
    return PatchDataset(images, bags, bag_labels[bags], bag_splits[bags],
                        factors)
