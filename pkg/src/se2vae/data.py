"""In-memory patch dataset and bag-stratified batch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PatchDataset:
    """Patches with bag membership, labels, split tags, and optional
    ground-truth generative factors (synthetic data only)."""

    images: np.ndarray              # (n, c, h, w), floats in [0, 1]
    bags: np.ndarray                # (n,) integer bag ids
    labels: np.ndarray              # (n,) integer bag-level class labels
    splits: np.ndarray              # (n,) strings from {train, val, test}
    factors: dict = field(default_factory=dict)   # name -> (n,) array

    def __post_init__(self):
        n = len(self.images)
        for name in ("bags", "labels", "splits"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match images")
        for name, vals in self.factors.items():
            if len(vals) != n:
                raise ValueError(f"factor {name!r} length does not match images")
        bad = set(np.unique(self.splits)) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, split: str) -> "PatchDataset":
        mask = self.splits == split
        if not mask.any():
            raise ValueError(f"split {split!r} is empty")
        return PatchDataset(self.images[mask], self.bags[mask],
                            self.labels[mask], self.splits[mask],
                            {k: v[mask] for k, v in self.factors.items()})


class BagSampler:
    """Round-robin over bags, one uniformly drawn patch per visited bag.

    Keeps the distribution of bags within each batch approximately uniform
    across the epoch, reshuffling the bag order when it is exhausted.
    """

    def __init__(self, bags: np.ndarray, batch_size: int, rng):
        self.unique = np.unique(bags)
        self.members = {b: np.flatnonzero(bags == b) for b in self.unique}
        self.batch_size = batch_size
        self.rng = rng
        self._order = []

    def _next_bag(self) -> int:
        if not self._order:
            self._order = list(self.unique[self.rng.permutation(
                len(self.unique))])
        return self._order.pop()

    def next_batch(self) -> np.ndarray:
        idx = np.empty(self.batch_size, dtype=np.int64)
        for i in range(self.batch_size):
            members = self.members[self._next_bag()]
            pick = int(self.rng.integers(0, len(members)))
            idx[i] = members[pick]
        return idx
