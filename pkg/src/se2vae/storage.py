"""File formats: patch images, dataset manifests, checkpoints, embeddings.

Patches are ordinary 8-bit RGB PNG files holding [0, 1] floats. Manifests
and embeddings are comma-separated text. Checkpoints are a small binary
container (magic "SE2VAE01") whose float payloads are stored as raw
little-endian 32-bit values, so a save/load round trip is bit-exact on any
platform.
"""

from __future__ import annotations

import csv
import dataclasses
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .data import PatchDataset
from .models import ModelConfig, ParameterStore, build_model
from .rng import RngStream

MANIFEST_HEADER = ("path", "bag", "split", "label", "theta0", "size",
                   "intensity", "boundary", "distractors")
FACTOR_NAMES = MANIFEST_HEADER[4:]

MAGIC = b"SE2VAE01"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# patch images


def save_patch(path, image: np.ndarray) -> None:
    """Write a (h, w), (1, h, w), or (3, h, w) float image as 8-bit RGB."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"cannot save image of shape {image.shape}")
    quant = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quant.transpose(1, 2, 0), "RGB").save(path)


def load_patch(path, channels: int = 3) -> np.ndarray:
    """Read a patch back as (channels, h, w) float32 in [0, 1].

    channels=1 averages the RGB planes (the generator writes gray images,
    so this is lossless up to quantization).
    """
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    arr = arr.transpose(2, 0, 1)
    if channels == 1:
        arr = arr.mean(axis=0, keepdims=True, dtype=np.float32)
    elif channels != 3:
        raise ValueError("channels must be 1 or 3")
    return arr


# ---------------------------------------------------------------------------
# dataset manifest


def write_dataset(dataset: PatchDataset, out_dir) -> Path:
    """Write every patch as a PNG plus a manifest.csv; returns the manifest
    path. Paths in the manifest are relative to the manifest directory."""
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for i in range(len(dataset)):
            rel = f"patches/patch_{i:06d}.png"
            save_patch(out_dir / rel, dataset.images[i])
            writer.writerow([rel, int(dataset.bags[i]), dataset.splits[i],
                             int(dataset.labels[i])]
                            + [repr(float(dataset.factors[k][i]))
                               for k in FACTOR_NAMES])
    return manifest


def load_dataset(manifest_path, channels: int = 1) -> PatchDataset:
    """Read a manifest and its patch files back into memory."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {header}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"manifest {manifest_path} has no rows")
    images, bags, splits, labels = [], [], [], []
    factors = {k: [] for k in FACTOR_NAMES}
    for row in rows:
        target = base / row[0]
        if not target.exists():
            raise FileNotFoundError(f"manifest references missing file "
                                    f"{target}")
        images.append(load_patch(target, channels))
        bags.append(int(row[1]))
        splits.append(row[2])
        labels.append(int(row[3]))
        for k, val in zip(FACTOR_NAMES, row[4:]):
            factors[k].append(float(val))
    return PatchDataset(np.stack(images), np.array(bags),
                        np.array(labels), np.array(splits),
                        {k: np.array(v) for k, v in factors.items()})


# ---------------------------------------------------------------------------
# model config <-> flat key=value text


def config_to_dict(config: ModelConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        val = getattr(config, f.name)
        if isinstance(val, tuple):
            out[f.name] = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            out[f.name] = "true" if val else "false"
        else:
            out[f.name] = str(val)
    return out


def config_from_dict(kv: dict) -> ModelConfig:
    return dataclass_from_kv(ModelConfig, kv)


# ---------------------------------------------------------------------------
# checkpoints


class _Reader:
    """Byte cursor that reports its offset in parse errors."""

    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise ValueError(f"{self.path}: truncated checkpoint at byte "
                             f"{self.off} (wanted {n} more)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def save_checkpoint(path, store: ParameterStore, config: ModelConfig,
                    extra: dict | None = None) -> None:
    """Serialize parameters and batch-norm buffers with the model config."""
    kv = dict(config_to_dict(config))
    for key, val in (extra or {}).items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid extra key {key!r}")
        kv[f"extra.{key}"] = str(val)
    text = "".join(f"{k}={v}\n" for k, v in sorted(kv.items())).encode()

    records = [(f"param:{name}", t.data) for name, t in
               sorted(store.params.items())]
    records += [(f"buffer:{name}", arr) for name, arr in
                sorted(store.buffers.items())]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            raw = name.encode()
            data = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Parse a checkpoint into (key=value dict, name -> float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob, path)
    if rd.take(8) != MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0, not a checkpoint")
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} "
                         f"at byte 8")
    text = rd.take(rd.u32()).decode()
    kv = {}
    for line in text.splitlines():
        if line:
            key, _, val = line.partition("=")
            kv[key] = val
    arrays = {}
    count = rd.u32()
    for _ in range(count):
        name = rd.take(rd.u16()).decode()
        rank = rd.u8()
        shape = tuple(rd.u32() for _ in range(rank))
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        start = rd.off
        data = np.frombuffer(rd.take(4 * n_items), dtype="<f4")
        try:
            arrays[name] = data.reshape(shape).copy()
        except ValueError as exc:
            raise ValueError(f"{path}: bad record shape {shape} at byte "
                             f"{start}") from exc
    if rd.off != len(blob):
        raise ValueError(f"{path}: {len(blob) - rd.off} trailing bytes at "
                         f"byte {rd.off}")
    return kv, arrays


def load_model(path):
    """Rebuild a model from a checkpoint: (ModelConfig, ParameterStore)."""
    kv, arrays = load_checkpoint(path)
    config = config_from_dict({k: v for k, v in kv.items()
                               if not k.startswith("extra.")})
    store = build_model(config, RngStream(0, stream=1))
    for name, tensor in store.params.items():
        key = f"param:{name}"
        if key not in arrays:
            raise ValueError(f"{path}: checkpoint missing parameter {name}")
        if arrays[key].shape != tensor.data.shape:
            raise ValueError(f"{path}: parameter {name} has shape "
                             f"{arrays[key].shape}, model wants "
                             f"{tensor.data.shape}")
        tensor.data = arrays[key].astype(tensor.data.dtype)
    for name in store.buffers:
        key = f"buffer:{name}"
        if key not in arrays:
            raise ValueError(f"{path}: checkpoint missing buffer {name}")
        store.buffers[name] = arrays[key].astype(store.buffers[name].dtype)
    return config, store


# ---------------------------------------------------------------------------
# embeddings


def write_embeddings(path, patch_ids, bag_ids, iso: np.ndarray,
                     ori: np.ndarray) -> None:
    """Comma-separated embedding table: id, bag, iso values, Q row-major.

    Column count is 2 + M + M'*N.
    """
    n, m = iso.shape
    _, m_ori, n_bins = ori.shape
    header = ["id", "bag"] + [f"iso_{i}" for i in range(m)] \
        + [f"ori_{i}_{j}" for i in range(m_ori) for j in range(n_bins)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        flat_ori = ori.reshape(n, -1)
        for row in range(n):
            writer.writerow([int(patch_ids[row]), int(bag_ids[row])]
                            + [repr(float(v)) for v in iso[row]]
                            + [repr(float(v)) for v in flat_ori[row]])


def write_aggregates(path, bag_ids, labels, splits, iso: np.ndarray,
                     ori: np.ndarray) -> None:
    """Bag-level table: bag, label, split, mean iso values, mean Q rows."""
    n, m = iso.shape
    _, m_ori, n_bins = ori.shape
    header = ["bag", "label", "split"] + [f"iso_{i}" for i in range(m)] \
        + [f"ori_{i}_{j}" for i in range(m_ori) for j in range(n_bins)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        flat = ori.reshape(n, -1)
        for row in range(n):
            writer.writerow([int(bag_ids[row]), int(labels[row]),
                             splits[row]]
                            + [repr(float(v)) for v in iso[row]]
                            + [repr(float(v)) for v in flat[row]])


def read_aggregates(path):
    """Inverse of write_aggregates: (bags, labels, splits, iso, ori)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    iso_cols = [i for i, h in enumerate(header) if h.startswith("iso_")]
    ori_cols = [i for i, h in enumerate(header) if h.startswith("ori_")]
    if header[:3] != ["bag", "label", "split"] or not iso_cols \
            or not ori_cols:
        raise ValueError(f"unexpected aggregates header in {path}")
    m_ori = 1 + max(int(header[i].split("_")[1]) for i in ori_cols)
    n_bins = len(ori_cols) // m_ori
    bags = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    splits = np.array([r[2] for r in rows])
    iso = np.array([[float(r[i]) for i in iso_cols] for r in rows])
    ori = np.array([[float(r[i]) for i in ori_cols] for r in rows])
    return bags, labels, splits, iso, ori.reshape(len(rows), m_ori, n_bins)


def parse_kv_file(path) -> dict:
    """Flat key=value text; blank lines and '#' comments are skipped."""
    kv = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, "
                             f"got {line!r}")
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    return kv


def dataclass_from_kv(cls, kv: dict):
    """Build a config dataclass from key=value strings; unknown keys and
    unparsable values are rejected."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, raw in kv.items():
        if key not in fields:
            raise ValueError(f"unknown {cls.__name__} key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            if raw not in ("true", "false"):
                raise ValueError(f"{key} must be true or false, got {raw!r}")
            kwargs[key] = raw == "true"
        elif isinstance(current, tuple):
            elem = type(current[0]) if current else float
            kwargs[key] = tuple(elem(p) for p in raw.split(",") if p)
        elif isinstance(current, int):
            kwargs[key] = int(raw)
        elif isinstance(current, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def read_embeddings(path):
    """Inverse of write_embeddings: (ids, bags, iso (n,M), ori (n,M',N))."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    iso_cols = [i for i, h in enumerate(header) if h.startswith("iso_")]
    ori_cols = [i for i, h in enumerate(header) if h.startswith("ori_")]
    if header[:2] != ["id", "bag"] or not iso_cols or not ori_cols:
        raise ValueError(f"unexpected embeddings header in {path}")
    m_ori = 1 + max(int(header[i].split("_")[1]) for i in ori_cols)
    n_bins = len(ori_cols) // m_ori
    ids = np.array([int(r[0]) for r in rows])
    bags = np.array([int(r[1]) for r in rows])
    iso = np.array([[float(r[i]) for i in iso_cols] for r in rows])
    ori = np.array([[float(r[i]) for i in ori_cols] for r in rows])
    return ids, bags, iso, ori.reshape(len(rows), m_ori, n_bins)
