"""Encoder, decoder, and discriminator assembly for the three variants.

Variants:
  baseline      - plain CNN VAE with a single Gaussian latent block.
  se2_grid      - group-equivariant VAE whose latent is a Gaussian over the
                  full orientation-by-channel grid.
  disentangled  - group-equivariant VAE split into a rotation-invariant
                  Gaussian block and a rotation-equivariant angular block.

Encoders are four blocks of (conv, batch norm, leaky ReLU, max pool)
followed by a valid convolution that collapses the remaining spatial
extent to 1x1 and the variant's posterior heads. Decoders mirror the
encoder with strided transposed convolutions; group-equivariant decoders
end with a mean projection over the orientation axis and a 1x1
convolution back to image channels. The transposed kernels use size 4
when the target extent is even and 3 when it is odd (stride 2, padding
1), which reverses the pooling chain exactly and keeps every stage
symmetric under quarter-turn rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import latent as L
from . import se2
from . import tensor as T
from .tensor import Tensor

VARIANTS = ("baseline", "se2_grid", "disentangled")

LOG_SIGMA_CLAMP = 7.0


@dataclass
class ModelConfig:
    variant: str = "disentangled"
    n_orientations: int = 8
    latent_iso: int = 32
    latent_ori: int = 32
    latent_baseline: int = 64
    channels: tuple = (8, 16, 24, 32)
    baseline_channels: tuple = (23, 45, 68, 90)
    patch_size: int = 68
    image_channels: int = 1
    kernel_size: int = 5
    leaky_slope: float = 0.1
    intermediate_projection: bool = False
    smoothing_width: float = 1.0
    disc_channels: tuple = (8, 16, 24, 32)
    disc_feature_blocks: tuple = (2, 3)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_orientations % 4 != 0:
            raise ValueError("n_orientations must be divisible by 4")
        if len(self.channels) != 4 or len(self.baseline_channels) != 4:
            raise ValueError("channel schedules must list four blocks")
        sizes = encoder_sizes(self.patch_size)
        if min(sizes) < 1 or sizes[-2] < 2:
            raise ValueError(
                f"patch_size {self.patch_size} too small for four poolings")

    @classmethod
    def desk(cls, variant: str = "disentangled", **kw) -> "ModelConfig":
        """Small configuration sized for quick synthetic benchmarks."""
        return cls(variant=variant, patch_size=36, channels=(8, 16, 24, 32),
                   baseline_channels=(23, 45, 68, 90), **kw)

    @classmethod
    def paper_scale(cls, variant: str = "disentangled", **kw) -> "ModelConfig":
        """Full-size configuration: 68-pixel patches."""
        return cls(variant=variant, patch_size=68, channels=(16, 32, 48, 64),
                   baseline_channels=(45, 90, 136, 181), **kw)

    @property
    def is_equivariant(self) -> bool:
        return self.variant != "baseline"


@dataclass
class DiscriminatorFeatures:
    logit: Tensor
    features: list


class ParameterStore:
    """Named parameters partitioned into encoder/decoder/discriminator
    groups, plus non-trainable buffers (batch norm running statistics)."""

    GROUPS = ("encoder", "decoder", "discriminator")

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: Tensor, group: str) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in self.GROUPS:
            raise ValueError(f"unknown group {group!r}")
        value.requires_grad = True
        self.params[name] = value
        self.groups[name] = group
        return value

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = value
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def group(self, group: str) -> list:
        return [(n, p) for n, p in sorted(self.params.items())
                if self.groups[n] == group]

    def count(self, group: str | None = None) -> int:
        return sum(p.size for n, p in sorted(self.params.items())
                   if group is None or self.groups[n] == group)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def encoder_sizes(patch_size: int) -> list:
    """Spatial extents after each of the four pooling stages."""
    sizes = [patch_size]
    for _ in range(4):
        h = sizes[-1]
        sizes.append(h // 2 if h % 2 == 0 else (h + 1) // 2)
    return sizes


def _upsample_geometry(target: int):
    """(kernel, stride, padding) of the transposed conv producing `target`."""
    return (4, 2, 1) if target % 2 == 0 else (3, 2, 1)


def _glorot(rng, shape, fan_in, fan_out, dtype) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(shape) * (2 * bound) - bound, dtype=dtype)


class _Builder:
    def __init__(self, store: ParameterStore, rng, group: str, dtype):
        self.store, self.rng, self.group, self.dtype = store, rng, group, dtype

    def conv(self, name, c_out, c_in, k):
        fan = c_in * k * k, c_out * k * k
        self.store.add(name + ".kernel",
                       _glorot(self.rng, (c_out, c_in, k, k), *fan, self.dtype),
                       self.group)

    def se2_kernel(self, name, c_out, c_in, n, k):
        fan = c_in * n * k * k, c_out * n * k * k
        self.store.add(name + ".kernel",
                       _glorot(self.rng, (c_out, c_in, n, k, k), *fan, self.dtype),
                       self.group)

    def lift(self, name, c_out, c_in, n, k):
        fan = c_in * k * k, c_out * n * k * k
        self.store.add(name + ".kernel",
                       _glorot(self.rng, (c_out, c_in, k, k), *fan, self.dtype),
                       self.group)

    def bias(self, name, c_out):
        self.store.add(name + ".bias",
                       Tensor(np.zeros(c_out), dtype=self.dtype), self.group)

    def bn(self, name, c):
        self.store.add(name + ".gamma", Tensor(np.ones(c), dtype=self.dtype),
                       self.group)
        self.store.add(name + ".beta", Tensor(np.zeros(c), dtype=self.dtype),
                       self.group)
        self.store.add_buffer(name + ".mean", np.zeros(c, dtype=self.dtype))
        self.store.add_buffer(name + ".var", np.ones(c, dtype=self.dtype))

    def dense(self, name, n_in, n_out):
        self.store.add(name + ".weight",
                       _glorot(self.rng, (n_in, n_out), n_in, n_out, self.dtype),
                       self.group)
        self.bias(name, n_out)


def build_model(config: ModelConfig, rng, dtype=None) -> ParameterStore:
    """Allocate and initialize every parameter of the configured model."""
    dtype = dtype or T.current_dtype()
    store = ParameterStore()
    k, n = config.kernel_size, config.n_orientations
    collapse_k = encoder_sizes(config.patch_size)[-1]

    if config.variant == "baseline":
        ch = config.baseline_channels
        z = config.latent_baseline
        enc = _Builder(store, rng, "encoder", dtype)
        c_prev = config.image_channels
        for i, c in enumerate(ch, start=1):
            enc.conv(f"enc.block{i}", c, c_prev, k)
            enc.bn(f"enc.block{i}", c)
            c_prev = c
        enc.conv("enc.collapse", ch[3], ch[3], collapse_k)
        enc.bn("enc.collapse", ch[3])
        enc.dense("enc.head_mu", ch[3], z)
        enc.dense("enc.head_logsig", ch[3], z)

        dec = _Builder(store, rng, "decoder", dtype)
        dec.dense("dec.input", z, ch[3])
        dec.bn("dec.input", ch[3])
        dec.conv("dec.collapse", ch[3], ch[3], collapse_k)
        dec.bn("dec.collapse", ch[3])
        up_ch = [ch[3], ch[2], ch[1], ch[0], ch[0]]
        sizes = encoder_sizes(config.patch_size)[:-1][::-1]
        for i, target in enumerate(sizes, start=1):
            kk, _, _ = _upsample_geometry(target)
            dec.conv(f"dec.block{i}", up_ch[i - 1], up_ch[i], kk)
            dec.bn(f"dec.block{i}", up_ch[i])
        dec.conv("dec.out", config.image_channels, ch[0], 1)
        dec.bias("dec.out", config.image_channels)
    else:
        ch = config.channels
        enc = _Builder(store, rng, "encoder", dtype)
        enc.lift("enc.block1", ch[0], config.image_channels, n, k)
        enc.bn("enc.block1", ch[0])
        for i in range(2, 5):
            if config.intermediate_projection:
                enc.lift(f"enc.block{i}", ch[i - 1], ch[i - 2], n, k)
            else:
                enc.se2_kernel(f"enc.block{i}", ch[i - 1], ch[i - 2], n, k)
            enc.bn(f"enc.block{i}", ch[i - 1])
        enc.se2_kernel("enc.collapse", ch[3], ch[3], n, collapse_k)
        enc.bn("enc.collapse", ch[3])
        if config.variant == "disentangled":
            enc.se2_kernel("enc.head_mu", config.latent_iso, ch[3], n, 1)
            enc.bias("enc.head_mu", config.latent_iso)
            enc.se2_kernel("enc.head_logsig", config.latent_iso, ch[3], n, 1)
            enc.bias("enc.head_logsig", config.latent_iso)
            enc.se2_kernel("enc.head_ori", config.latent_ori, ch[3], n, 1)
            enc.bias("enc.head_ori", config.latent_ori)
            dec_in = config.latent_iso + config.latent_ori
        else:
            enc.se2_kernel("enc.head_mu", config.latent_iso, ch[3], n, 1)
            enc.bias("enc.head_mu", config.latent_iso)
            enc.se2_kernel("enc.head_logsig", config.latent_iso, ch[3], n, 1)
            enc.bias("enc.head_logsig", config.latent_iso)
            dec_in = config.latent_iso

        dec = _Builder(store, rng, "decoder", dtype)
        dec.se2_kernel("dec.input", ch[3], dec_in, n, 1)
        dec.bn("dec.input", ch[3])
        dec.se2_kernel("dec.collapse", ch[3], ch[3], n, collapse_k)
        dec.bn("dec.collapse", ch[3])
        up_ch = [ch[3], ch[2], ch[1], ch[0], ch[0]]
        sizes = encoder_sizes(config.patch_size)[:-1][::-1]
        for i, target in enumerate(sizes, start=1):
            kk, _, _ = _upsample_geometry(target)
            if config.intermediate_projection:
                dec.lift(f"dec.block{i}", up_ch[i - 1], up_ch[i], n, kk)
            else:
                dec.se2_kernel(f"dec.block{i}", up_ch[i - 1], up_ch[i], n, kk)
            dec.bn(f"dec.block{i}", up_ch[i])
        dec.conv("dec.out", config.image_channels, ch[0], 1)
        dec.bias("dec.out", config.image_channels)

    disc = _Builder(store, rng, "discriminator", dtype)
    c_prev = config.image_channels
    for i, c in enumerate(config.disc_channels, start=1):
        disc.conv(f"disc.block{i}", c, c_prev, k)
        disc.bn(f"disc.block{i}", c)
        c_prev = c
    disc.dense("disc.dense", config.disc_channels[3] * collapse_k ** 2, 1)
    return store


def parity_report(config: ModelConfig) -> dict:
    """Parameter counts of the baseline and disentangled builds of a config."""

    class _CountStream:
        def uniform(self, shape=(), dtype=np.float64):
            return np.zeros(shape)

    counts = {}
    for variant in ("baseline", "disentangled"):
        store = build_model(replace(config, variant=variant), _CountStream())
        counts[variant] = (store.count("encoder") + store.count("decoder"))
    lo, hi = min(counts.values()), max(counts.values())
    counts["relative_gap"] = (hi - lo) / hi
    return counts


def _bn2d(x, store, name, slope, mode):
    h = T.batch_norm(x, store[name + ".gamma"], store[name + ".beta"],
                     axes=(0, 2, 3), running_mean=store.buffers[name + ".mean"],
                     running_var=store.buffers[name + ".var"],
                     train=(mode == "train"), channel_axis=1)
    return T.leaky_relu(h, slope)


def _obn(x, store, name, slope, mode):
    h = se2.orientation_batch_norm(
        x, store[name + ".gamma"], store[name + ".beta"],
        store.buffers[name + ".mean"], store.buffers[name + ".var"],
        train=(mode == "train"))
    return T.leaky_relu(h, slope)


def _add_bias(x, bias, channel_axis=1):
    shape = [1] * x.ndim
    shape[channel_axis] = bias.shape[0]
    return x + T.reshape(bias, shape)


def _expand_orientation(x: Tensor, n: int) -> Tensor:
    """(B, C, H, W) -> (B, C, N, H, W) by repetition along a new axis."""
    b, c, h, w = x.shape
    return T.broadcast_to(T.reshape(x, (b, c, 1, h, w)), (b, c, n, h, w))


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _encoder_trunk(x, store, config, mode):
    """Shared four-block group-equivariant trunk plus spatial collapse.

    Returns a (B, C, N, 1, 1) orientation map.
    """
    k, n, slope = config.kernel_size, config.n_orientations, config.leaky_slope
    pad = k // 2
    h = se2.lifting_conv(x, store["enc.block1.kernel"], n, padding=pad)
    h = se2.spatial_max_pool(_obn(h, store, "enc.block1", slope, mode))
    for i in range(2, 5):
        if config.intermediate_projection:
            flat = se2.orientation_project(h, "max")
            h = se2.lifting_conv(flat, store[f"enc.block{i}.kernel"], n,
                                 padding=pad)
        else:
            h = se2.se2_conv(h, store[f"enc.block{i}.kernel"], padding=pad)
        h = se2.spatial_max_pool(_obn(h, store, f"enc.block{i}", slope, mode))
    h = se2.se2_conv(h, store["enc.collapse.kernel"])
    return _obn(h, store, "enc.collapse", slope, mode)


def encode(x: Tensor, store: ParameterStore, config: ModelConfig,
           mode: str = "train"):
    """Map an image batch to the variant's posterior parameters."""
    _check_mode(mode)
    if x.shape[-1] != config.patch_size or x.shape[-2] != config.patch_size:
        raise ValueError(f"input spatial size {x.shape[-2:]} does not match "
                         f"patch_size {config.patch_size}")

    if config.variant == "baseline":
        k, slope = config.kernel_size, config.leaky_slope
        h = x
        for i in range(1, 5):
            h = T.conv2d(h, store[f"enc.block{i}.kernel"], padding=k // 2)
            h = T.max_pool2d(_bn2d(h, store, f"enc.block{i}", slope, mode))
        h = T.conv2d(h, store["enc.collapse.kernel"])
        h = _bn2d(h, store, "enc.collapse", slope, mode)
        flat = T.reshape(h, (h.shape[0], h.shape[1]))
        mu = _add_bias(T.matmul(flat, store["enc.head_mu.weight"]),
                       store["enc.head_mu.bias"], channel_axis=1)
        log_sig = _add_bias(T.matmul(flat, store["enc.head_logsig.weight"]),
                            store["enc.head_logsig.bias"], channel_axis=1)
        sigma = T.exp(T.clip(log_sig, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP))
        return L.IsoPosterior(mu, sigma)

    h = _encoder_trunk(x, store, config, mode)

    def head(name):
        out = se2.se2_conv(h, store[name + ".kernel"])
        out = _add_bias(out, store[name + ".bias"], channel_axis=1)
        # (B, C, N, 1, 1) -> (B, C, N)
        return T.reshape(out, out.shape[:3])

    mu_grid = head("enc.head_mu")
    logsig_grid = T.clip(head("enc.head_logsig"),
                         -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    if config.variant == "se2_grid":
        # (B, M, N) -> (B, N, M)
        return L.Se2GridPosterior(T.transpose(mu_grid, (0, 2, 1)),
                                  T.exp(T.transpose(logsig_grid, (0, 2, 1))))
    mu = T.tmean(mu_grid, axis=2)
    sigma = T.exp(T.tmean(logsig_grid, axis=2))
    q = T.softmax_axis(head("enc.head_ori"), axis=2)
    return L.IsoPosterior(mu, sigma), L.OriPosterior(q)


def _decoder_trunk(h, store, config, mode):
    """(B, C, N, 1, 1) orientation map -> reconstructed image mean."""
    n, slope = config.n_orientations, config.leaky_slope
    h = se2.se2_conv(h, store["dec.input.kernel"])
    h = _obn(h, store, "dec.input", slope, mode)
    h = se2.se2_transposed_conv(h, store["dec.collapse.kernel"])
    h = _obn(h, store, "dec.collapse", slope, mode)
    sizes = encoder_sizes(config.patch_size)[:-1][::-1]
    for i, target in enumerate(sizes, start=1):
        _, s, p = _upsample_geometry(target)
        if config.intermediate_projection:
            flat = se2.lifting_transposed(h, store[f"dec.block{i}.kernel"], n,
                                          stride=s, padding=p)
            flat = _bn2d(flat, store, f"dec.block{i}", slope, mode)
            # mirror of the encoder's projection: spread the planar map
            # back along the orientation axis (trivially equivariant)
            h = _expand_orientation(flat, n) if i < len(sizes) else flat
        else:
            h = se2.se2_transposed_conv(h, store[f"dec.block{i}.kernel"],
                                        stride=s, padding=p)
            h = _obn(h, store, f"dec.block{i}", slope, mode)
    if not config.intermediate_projection:
        h = se2.orientation_project(h, "mean")
    out = T.conv2d(h, store["dec.out.kernel"])
    return _add_bias(out, store["dec.out.bias"], channel_axis=1)


def decode(sample, store: ParameterStore, config: ModelConfig,
           mode: str = "train") -> Tensor:
    """Map a latent draw back to the reconstructed image mean."""
    _check_mode(mode)
    n = config.n_orientations

    if config.variant == "baseline":
        z = sample
        if z.shape[-1] != config.latent_baseline:
            raise ValueError(f"latent size {z.shape[-1]} does not match "
                             f"config ({config.latent_baseline})")
        slope = config.leaky_slope
        h = _add_bias(T.matmul(z, store["dec.input.weight"]),
                      store["dec.input.bias"], channel_axis=1)
        h = T.reshape(h, h.shape + (1, 1))
        h = _bn2d(h, store, "dec.input", slope, mode)
        h = T.transposed_conv2d(h, store["dec.collapse.kernel"])
        h = _bn2d(h, store, "dec.collapse", slope, mode)
        sizes = encoder_sizes(config.patch_size)[:-1][::-1]
        for i, target in enumerate(sizes, start=1):
            kk, s, p = _upsample_geometry(target)
            h = T.transposed_conv2d(h, store[f"dec.block{i}.kernel"],
                                    stride=s, padding=p)
            h = _bn2d(h, store, f"dec.block{i}", slope, mode)
        out = T.conv2d(h, store["dec.out.kernel"])
        return _add_bias(out, store["dec.out.bias"], channel_axis=1)

    if config.variant == "se2_grid":
        z = sample  # (B, N, M)
        if z.shape[-1] != config.latent_iso or z.shape[-2] != n:
            raise ValueError(f"grid latent shape {z.shape[-2:]} does not "
                             f"match config ({n}, {config.latent_iso})")
        grid = T.transpose(z, (0, 2, 1))
    else:
        if sample.z_iso.shape[-1] != config.latent_iso \
                or sample.z_ori.shape[-1] != config.latent_ori:
            raise ValueError("latent sample sizes do not match config")
        iso = L.expand_iso(sample.z_iso, n)
        ori = L.encode_angle_soft(sample.z_ori, n, config.smoothing_width)
        grid = T.concat([iso, ori], axis=1)
    h = T.reshape(grid, grid.shape + (1, 1))
    return _decoder_trunk(h, store, config, mode)


def discriminate(x: Tensor, store: ParameterStore, config: ModelConfig,
                 mode: str = "train") -> DiscriminatorFeatures:
    """Run the 4-block CNN discriminator, keeping the configured features."""
    _check_mode(mode)
    k, slope = config.kernel_size, config.leaky_slope
    h, feats = x, []
    for i in range(1, 5):
        h = T.conv2d(h, store[f"disc.block{i}.kernel"], padding=k // 2)
        h = T.max_pool2d(_bn2d(h, store, f"disc.block{i}", slope, mode))
        if i in config.disc_feature_blocks:
            feats.append(h)
    flat = T.reshape(h, (h.shape[0], -1))
    logit = _add_bias(T.matmul(flat, store["disc.dense.weight"]),
                      store["disc.dense.bias"], channel_axis=1)
    return DiscriminatorFeatures(T.reshape(logit, (logit.shape[0],)), feats)
