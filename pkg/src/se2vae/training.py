"""Objectives, optimizers, and the alternating training loop.

The VAE objective is the negated evidence lower bound with a Gaussian
likelihood of identity covariance: half the summed squared pixel error
plus weighted KL terms (split into isotropic and angular parts for the
disentangled variant), optionally augmented by the discriminator
feature-reconstruction loss. Encoder and decoder train with Adam, the
discriminator with SGD momentum on a balanced real/reconstruction
cross-entropy, and the two updates alternate within each step without
touching each other's parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import latent as L
from . import tensor as T
from .data import BagSampler, PatchDataset
from .models import (ModelConfig, ParameterStore, build_model, decode,
                     discriminate, encode)
from .rng import RngStream
from .tensor import Tensor, backward, no_grad, tape

METRICS_HEADER = ("step", "total", "recon", "kl_iso", "kl_ori", "feature",
                  "disc_accuracy")


@dataclass
class TrainConfig:
    beta: float = 1.0
    beta_iso: float = 1.0
    beta_ori: float = 1.0
    gamma: float = 0.01
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    disc_lr: float = 0.001
    disc_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 35
    max_steps: int = 5000
    val_interval: int = 100
    val_batches: int = 4
    patience: int = 10
    seed: int = 0
    update_discriminator: bool = True

    def __post_init__(self):
        for name in ("beta", "beta_iso", "beta_ori", "gamma", "lr", "disc_lr",
                     "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")


class OptimizerState:
    """Moment/velocity buffers keyed by parameter name."""

    def __init__(self, params):
        self.step = 0
        self.buffers = {name: {} for name, _ in params}

    def slot(self, name: str, key: str, like: np.ndarray) -> np.ndarray:
        buf = self.buffers[name].setdefault(key, np.zeros_like(like))
        if buf.shape != like.shape:
            raise ValueError(f"buffer shape mismatch for {name}")
        return buf


def adam_step(params, state: OptimizerState, config: TrainConfig) -> None:
    """Bias-corrected Adam update in place; skips gradient-free params."""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.slot(name, "m", p.data)
        v = state.slot(name, "v", p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= config.lr * (m / corr1) / (np.sqrt(v / corr2)
                                             + config.adam_eps)


def sgd_momentum_step(params, state: OptimizerState,
                      config: TrainConfig) -> None:
    """Heavy-ball SGD update in place."""
    state.step += 1
    for name, p in params:
        if p.grad is None:
            continue
        vel = state.slot(name, "vel", p.data)
        vel *= config.disc_momentum
        vel += p.grad
        p.data -= config.disc_lr * vel


def apply_decoupled_weight_decay(params, lam: float, lr: float) -> None:
    """Shrink convolution kernels directly: w <- w * (1 - lr * lam).

    Biases, batch norm parameters, and dense layers are left alone.
    """
    if lam == 0.0:
        return
    for name, p in params:
        if name.endswith(".kernel"):
            p.data *= 1.0 - lr * lam


def _recon_term(x: Tensor, xhat: Tensor) -> Tensor:
    d = xhat - x
    return 0.5 * T.tsum(d * d)


def vae_loss(x: Tensor, store: ParameterStore, mcfg: ModelConfig,
             tcfg: TrainConfig, rng=None, eps=None, mode: str = "train"):
    """Variant-dispatched negated ELBO.

    Returns (loss tensor, reconstruction tensor, term dict). `eps` freezes
    the latent noise: an array for Gaussian variants, an (eps_iso, eps_ori)
    pair for the disentangled one.
    """
    if mcfg.variant == "disentangled":
        iso, ori = encode(x, store, mcfg, mode)
        eps_iso, eps_ori = eps if eps is not None else (None, None)
        z = L.LatentSample(L.sample_iso(iso, rng, eps_iso),
                           L.sample_ori(ori, rng, eps_ori))
        xhat = decode(z, store, mcfg, mode)
        recon = _recon_term(x, xhat)
        kl_i = T.tsum(L.kl_iso(iso))
        kl_o = T.tsum(L.kl_ori(ori))
        loss = recon + tcfg.beta_iso * kl_i + tcfg.beta_ori * kl_o
        terms = {"recon": recon, "kl_iso": kl_i, "kl_ori": kl_o}
    elif mcfg.variant == "se2_grid":
        post = encode(x, store, mcfg, mode)
        z = L.sample_se2_grid(post, rng, eps)
        xhat = decode(z, store, mcfg, mode)
        recon = _recon_term(x, xhat)
        kl = T.tsum(L.kl_se2_grid(post))
        loss = recon + tcfg.beta * kl
        terms = {"recon": recon, "kl_iso": kl, "kl_ori": None}
    else:
        post = encode(x, store, mcfg, mode)
        z = L.sample_iso(post, rng, eps)
        xhat = decode(z, store, mcfg, mode)
        recon = _recon_term(x, xhat)
        kl = T.tsum(L.kl_iso(post))
        loss = recon + tcfg.beta * kl
        terms = {"recon": recon, "kl_iso": kl, "kl_ori": None}
    return loss, xhat, terms


def elbo_baseline_loss(x, store, mcfg, tcfg, rng=None, eps=None,
                       mode="train"):
    if mcfg.variant == "disentangled":
        raise ValueError("elbo_baseline_loss expects a Gaussian-latent variant")
    return vae_loss(x, store, mcfg, tcfg, rng, eps, mode)


def elbo_disentangled_loss(x, store, mcfg, tcfg, rng=None, eps=None,
                           mode="train"):
    if mcfg.variant != "disentangled":
        raise ValueError("elbo_disentangled_loss expects the disentangled "
                         "variant")
    return vae_loss(x, store, mcfg, tcfg, rng, eps, mode)


def feature_recon_loss(x: Tensor, xhat: Tensor, store: ParameterStore,
                       mcfg: ModelConfig, mode: str = "train") -> Tensor:
    """Half the summed squared distance between discriminator features of
    the originals and of the reconstructions.

    Both halves run through the discriminator as one batch so batch norm
    statistics are shared between real and reconstructed images.
    """
    if not mcfg.disc_feature_blocks:
        raise ValueError("discriminator has no feature layers configured")
    b = x.shape[0]
    both = discriminate(T.concat([x, xhat], axis=0), store, mcfg, mode)
    total = None
    for f in both.features:
        real = T.take(f, np.arange(b), axis=0)
        fake = T.take(f, np.arange(b, 2 * b), axis=0)
        d = real - fake
        term = 0.5 * T.tsum(d * d)
        total = term if total is None else total + term
    return total


def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable mean binary cross-entropy from raw logits."""
    t = Tensor(targets, dtype=logits.dtype)
    # max(z, 0) - z*t + log(1 + exp(-|z|))
    zabs = T.absolute(logits)
    return T.tmean(T.relu(logits) - logits * t + T.log(1.0 + T.exp(-zabs)))


@dataclass
class TrainResult:
    store: ParameterStore
    metrics: list
    best_step: int
    best_val: float
    stopped_step: int
    train_losses: list = field(default_factory=list)


def format_metrics(rows) -> str:
    lines = ["\t".join(METRICS_HEADER)]
    for r in rows:
        lines.append("\t".join(
            str(r["step"]) if k == "step" else f"{r[k]:.6f}"
            for k in METRICS_HEADER))
    return "\n".join(lines) + "\n"


def _check_finite(terms: dict, step: int) -> None:
    for name, t in terms.items():
        if t is None:
            continue
        val = t.data if isinstance(t, Tensor) else t
        if not np.all(np.isfinite(val)):
            raise RuntimeError(
                f"non-finite value in term {name!r} at step {step}")


def _frozen_eval_eps(mcfg: ModelConfig, batch: int):
    """Noise pinned at the distribution medians for validation passes."""
    if mcfg.variant == "disentangled":
        return (np.zeros((batch, mcfg.latent_iso)),
                np.full((batch, mcfg.latent_ori), 0.5))
    if mcfg.variant == "se2_grid":
        return np.zeros((batch, mcfg.n_orientations, mcfg.latent_iso))
    return np.zeros((batch, mcfg.latent_baseline))


def _validate(dataset_val, store, mcfg, tcfg):
    """Deterministic eval-mode pass over capped validation batches."""
    n = len(dataset_val)
    bs = min(tcfg.batch_size, n)
    starts = range(0, min(n, bs * tcfg.val_batches), bs)
    sums = {"total": 0.0, "recon": 0.0, "kl_iso": 0.0, "kl_ori": 0.0,
            "feature": 0.0}
    correct, seen, items = 0, 0, 0
    with no_grad():
        for s in starts:
            xb = Tensor(dataset_val.images[s:s + bs])
            b = xb.shape[0]
            loss, xhat, terms = vae_loss(xb, store, mcfg, tcfg,
                                         eps=_frozen_eval_eps(mcfg, b),
                                         mode="eval")
            feat = feature_recon_loss(xb, xhat, store, mcfg, mode="eval")
            sums["recon"] += terms["recon"].item()
            sums["kl_iso"] += terms["kl_iso"].item()
            if terms["kl_ori"] is not None:
                sums["kl_ori"] += terms["kl_ori"].item()
            sums["feature"] += feat.item()
            sums["total"] += loss.item() + tcfg.gamma * feat.item()
            out = discriminate(T.concat([xb, xhat], axis=0), store, mcfg,
                               "eval")
            preds = out.logit.data > 0
            correct += int(preds[:b].sum()) + int((~preds[b:]).sum())
            seen += 2 * b
            items += b
    for k in sums:
        sums[k] /= max(items, 1)
    sums["disc_accuracy"] = correct / max(seen, 1)
    return sums


def train(dataset: PatchDataset, mcfg: ModelConfig,
          tcfg: TrainConfig) -> TrainResult:
    """Alternating VAE/discriminator training with validation stopping."""
    train_set = dataset.subset("train")
    val_set = dataset.subset("val")

    rng_init = RngStream(tcfg.seed, stream=1)
    rng_batch = RngStream(tcfg.seed, stream=2)
    rng_noise = RngStream(tcfg.seed, stream=3)
    rng_disc = RngStream(tcfg.seed, stream=4)

    store = build_model(mcfg, rng_init)
    enc_dec = store.group("encoder") + store.group("decoder")
    disc = store.group("discriminator")
    adam_state = OptimizerState(enc_dec)
    sgd_state = OptimizerState(disc)
    sampler = BagSampler(train_set.bags, tcfg.batch_size, rng_batch)

    metrics, train_losses = [], []
    best_val, best_step, bad = np.inf, 0, 0
    best_params, best_buffers = None, None
    stopped = 0

    for step in range(1, tcfg.max_steps + 1):
        idx = sampler.next_batch()
        xb = Tensor(train_set.images[idx])

        # (1) encoder + decoder update
        store.zero_grad()
        with tape():
            loss, xhat, terms = vae_loss(xb, store, mcfg, tcfg,
                                         rng=rng_noise, mode="train")
            if tcfg.gamma > 0:
                feat = feature_recon_loss(xb, xhat, store, mcfg, "train")
                loss = loss + tcfg.gamma * feat
                terms = dict(terms, feature=feat)
            backward(loss)
        _check_finite(dict(terms, total=loss), step)
        train_losses.append(loss.item() / xb.shape[0])
        adam_step(enc_dec, adam_state, tcfg)
        apply_decoupled_weight_decay(enc_dec, tcfg.weight_decay, tcfg.lr)

        # (2) discriminator update on a balanced real/reconstruction batch,
        # with reconstructions regenerated under the alternation's own noise
        if tcfg.update_discriminator:
            with no_grad():
                _, xhat_d, _ = vae_loss(xb, store, mcfg, tcfg, rng=rng_disc,
                                        mode="train")
            store.zero_grad()
            with tape():
                both = discriminate(T.concat([xb, xhat_d.detach()], axis=0),
                                    store, mcfg, "train")
                targets = np.concatenate([np.ones(xb.shape[0]),
                                          np.zeros(xb.shape[0])])
                dloss = _bce_with_logits(both.logit, targets)
                backward(dloss)
            _check_finite({"disc_loss": dloss}, step)
            sgd_momentum_step(disc, sgd_state, tcfg)
            apply_decoupled_weight_decay(disc, tcfg.weight_decay, tcfg.disc_lr)

        # (3) validation, checkpoint selection, patience
        if step % tcfg.val_interval == 0 or step == tcfg.max_steps:
            row = _validate(val_set, store, mcfg, tcfg)
            row["step"] = step
            metrics.append(row)
            stopped = step
            if row["total"] < best_val - 1e-9:
                best_val, best_step, bad = row["total"], step, 0
                best_params = {n: p.data.copy() for n, p in store.params.items()}
                best_buffers = {n: b.copy() for n, b in store.buffers.items()}
            else:
                bad += 1
                if bad >= tcfg.patience:
                    break
        stopped = step

    if best_params is not None:
        for n, p in store.params.items():
            p.data = best_params[n]
        for n in store.buffers:
            store.buffers[n][...] = best_buffers[n]
    return TrainResult(store, metrics, best_step, best_val, stopped,
                       train_losses)
