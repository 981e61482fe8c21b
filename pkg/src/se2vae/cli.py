"""Command-line interface.

Subcommands: generate, train, embed, aggregate, eval, traverse, check.
Exit codes: 0 success, 1 validation failure (bad files, bad config values,
failed checks), 2 usage error (unknown flags or subcommands).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import latent as L
from . import models as M
from . import storage
from .data import PatchDataset
from .evaluation import (ProbeConfig, fit_cyclic_logreg, fit_logreg,
                         format_eval_report, mauc, resample_eval)
from .gradcheck import grad_check
from .models import ModelConfig, build_model
from .rng import RngStream
from .synthetic import SyntheticConfig, generate_dataset
from .tensor import Tensor, default_dtype, no_grad
from .training import TrainConfig, format_metrics, train, vae_loss
from .traversal import traverse

REPRESENTATIONS = ("iso", "ori", "baseline", "combined", "factors")


# ---------------------------------------------------------------------------
# shared pipeline pieces


def compute_embeddings(dataset: PatchDataset, store, mcfg: ModelConfig,
                       batch: int = 64):
    """Posterior parameters for every patch, eval mode, batched.

    Returns (iso (n, M), ori (n, M', N)); non-disentangled variants get a
    flattened mean in the iso block and a single all-zero ori row.
    """
    n = len(dataset)
    iso_rows, ori_rows = [], []
    with no_grad():
        for s in range(0, n, batch):
            xb = Tensor(dataset.images[s:s + batch])
            post = M.encode(xb, store, mcfg, mode="eval")
            if mcfg.variant == "disentangled":
                iso_post, ori_post = post
                iso_rows.append(iso_post.mu.data.copy())
                ori_rows.append(ori_post.Q.data.copy())
            else:
                mu = post.mu.data.reshape(xb.shape[0], -1)
                iso_rows.append(mu.copy())
                ori_rows.append(np.zeros((xb.shape[0], 1, 1)))
    return np.concatenate(iso_rows), np.concatenate(ori_rows)


def _bag_table(dataset: PatchDataset):
    """Per-bag (label, split) lookup; both are bag-constant by contract."""
    out = {}
    for b in np.unique(dataset.bags):
        mask = dataset.bags == b
        out[int(b)] = (int(dataset.labels[mask][0]),
                       str(dataset.splits[mask][0]))
    return out


def _factor_stats(dataset: PatchDataset) -> dict:
    """Ground-truth baseline features: per-bag mean and std of the size
    factor (the synthetic stand-in for hand-crafted area statistics)."""
    stats = {}
    size = dataset.factors["size"]
    for b in np.unique(dataset.bags):
        vals = size[dataset.bags == b]
        stats[int(b)] = np.array([vals.mean(), vals.std()])
    return stats


def _representation_features(name, bags, iso, ori, factor_stats):
    if name in ("iso", "baseline"):
        return iso
    if name == "factors":
        return np.stack([factor_stats[int(b)] for b in bags])
    if name == "combined":
        extra = np.stack([factor_stats[int(b)] for b in bags])
        return np.concatenate([iso, extra], axis=1)
    return ori    # "ori": handled by the cyclic probe


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_generate(args) -> int:
    kv = storage.parse_kv_file(args.config) if args.config else {}
    for key, val in (("n_bags", args.bags), ("patches_per_bag", args.patches),
                     ("patch_size", args.patch_size), ("seed", args.seed)):
        if val is not None:
            kv[key] = str(val)
    if args.no_marker:
        kv["marker"] = "false"
    config = storage.dataclass_from_kv(SyntheticConfig, kv)
    dataset = generate_dataset(config)
    manifest = storage.write_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} patches across {config.n_bags} bags "
          f"to {manifest}")
    return 0


def _model_config(args, dataset) -> ModelConfig:
    preset = ModelConfig.desk if args.preset == "desk" \
        else ModelConfig.paper_scale
    kv = storage.config_to_dict(preset(variant=args.variant))
    if args.model_config:
        kv.update(storage.parse_kv_file(args.model_config))
    kv["variant"] = args.variant
    mcfg = storage.config_from_dict(kv)
    if dataset.images.shape[-1] != mcfg.patch_size:
        raise ValueError(
            f"dataset patches are {dataset.images.shape[-1]} px but the "
            f"model expects {mcfg.patch_size}")
    return mcfg


def _cmd_train(args) -> int:
    dataset = storage.load_dataset(args.data)
    mcfg = _model_config(args, dataset)
    kv = storage.parse_kv_file(args.config) if args.config else {}
    if args.max_steps is not None:
        kv["max_steps"] = str(args.max_steps)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    tcfg = storage.dataclass_from_kv(TrainConfig, kv)
    result = train(dataset, mcfg, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    storage.save_checkpoint(out, result.store, mcfg,
                            extra={"best_step": result.best_step,
                                   "stopped_step": result.stopped_step,
                                   "seed": tcfg.seed})
    metrics_path = out.with_suffix(".metrics.tsv")
    metrics_path.write_text(format_metrics(result.metrics))
    print(f"trained {mcfg.variant} for {result.stopped_step} steps; best "
          f"validation loss {result.best_val:.4f} at step "
          f"{result.best_step}")
    print(f"checkpoint: {out}\nmetrics: {metrics_path}")
    return 0


def _cmd_embed(args) -> int:
    mcfg, store = storage.load_model(args.checkpoint)
    dataset = storage.load_dataset(args.data,
                                   channels=mcfg.image_channels)
    if dataset.images.shape[-1] != mcfg.patch_size:
        raise ValueError(
            f"dataset patches are {dataset.images.shape[-1]} px but the "
            f"model expects {mcfg.patch_size}")
    iso, ori = compute_embeddings(dataset, store, mcfg)
    storage.write_embeddings(args.out, np.arange(len(dataset)),
                             dataset.bags, iso, ori)
    print(f"wrote {len(dataset)} embedding rows to {args.out}")
    return 0


def _cmd_aggregate(args) -> int:
    from .evaluation import BagRecord, aggregate_bag
    ids, bags, iso, ori = storage.read_embeddings(args.embeddings)
    dataset = storage.load_dataset(args.data)
    if len(ids) != len(dataset):
        raise ValueError(f"embeddings have {len(ids)} rows but the manifest "
                         f"lists {len(dataset)} patches")
    table = _bag_table(dataset)
    bag_ids = np.unique(bags)
    iso_rows, ori_rows, labels, splits = [], [], [], []
    for b in bag_ids:
        mask = bags == b
        agg = aggregate_bag(BagRecord(int(b), table[int(b)][0],
                                      table[int(b)][1], ids[mask],
                                      iso[mask], ori[mask]))
        iso_rows.append(agg.iso_mean)
        ori_rows.append(agg.ori_hist)
        labels.append(table[int(b)][0])
        splits.append(table[int(b)][1])
    storage.write_aggregates(args.out, bag_ids, labels, splits,
                             np.stack(iso_rows), np.stack(ori_rows))
    print(f"wrote {len(bag_ids)} bag aggregates to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    rep = args.representation
    if rep == "factors" or rep == "combined":
        if not args.data:
            raise ValueError(f"representation {rep!r} needs --data for the "
                             "ground-truth factors")
    if rep != "factors" and not args.aggregates:
        raise ValueError(f"representation {rep!r} needs --aggregates")

    if args.aggregates:
        bags, labels, splits, iso, ori = \
            storage.read_aggregates(args.aggregates)
    else:
        dataset = storage.load_dataset(args.data)
        table = _bag_table(dataset)
        bags = np.array(sorted(table))
        labels = np.array([table[int(b)][0] for b in bags])
        splits = np.array([table[int(b)][1] for b in bags])
        iso = np.zeros((len(bags), 1))
        ori = np.zeros((len(bags), 1, 1))
    factor_stats = None
    if rep in ("factors", "combined"):
        factor_stats = _factor_stats(storage.load_dataset(args.data))

    feats = _representation_features(rep, bags, iso, ori, factor_stats)
    tr = splits == "train"
    va = splits == "val"
    te = splits == "test"
    if not (tr.any() and va.any() and te.any()):
        raise ValueError("aggregates must cover train, val, and test bags")
    rng = RngStream(args.seed, stream=31)
    probe_cfg = ProbeConfig()

    def fit_eval(idx):
        x_tr = feats[tr][idx]
        y_tr = labels[tr][idx]
        if rep == "ori":
            model = fit_cyclic_logreg(x_tr, y_tr, probe_cfg,
                                      val_hists=feats[va],
                                      val_labels=labels[va])
        else:
            model = fit_logreg(x_tr, y_tr, probe_cfg,
                               val_features=feats[va],
                               val_labels=labels[va])
        mean, _ = mauc(model.scores(feats[te]), labels[te],
                       classes=model.classes)
        return mean

    mean, std, _ = resample_eval(fit_eval, int(tr.sum()),
                                 repeats=args.repeats, rng=rng)
    # per-class AUCs from a fit on the full (unresampled) training set
    if rep == "ori":
        model = fit_cyclic_logreg(feats[tr], labels[tr], probe_cfg,
                                  val_hists=feats[va], val_labels=labels[va])
    else:
        model = fit_logreg(feats[tr], labels[tr], probe_cfg,
                           val_features=feats[va], val_labels=labels[va])
    _, per_class = mauc(model.scores(feats[te]), labels[te],
                        classes=model.classes)
    report = format_eval_report([{"representation": rep, "task": args.task,
                                  "mean": mean, "std": std,
                                  "per_class": per_class}])
    sys.stdout.write(report)
    if args.out:
        Path(args.out).write_text(report)
    return 0


def _cmd_traverse(args) -> int:
    mcfg, store = storage.load_model(args.checkpoint)
    dataset = storage.load_dataset(args.data,
                                   channels=mcfg.image_channels)
    indices = [args.index] + ([args.index2] if args.index2 is not None
                              else [])
    for i in indices:
        if not 0 <= i < len(dataset):
            raise ValueError(f"patch index {i} out of range "
                             f"[0, {len(dataset)})")
    patches = dataset.images[indices]
    grid = traverse(args.mode, patches, store, mcfg, coord=args.coord,
                    steps=args.steps)
    storage.save_patch(args.out, grid)
    print(f"wrote {args.mode} traversal grid to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# property checks (the `check` subcommand)


def _check_config():
    return ModelConfig(variant="disentangled", n_orientations=4,
                       latent_iso=2, latent_ori=2, channels=(2, 2, 2, 2),
                       baseline_channels=(2, 2, 2, 2), patch_size=16,
                       kernel_size=3, disc_channels=(2, 2, 2, 2))


def run_checks(seed: int = 0):
    """Equivariance and gradient property suite on fresh random weights.

    Returns a list of (name, passed, detail) triples.
    """
    results = []

    def record(name, fn):
        try:
            detail = fn()
            results.append((name, True, detail or ""))
        except AssertionError as exc:
            results.append((name, False, str(exc)))

    with default_dtype(np.float64):
        mcfg = _check_config()
        store = build_model(mcfg, RngStream(seed, stream=1))
        rng = RngStream(seed + 1, stream=2)
        x = Tensor(rng.uniform((2, 1, 16, 16)))
        n = mcfg.n_orientations

        def enc_invariance():
            worst = 0.0
            with no_grad():
                iso, ori = M.encode(x, store, mcfg, mode="eval")
                for k in (1, 2, 3):
                    from .tensor import rotate_image
                    iso_r, ori_r = M.encode(rotate_image(x, k), store, mcfg,
                                            mode="eval")
                    worst = max(worst, np.abs(
                        iso_r.mu.data - iso.mu.data).max())
                    worst = max(worst, np.abs(
                        iso_r.sigma.data - iso.sigma.data).max())
                    want = np.roll(ori.Q.data, k * (n // 4), axis=-1)
                    worst = max(worst, np.abs(ori_r.Q.data - want).max())
            assert worst < 1e-4, f"max deviation {worst:.2e}"
            return f"max deviation {worst:.2e}"

        def dec_equivariance():
            from .tensor import rotate_image
            worst = 0.0
            with no_grad():
                z_iso = Tensor(rng.normal((2, mcfg.latent_iso)))
                base_ori = rng.uniform((2, mcfg.latent_ori)) * 2 * np.pi
                out = M.decode(L.LatentSample(z_iso, Tensor(base_ori)),
                               store, mcfg, mode="eval")
                for k in (1, 2, 3):
                    shifted = np.mod(base_ori + k * 2 * np.pi / n,
                                     2 * np.pi)
                    out_s = M.decode(L.LatentSample(z_iso, Tensor(shifted)),
                                     store, mcfg, mode="eval")
                    want = rotate_image(out, k)
                    worst = max(worst, np.abs(out_s.data
                                              - want.data).max())
            assert worst < 1e-4, f"max deviation {worst:.2e}"
            return f"max deviation {worst:.2e}"

        def sampler_equivariance():
            q = rng.uniform((8, 3, n)) + 0.05
            q /= q.sum(axis=-1, keepdims=True)
            eps = rng.uniform((8, 3)) * 0.98 + 0.01
            with no_grad():
                z = L.sample_ori(L.OriPosterior(Tensor(q)), eps=eps)
                for k in (1, 2, 3):
                    z_s = L.sample_ori(
                        L.OriPosterior(Tensor(np.roll(q, k, axis=-1))),
                        eps=eps)
                    want = np.mod(z.data + k * 2 * np.pi / n, 2 * np.pi)
                    worst = np.abs(np.mod(z_s.data - want + np.pi,
                                          2 * np.pi) - np.pi).max()
                    assert worst < 1e-9, f"shift {k}: deviation {worst:.2e}"
            return "exact under cyclic shifts"

        def objective_gradients():
            from .training import TrainConfig as TC
            tcfg = TC(batch_size=2, gamma=0.0)
            eps_iso = rng.normal((2, mcfg.latent_iso))
            eps_ori = rng.uniform((2, mcfg.latent_ori)) * 0.8 + 0.1
            # snap eps to the middle of its CDF segment: the sampler's bin
            # choice is piecewise constant in eps, and finite differences
            # across a bin boundary would measure the (intended) jump
            with no_grad():
                _, ori_post = M.encode(x, store, mcfg, mode="train")
                q = ori_post.Q.data
                start = np.argmax(q, axis=-1)
                fwd = (start[..., None] + np.arange(n)) % n
                rel = np.take_along_axis(q, fwd, axis=-1).cumsum(axis=-1)
                t = np.minimum((rel < eps_ori[..., None]).sum(axis=-1),
                               n - 1)
                hi = np.take_along_axis(rel, t[..., None], axis=-1)[..., 0]
                lo = hi - np.take_along_axis(
                    q, ((start + t) % n)[..., None], axis=-1)[..., 0]
                eps_ori = 0.5 * (lo + hi)
            params = [p for name, p in sorted(store.params.items())
                      if store.groups[name] != "discriminator"]

            def build():
                loss, _, _ = vae_loss(x, store, mcfg, tcfg,
                                      eps=(eps_iso, eps_ori))
                return loss

            err = grad_check(build, params, eps_fd=1e-5, floor=1e-3)
            assert err < 1e-5, f"max relative error {err:.2e}"
            return f"max relative error {err:.2e}"

        record("encoder invariance/equivariance (quarter turns)",
               enc_invariance)
        record("decoder equivariance (quarter turns)", dec_equivariance)
        record("angular sampler shift equivariance", sampler_equivariance)
        record("objective finite-difference gradients", objective_gradients)
    return results


def _cmd_check(args) -> int:
    results = run_checks(args.seed)
    failed = 0
    for name, ok, detail in results:
        tag = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"{tag} {name}{suffix}")
        failed += 0 if ok else 1
    return 0 if failed == 0 else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="se2vae",
        description="Orientation-disentangled VAE toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value synthetic config file")
    p.add_argument("--bags", type=int)
    p.add_argument("--patches", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-marker", action="store_true")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--variant", required=True,
                   choices=("baseline", "se2_grid", "disentangled"))
    p.add_argument("--data", required=True, help="manifest.csv path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--model-config", help="key=value model config file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="write per-patch posterior embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("aggregate", help="mean-pool embeddings per bag")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("eval", help="bag-level probe evaluation")
    p.add_argument("--representation", required=True,
                   choices=REPRESENTATIONS)
    p.add_argument("--task", default="grade")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--aggregates", help="bag aggregates csv")
    p.add_argument("--data", help="manifest.csv (for factor features)")
    p.add_argument("--out", help="write the report here too")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("traverse", help="latent traversal image grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True,
                   choices=("ori-cycle", "iso-sweep", "interpolate"))
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--index2", type=int)
    p.add_argument("--coord", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=_cmd_traverse)

    p = sub.add_parser("check", help="equivariance and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
