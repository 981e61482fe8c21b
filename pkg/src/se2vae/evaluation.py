"""Bag aggregation, probe classifiers, multi-class AUC, and
disentanglement measurement.

Probes are deterministic full-batch optimizers over the package's own
tensor engine, so representation comparisons carry no stochastic-probe
variance: identical features and seeds give identical numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor, backward, tape

TWO_PI = 2.0 * np.pi


@dataclass
class BagRecord:
    bag_id: int
    label: int
    split: str
    instance_ids: np.ndarray
    iso: np.ndarray | None = None    # (k, M)
    ori: np.ndarray | None = None    # (k, M', N)


@dataclass
class BagAggregate:
    iso_mean: np.ndarray | None
    ori_hist: np.ndarray | None


def aggregate_bag(record: BagRecord) -> BagAggregate:
    """Arithmetic mean of the bag's instance embeddings.

    Instances are summed in instance-id order, so permuting the input
    leaves the result bit-identical.
    """
    if len(record.instance_ids) == 0:
        raise ValueError(f"bag {record.bag_id} has no instances")
    order = np.argsort(record.instance_ids, kind="stable")
    iso_mean = None if record.iso is None else record.iso[order].mean(axis=0)
    ori_hist = None if record.ori is None else record.ori[order].mean(axis=0)
    return BagAggregate(iso_mean, ori_hist)


@dataclass
class ProbeConfig:
    l2_grid: tuple = (1e-4, 1e-3, 1e-2, 1e-1)
    lr: float = 0.05
    epochs: int = 400
    hidden: int = 32    # first-layer width of the cyclic probe

    def __post_init__(self):
        if not self.l2_grid:
            raise ValueError("l2_grid must be non-empty")


@dataclass
class LinearModel:
    weights: np.ndarray      # (d, C)
    bias: np.ndarray         # (C,)
    mean: np.ndarray         # feature standardization, fitted on train
    scale: np.ndarray
    classes: np.ndarray
    l2: float

    def scores(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.scale
        return z @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        s = self.scores(x)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(x), axis=1)]


def _softmax_xent(logits: Tensor, onehot: np.ndarray) -> Tensor:
    shift = logits - T.amax(logits, axis=1, keepdims=True)
    logz = T.log(T.tsum(T.exp(shift), axis=1, keepdims=True))
    return -T.tmean(T.tsum((shift - logz) * Tensor(onehot, dtype=logits.dtype),
                           axis=1))


def _check_classes(labels: np.ndarray) -> np.ndarray:
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("training labels contain fewer than two classes")
    return classes


def _standardize(x: np.ndarray):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def _fit_linear(x, onehot, l2, config) -> tuple:
    n, d = x.shape
    c = onehot.shape[1]
    w = Tensor(np.zeros((d, c)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(c), requires_grad=True, dtype=np.float64)
    xt = Tensor(x, dtype=np.float64)
    m_w = np.zeros_like(w.data)
    v_w = np.zeros_like(w.data)
    m_b = np.zeros_like(b.data)
    v_b = np.zeros_like(b.data)
    for step in range(1, config.epochs + 1):
        w.zero_grad()
        b.zero_grad()
        with tape():
            loss = _softmax_xent(T.matmul(xt, w) + b, onehot) \
                + l2 * T.tsum(w * w)
            backward(loss)
        for p, m, v in ((w, m_w, v_w), (b, m_b, v_b)):
            m *= 0.9
            m += 0.1 * p.grad
            v *= 0.999
            v += 0.001 * p.grad * p.grad
            mhat = m / (1 - 0.9 ** step)
            vhat = v / (1 - 0.999 ** step)
            p.data -= config.lr * mhat / (np.sqrt(vhat) + 1e-8)
    return w.data, b.data


def fit_logreg(features: np.ndarray, labels: np.ndarray,
               config: ProbeConfig | None = None,
               val_features: np.ndarray | None = None,
               val_labels: np.ndarray | None = None) -> LinearModel:
    """Multi-class logistic regression by deterministic full-batch descent.

    When a validation set is supplied, the L2 coefficient is picked from the
    grid by validation mAUC; otherwise the smallest grid value is used.
    """
    config = config or ProbeConfig()
    classes = _check_classes(labels)
    mean, scale = _standardize(features)
    x = (features - mean) / scale
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)

    grid = config.l2_grid if val_features is not None else config.l2_grid[:1]
    best, best_score = None, -np.inf
    for l2 in grid:
        w, b = _fit_linear(x, onehot, l2, config)
        model = LinearModel(w, b, mean, scale, classes, l2)
        if val_features is None:
            return model
        score, _ = mauc(model.scores(val_features), val_labels,
                        classes=classes)
        if score > best_score:
            best, best_score = model, score
    return best


@dataclass
class CyclicModel:
    """Two-layer probe on orientation histograms, exactly invariant to
    cyclic shifts: the shared first layer is applied to every cyclic shift
    of the input and the responses are reduced by an elementwise max."""

    w1: np.ndarray           # (M' * N, hidden)
    b1: np.ndarray
    w2: np.ndarray           # (hidden, C)
    b2: np.ndarray
    classes: np.ndarray
    l2: float

    def _hidden(self, h: np.ndarray) -> np.ndarray:
        n = h.shape[-1]
        responses = [np.roll(h, k, axis=-1).reshape(len(h), -1) @ self.w1
                     + self.b1 for k in range(n)]
        return np.max(responses, axis=0)

    def scores(self, h: np.ndarray) -> np.ndarray:
        return self._hidden(h) @ self.w2 + self.b2

    def predict(self, h: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(h), axis=1)]


def fit_cyclic_logreg(ori_hists: np.ndarray, labels: np.ndarray,
                      config: ProbeConfig | None = None,
                      val_hists: np.ndarray | None = None,
                      val_labels: np.ndarray | None = None,
                      seed: int = 0) -> CyclicModel:
    """Shift-invariant two-layer probe over (n, M', N) histograms."""
    config = config or ProbeConfig()
    classes = _check_classes(labels)
    n_items, m, n = ori_hists.shape
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)
    rng = RngStream(seed, stream=11)
    shifts = np.stack([np.roll(ori_hists, k, axis=-1).reshape(n_items, -1)
                       for k in range(n)], axis=1)   # (n_items, N, M'*N)
    xt = Tensor(shifts, dtype=np.float64)

    grid = config.l2_grid if val_hists is not None else config.l2_grid[:1]
    best, best_score = None, -np.inf
    for l2 in grid:
        bound = np.sqrt(6.0 / (m * n + config.hidden))
        w1 = Tensor(rng.uniform((m * n, config.hidden)) * 2 * bound - bound,
                    requires_grad=True, dtype=np.float64)
        b1 = Tensor(np.zeros(config.hidden), requires_grad=True,
                    dtype=np.float64)
        w2 = Tensor(np.zeros((config.hidden, len(classes))),
                    requires_grad=True, dtype=np.float64)
        b2 = Tensor(np.zeros(len(classes)), requires_grad=True,
                    dtype=np.float64)
        params = [w1, b1, w2, b2]
        state = [(np.zeros_like(p.data), np.zeros_like(p.data))
                 for p in params]
        for step in range(1, config.epochs + 1):
            for p in params:
                p.zero_grad()
            with tape():
                hid = T.amax(T.matmul(xt, w1) + b1, axis=1)
                logits = T.matmul(hid, w2) + b2
                loss = _softmax_xent(logits, onehot) \
                    + l2 * (T.tsum(w1 * w1) + T.tsum(w2 * w2))
                backward(loss)
            for p, (mb, vb) in zip(params, state):
                mb *= 0.9
                mb += 0.1 * p.grad
                vb *= 0.999
                vb += 0.001 * p.grad * p.grad
                mhat = mb / (1 - 0.9 ** step)
                vhat = vb / (1 - 0.999 ** step)
                p.data -= config.lr * mhat / (np.sqrt(vhat) + 1e-8)
        model = CyclicModel(w1.data, b1.data, w2.data, b2.data, classes, l2)
        if val_hists is None:
            return model
        score, _ = mauc(model.scores(val_hists), val_labels, classes=classes)
        if score > best_score:
            best, best_score = model, score
    return best


def _rank_with_ties(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    ranks = _rank_with_ties(scores)
    return (ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) \
        / (n_pos * n_neg)


def mauc(scores: np.ndarray, labels: np.ndarray,
         classes: np.ndarray | None = None):
    """Mean one-vs-rest AUC (ties counted 0.5) plus the per-class AUCs.

    `scores` is (n, C) with columns ordered like `classes` (defaults to the
    sorted unique labels). Classes without positive or negative examples
    are skipped with a warning.
    """
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("mauc needs at least two classes present")
    per_class = {}
    for col, cls in enumerate(classes):
        positives = labels == cls
        if positives.all() or not positives.any():
            warnings.warn(f"class {cls} absent from one side; skipped")
            continue
        per_class[cls] = _binary_auc(np.asarray(scores)[:, col], positives)
    return float(np.mean(list(per_class.values()))), per_class


def resample_eval(fit_eval, n_train: int, repeats: int = 10, rng=None):
    """Bootstrap the probe training set and report mean/std of the metric.

    `fit_eval(indices)` refits the probe on the resampled training indices
    and returns its evaluation metric on the fixed test split.
    """
    if repeats < 2:
        raise ValueError("resample_eval needs at least two repeats")
    vals = []
    for _ in range(repeats):
        idx = rng.integers(0, n_train, (n_train,))
        vals.append(fit_eval(np.asarray(idx)))
    vals = np.array(vals, dtype=np.float64)
    return float(vals.mean()), float(vals.std()), vals


def circular_mean_angle(q: np.ndarray, fold: int = 1) -> np.ndarray:
    """Angle estimates from bin-mass rows (..., N), modulo 2*pi/fold.

    `fold` handles factor symmetry: fold=2 reads out an angle that is only
    identifiable modulo pi (e.g. an unmarked ellipse axis).
    """
    n = q.shape[-1]
    centers = (np.arange(n) + 0.5) * (TWO_PI / n)
    z = (q * np.exp(1j * fold * centers)).sum(axis=-1)
    return np.mod(np.angle(z) / fold, TWO_PI / fold)


def _circular_mae(pred: np.ndarray, true: np.ndarray, period: float) -> float:
    d = np.mod(pred - true, period)
    return float(np.mean(np.minimum(d, period - d)))


def _align_offset(pred, true, period, grid=720):
    """Best global offset and sign for matching a circular prediction."""
    best = (np.inf, 0.0, 1)
    for sign in (1, -1):
        for delta in np.arange(grid) * (period / grid):
            mae = _circular_mae(sign * pred + delta, true, period)
            if mae < best[0]:
                best = (mae, delta, sign)
    return best


def _r_squared(x: np.ndarray, y: np.ndarray, x_eval, y_eval) -> float:
    a = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    a_eval = np.concatenate([x_eval, np.ones((len(x_eval), 1))], axis=1)
    pred = a_eval @ coef
    ss_res = np.sum((y_eval - pred) ** 2)
    ss_tot = np.sum((y_eval - y_eval.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0


def disentanglement_probe(iso: np.ndarray, ori: np.ndarray, factors: dict,
                          period: float = TWO_PI) -> dict:
    """Quantify the latent split against synthetic ground truth.

    Returns the mean absolute angular error of the angle read out of the
    angular block (best component, alignment fitted on the first half and
    scored on the second), the angular error of a linear probe from the
    isotropic block, and per-factor R-squared values from the isotropic
    block. Angles are compared modulo `period` (pi for unmarked ellipses).
    """
    if "theta0" not in factors:
        raise ValueError("ground-truth factors must include 'theta0'")
    theta = np.asarray(factors["theta0"], dtype=np.float64)
    n_items = len(theta)
    half = n_items // 2
    fit, ev = slice(0, half), slice(half, n_items)
    fold = int(round(TWO_PI / period))

    # angle from the angular block: align each component on the fit half,
    # keep the one that transfers best
    best_mae = np.inf
    for comp in range(ori.shape[1]):
        pred = circular_mean_angle(ori[:, comp], fold)
        fit_mae, delta, sign = _align_offset(pred[fit], theta[fit] % period,
                                             period)
        mae = _circular_mae(sign * pred[ev] + delta, theta[ev] % period,
                            period)
        if fit_mae < best_mae:
            best_mae, ori_mae = fit_mae, mae
    # angle from the isotropic block: linear probe onto the folded circle
    targets = np.stack([np.cos(fold * theta), np.sin(fold * theta)], axis=1)
    a = np.concatenate([iso, np.ones((n_items, 1))], axis=1)
    coef, *_ = np.linalg.lstsq(a[fit], targets[fit], rcond=None)
    pred = a[ev] @ coef
    iso_angle = np.mod(np.arctan2(pred[:, 1], pred[:, 0]) / fold, period)
    iso_mae = _circular_mae(iso_angle, theta[ev] % period, period)

    r2 = {}
    for name, vals in factors.items():
        if name == "theta0":
            continue
        vals = np.asarray(vals, dtype=np.float64)
        if vals.std() < 1e-12:
            continue
        r2[name] = _r_squared(iso[fit], vals[fit], iso[ev], vals[ev])
    return {"mae_ori": ori_mae, "mae_iso": iso_mae, "r2": r2}


def format_eval_report(rows) -> str:
    """Tab-separated report: representation, task, mAUC mean/std, per-class."""
    lines = ["representation\ttask\tmauc_mean\tmauc_std\tper_class"]
    for r in rows:
        per = ",".join(f"{k}:{v:.4f}" for k, v in sorted(r["per_class"].items()))
        lines.append(f"{r['representation']}\t{r['task']}\t"
                     f"{r['mean']:.4f}\t{r['std']:.4f}\t{per}")
    return "\n".join(lines) + "\n"
