"""Training loops, cross-validation, transfer fine-tuning, gradient checks and
interpretability summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import seeding
from ..encoding import NormStats, encode_matrices
from .layers import softmax_cross_entropy, mse
from .model import Adam, CnnAttConfig, CnnAttModel, Network, RegressorConfig, RegressorModel


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 64
    dropout: float = 0.2
    folds: int = 10
    epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")


class VolumeSource:
    """Encodes raw windows into 5-channel volumes, caching while memory allows."""

    def __init__(self, matrices, stats: NormStats, dtype=np.float32, cache_bytes=1.5e9):
        self.matrices = matrices
        self.stats = stats
        self.dtype = dtype
        n = len(matrices)
        per = 5 * np.prod(np.shape(matrices)[1:]) * np.dtype(dtype).itemsize if n else 0
        self._cache = encode_matrices(matrices, stats, dtype) if n * per <= cache_bytes else None

    def __len__(self):
        return len(self.matrices)

    def get(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        if self._cache is not None:
            return self._cache[idx]
        return encode_matrices(np.asarray(self.matrices)[idx], self.stats, self.dtype)


def _accumulate_step(model, x_batch_fn, y, batch_idx, micro):
    """Mean-loss gradients over a batch, summed micro-batch by micro-batch in order."""
    total = {}
    loss = 0.0
    n = len(batch_idx)
    for s in range(0, n, micro):
        mb = batch_idx[s:s + micro]
        w = len(mb) / n
        loss += w * model.loss_and_grads(x_batch_fn(mb), y[mb], train=True)
        for name, g in model.grads().items():
            if name in total:
                total[name] += w * g
            else:
                total[name] = w * g
    return loss, total


def fit(model: Network, get_x, y, train_idx, cfg: TrainConfig, trainable=None,
        micro_batch: int = 16, stream: int = 0) -> list[float]:
    """Adam over shuffled mini-batches; returns the mean training loss per epoch."""
    y = np.asarray(y)
    names = list(model.params()) if trainable is None else list(trainable)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = model.params()
    history = []
    train_idx = np.asarray(train_idx)
    for epoch in range(cfg.epochs):
        order = seeding.rng(cfg.seed, "train", stream, epoch).permutation(train_idx)
        ep_loss = 0.0
        for s in range(0, len(order), cfg.batch):
            bidx = order[s:s + cfg.batch]
            loss, grads = _accumulate_step(model, get_x, y, bidx, micro_batch)
            opt.step(params, grads, names)
            ep_loss += loss * len(bidx)
        history.append(ep_loss / max(len(order), 1))
    return history


def classification_metrics(y_true, y_pred) -> dict:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    return dict(
        n=int(y_true.size),
        accuracy=float(np.mean(y_true == y_pred)) if y_true.size else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
    )


def stratified_folds(labels, folds: int, seed: int) -> list[np.ndarray]:
    """Deal each class's shuffled indices round-robin into ``folds`` test sets."""
    labels = np.asarray(labels)
    g = seeding.rng(seed, "fold", 0)
    out = [[] for _ in range(folds)]
    pos = 0
    for c in np.unique(labels):
        idx = g.permutation(np.flatnonzero(labels == c))
        for i in idx:
            out[pos % folds].append(int(i))
            pos += 1
    return [np.sort(np.array(f, dtype=int)) for f in out]


@dataclass
class TrainResult:
    model: CnnAttModel
    stats: NormStats
    fold_metrics: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def mean(self, key="accuracy") -> float:
        return float(np.mean([m[key] for m in self.fold_metrics])) if self.fold_metrics else float("nan")


def _model_config(matrices, cfg: TrainConfig, base: CnnAttConfig | None, seed: int) -> CnnAttConfig:
    base = base or CnnAttConfig()
    d = base.to_dict()
    d.update(rows=int(np.shape(matrices)[1]), cols=int(np.shape(matrices)[2]),
             dropout=cfg.dropout, seed=seed)
    return CnnAttConfig.from_dict(d)


def train_classifier(matrices, labels, cfg: TrainConfig | None = None,
                     model_cfg: CnnAttConfig | None = None, final: bool = True,
                     folds: list | None = None) -> TrainResult:
    """k-fold cross-validated CNN-Att training on raw windows.

    Normalization statistics are fitted on each fold's training split; the
    returned model (when ``final``) is retrained on every sample.
    """
    cfg = cfg or TrainConfig()
    matrices = np.asarray(matrices)
    labels = np.asarray(labels, dtype=int)
    if np.unique(labels).size < 2:
        raise ValueError("training data must contain both classes")
    folds = folds if folds is not None else stratified_folds(labels, cfg.folds, cfg.seed)
    all_idx = np.arange(len(labels))
    metrics = []
    for f, test in enumerate(folds):
        train = np.setdiff1d(all_idx, test)
        stats = NormStats.fit(matrices[train])
        mcfg = _model_config(matrices, cfg, model_cfg, seeding.child_seed(cfg.seed, "init", f))
        model = CnnAttModel(mcfg)
        src = VolumeSource(matrices, stats, model.dtype)
        hist = fit(model, src.get, labels, train, cfg, micro_batch=mcfg.micro_batch, stream=f)
        pred = model.predict(src.get(test))
        m = classification_metrics(labels[test], pred)
        m.update(fold=f, final_loss=hist[-1] if hist else float("nan"))
        metrics.append(m)
        del src
    stats = NormStats.fit(matrices)
    mcfg = _model_config(matrices, cfg, model_cfg, seeding.child_seed(cfg.seed, "init", len(folds)))
    model = CnnAttModel(mcfg)
    history = []
    if final:
        src = VolumeSource(matrices, stats, model.dtype)
        history = fit(model, src.get, labels, all_idx, cfg, micro_batch=mcfg.micro_batch,
                      stream=len(folds))
    return TrainResult(model, stats, metrics, history)


def holdout_split(labels, fraction: float, seed: int):
    """Stratified (train, validation) index split."""
    labels = np.asarray(labels)
    g = seeding.rng(seed, "split", 0)
    val = []
    for c in np.unique(labels):
        idx = g.permutation(np.flatnonzero(labels == c))
        val += list(idx[: max(1, int(round(fraction * idx.size)))] if idx.size > 1 else [])
    val = np.sort(np.array(val, dtype=int))
    return np.setdiff1d(np.arange(labels.size), val), val


def fine_tune(pretrained: CnnAttModel, matrices, labels, stats: NormStats,
              cfg: TrainConfig | None = None, train_idx=None, val_idx=None):
    """Transfer a trained classifier to new labels: convolution branches are
    frozen, attention and the dense head keep training."""
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=int)
    if np.unique(labels if train_idx is None else labels[train_idx]).size < 2:
        raise ValueError("fine-tuning data must contain both classes")
    model = pretrained.copy()
    src = VolumeSource(np.asarray(matrices), stats, model.dtype)
    train_idx = np.arange(len(labels)) if train_idx is None else np.asarray(train_idx)
    hist = fit(model, src.get, labels, train_idx, cfg, trainable=model.trainable_after_freeze(),
               micro_batch=model.cfg.micro_batch, stream=10_000)
    metrics = {}
    if val_idx is not None and len(val_idx):
        metrics = classification_metrics(labels[val_idx], model.predict(src.get(val_idx)))
    metrics["history"] = hist
    return model, metrics


# --------------------------------------------------------------------------
# Regressor

N_META = 3


def regressor_features(matrices, stats: NormStats, meta) -> np.ndarray:
    """Per-row mean intensity, the last pre-clearance column, and (k, tau, x/100)."""
    from ..encoding import build_intensity_map

    rows = []
    for m, md in zip(matrices, meta):
        im = build_intensity_map(m, stats)
        rows.append(np.concatenate([im.mean(axis=1), im[:, -1],
                                    [md["k"], md["duration"], md["location"] / 100.0]]))
    return np.asarray(rows)


def train_regressor(features, targets, cfg: TrainConfig | None = None,
                    reg_cfg: RegressorConfig | None = None, val_fraction: float = 0.2):
    """Fit the participation regressor; returns (model, held-out RMSE)."""
    cfg = cfg or TrainConfig(lr=1e-3, batch=32, epochs=200)
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.size == 0:
        raise ValueError("no regression targets")
    if np.any((y < 0) | (y > 1)) or not np.all(np.isfinite(y)):
        raise ValueError("targets must lie in [0, 1]")
    reg_cfg = reg_cfg or RegressorConfig(n_inputs=x.shape[1], seed=seeding.child_seed(cfg.seed, "init", 0))
    model = RegressorModel(reg_cfg)
    g = seeding.rng(cfg.seed, "split", 1)
    perm = g.permutation(y.size)
    n_val = int(round(val_fraction * y.size)) if y.size > 4 else 0
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    model.x_mean = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    model.x_scale = np.where(sd > 0, sd, 1.0)
    model.start_at(y[train].mean())
    fit(model, lambda idx: x[idx], y, train, cfg, micro_batch=max(cfg.batch, 1), stream=20_000)
    ev = val if n_val else train
    return model, rmse(model.predict(x[ev]), y[ev])


def rmse(pred, target) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(target)) ** 2)))


# --------------------------------------------------------------------------
# Gradient checking


def relative_error(a, n, floor=1e-6):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(model: Network, x, y, loss: str = "ce", eps: float = 1e-5,
               n_per_kind: int = 200, seed: int = 0) -> dict:
    """Max relative error between backprop and central differences, per
    layer kind, on up to ``n_per_kind`` random parameters of each kind."""
    x = np.asarray(x)
    y = np.asarray(y)

    def run():
        out = model.forward(x, train=False)
        if loss == "ce":
            val, g = softmax_cross_entropy(out, y.astype(int))
        else:
            val, g = mse(out.reshape(y.shape), y)
            g = g.reshape(out.shape)
        model.backward(g)
        return val

    run()
    grads = {k: v.copy() for k, v in model.grads().items()}
    params = model.params()
    kinds = model.param_kind()
    g = np.random.default_rng(seed)
    result = {}
    for kind in sorted(set(kinds.values())):
        names = [n for n in params if kinds[n] == kind]
        sizes = np.array([params[n].size for n in names])
        total = int(sizes.sum())
        picks = g.choice(total, size=min(n_per_kind, total), replace=False)
        offsets = np.cumsum(np.r_[0, sizes])
        worst = 0.0
        for p in picks:
            j = int(np.searchsorted(offsets, p, side="right") - 1)
            flat = params[names[j]].reshape(-1)
            i = p - offsets[j]
            old = flat[i]
            flat[i] = old + eps
            lp = run()
            flat[i] = old - eps
            lm = run()
            flat[i] = old
            num = (lp - lm) / (2 * eps)
            ana = grads[names[j]].reshape(-1)[i]
            worst = max(worst, float(relative_error(ana, num)))
        result[kind] = worst
    run()
    return result


def grad_check_softmax_ce(logits, labels, eps: float = 1e-5) -> float:
    """Central-difference check of the softmax cross-entropy gradient."""
    logits = np.array(logits, dtype=float)
    _, g = softmax_cross_entropy(logits, labels)
    worst = 0.0
    for idx in np.ndindex(logits.shape):
        old = logits[idx]
        logits[idx] = old + eps
        lp, _ = softmax_cross_entropy(logits, labels)
        logits[idx] = old - eps
        lm, _ = softmax_cross_entropy(logits, labels)
        logits[idx] = old
        worst = max(worst, float(relative_error(g[idx], (lp - lm) / (2 * eps))))
    return worst


# --------------------------------------------------------------------------
# Interpretability


@dataclass
class Interpretation:
    kernel_sizes: tuple
    kernel_anw: np.ndarray  # one weight per branch, sums to 1
    head_top_indices: np.ndarray  # (heads, 2) time indices
    head_mass: np.ndarray  # (heads, cols)


def interpret(model: CnnAttModel, volumes) -> Interpretation:
    """Branch weight shares and each head's two most attended time columns."""
    ks = model.cfg.kernel_sizes
    mags = np.array([np.mean(np.abs(model.params()[f"conv{k}.w"])) for k in ks], dtype=float)
    anw = mags / mags.sum()
    volumes = np.asarray(volumes)
    mb = model.cfg.micro_batch
    mass = None
    for i in range(0, len(volumes), mb):
        a = model.attention_weights(volumes[i:i + mb]).astype(np.float64)
        part = a.mean(axis=2).sum(axis=0)  # (heads, keys)
        mass = part if mass is None else mass + part
    mass = mass / max(len(volumes), 1)
    top = np.argsort(-mass, axis=1, kind="stable")[:, :2]
    return Interpretation(tuple(ks), anw, top, mass)
