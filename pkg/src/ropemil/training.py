"""Training loop, cross-validation protocol, and ranking metrics.

Optimization is plain Adam over the manual-gradient parameter trees, with
"batch size" realized as gradient accumulation over single-bag forwards
(bags have variable instance counts, so there is no padded batching).
Model selection is early stopping on a stratified validation carve-out;
evaluation is stratified k-fold with macro AUROC and average precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import params as ptree
from .errors import (ConfigurationError, DimensionError, NumericFailure,
                     ValidationError)
from .grid import PatchBag
from .mil import ModelConfig, ModelParams, init_model_params, model_bwd, model_fwd
from .numkernel import cross_entropy_loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    effective_batch: int = 4
    max_epochs: int = 50
    early_stop_patience: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    n_folds: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("val_fraction must be in (0, 1)")
        if self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")
        if self.effective_batch < 1:
            raise ConfigurationError("effective_batch must be >= 1")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")
        if self.n_folds < 2:
            raise ConfigurationError("n_folds must be >= 2")


@dataclass
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int = 0


def init_adam_state(params) -> AdamState:
    return AdamState(m=ptree.tree_zeros_like(params),
                     v=ptree.tree_zeros_like(params), t=0)


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update with bias correction."""
    bad = [p for p, a in ptree.tree_arrays(grads) if not np.isfinite(a).all()]
    if bad:
        raise NumericFailure(
            f"non-finite gradient at step {state.t + 1} in: {', '.join(bad)}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    walk = zip(ptree.tree_arrays(params), ptree.tree_arrays(grads),
               ptree.tree_arrays(state.m), ptree.tree_arrays(state.v),
               strict=True)
    for (path, p), (gp, g), (_, m), (_, v) in walk:
        if path != gp:
            raise DimensionError(f"gradient tree mismatch: {path} vs {gp}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def stratified_kfold(labels: Sequence[int], k: int, seed: int) -> list[np.ndarray]:
    """Disjoint test-index folds with per-class proportions within one sample
    of the global proportions. Deterministic for a fixed seed."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise ConfigurationError(
                f"class {int(c)} has {idx.size} members, fewer than k={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def _stratified_val_split(labels, pool, frac, rng):
    pool = np.asarray(pool, dtype=np.int64)
    val: list[int] = []
    for c in np.unique(labels[pool]):
        members = rng.permutation(pool[labels[pool] == c])
        n_val = max(1, int(round(frac * members.size)))
        if n_val >= members.size:
            raise ConfigurationError(
                f"val_fraction {frac} leaves no training bags for class {int(c)}")
        val.extend(int(i) for i in members[:n_val])
    val_idx = np.array(sorted(val), dtype=np.int64)
    train_idx = np.setdiff1d(pool, val_idx)
    return train_idx, val_idx


# ---------------------------------------------------------------------------
# metrics

def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_auroc(y: np.ndarray, scores: np.ndarray) -> float:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC needs both positives and negatives")
    ranks = _midranks(np.asarray(scores, dtype=np.float64))
    pos_rank_sum = float(ranks[y].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auroc_macro(y_true: Sequence[int], scores: np.ndarray) -> float:
    """One-vs-rest AUROC with midrank tie handling, averaged over the
    classes present in y_true."""
    y = np.asarray(y_true, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != y.size:
        raise DimensionError(f"scores shape {S.shape} vs {y.size} labels")
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError("AUROC undefined with a single class present")
    return float(np.mean([_binary_auroc(y == c, S[:, c]) for c in present]))


def average_precision(y_true, scores) -> float:
    """Step-function AP over the precision-recall curve, descending scores,
    ties grouped at a single threshold."""
    y = np.asarray(y_true, dtype=bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise DimensionError(f"shapes {y.shape} vs {s.shape}")
    if not y.any():
        raise ValidationError("average precision undefined with zero positives")
    order = np.argsort(-s, kind="mergesort")
    ys = y[order]
    ss = s[order]
    tp = np.cumsum(ys)
    n_seen = np.arange(1, y.size + 1)
    group_end = np.append(np.flatnonzero(np.diff(ss) != 0), y.size - 1)
    precision = tp[group_end] / n_seen[group_end]
    recall = tp[group_end] / tp[-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def ap_macro(y_true: Sequence[int], scores: np.ndarray) -> float:
    y = np.asarray(y_true, dtype=np.int64)
    S = np.asarray(scores, dtype=np.float64)
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError("macro AP undefined with a single class present")
    return float(np.mean([average_precision(y == c, S[:, c]) for c in present]))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# training

@dataclass
class FoldRecord:
    fold: int
    train_loss: list[float]
    val_loss: list[float]
    stopped_epoch: int
    best_epoch: int
    test_auroc: float
    test_ap: float
    best_params: ModelParams


@dataclass
class TrainRun:
    folds: list[FoldRecord]

    @property
    def auroc_mean(self) -> float:
        return float(np.mean([f.test_auroc for f in self.folds]))

    @property
    def auroc_std(self) -> float:
        return float(np.std([f.test_auroc for f in self.folds]))

    @property
    def ap_mean(self) -> float:
        return float(np.mean([f.test_ap for f in self.folds]))

    @property
    def ap_std(self) -> float:
        return float(np.std([f.test_ap for f in self.folds]))


def bag_probs(params: ModelParams, model_cfg: ModelConfig, bag: PatchBag,
              kernel: str = "naive") -> np.ndarray:
    out, _ = model_fwd(params, model_cfg, bag.features, bag.grid_coords,
                       bag.mask, kernel=kernel)
    return _softmax(out.logits.astype(np.float64))


def evaluate(params: ModelParams, model_cfg: ModelConfig,
             bags: Sequence[PatchBag], labels, kernel: str = "naive"):
    """Scores every bag; returns (auroc, ap, probs matrix)."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.stack([bag_probs(params, model_cfg, b, kernel) for b in bags])
    return auroc_macro(labels, probs), ap_macro(labels, probs), probs


def _train_fold(bags, labels, test_idx, fold, model_cfg, train_cfg, kernel):
    n = len(bags)
    pool = np.setdiff1d(np.arange(n, dtype=np.int64), test_idx)
    if np.unique(labels[pool]).size < 2:
        raise ValidationError("training split must contain at least two classes")
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, fold]))
    train_idx, val_idx = _stratified_val_split(labels, pool,
                                               train_cfg.val_fraction, rng)
    params = init_model_params(model_cfg, seed=int(rng.integers(2 ** 31)))
    state = init_adam_state(params)
    dropout_rng = None
    if model_cfg.dropout > 0.0:
        dropout_rng = np.random.default_rng(
            np.random.SeedSequence([train_cfg.seed, fold, 1]))

    best_val = np.inf
    best_params = ptree.tree_copy(params)
    best_epoch = 0
    since_best = 0
    train_trace: list[float] = []
    val_trace: list[float] = []
    stopped_epoch = train_cfg.max_epochs

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, order.size, train_cfg.effective_batch):
            batch = order[start:start + train_cfg.effective_batch]
            grads = None
            inv_b = 1.0 / batch.size
            for i in batch:
                b = bags[i]
                out, cache = model_fwd(params, model_cfg, b.features,
                                       b.grid_coords, b.mask, kernel=kernel,
                                       dropout_rng=dropout_rng)
                loss, dlogits = cross_entropy_loss(out.logits, int(labels[i]),
                                                   with_grad=True)
                if not np.isfinite(loss):
                    raise NumericFailure(
                        f"non-finite loss at epoch {epoch}, bag {b.bag_id!r}")
                epoch_loss += loss
                g = model_bwd(cache, dlogits * inv_b)
                if grads is None:
                    grads = g
                else:
                    ptree.tree_add_(grads, g)
            adam_step(params, grads, state, train_cfg)
        train_trace.append(epoch_loss / order.size)

        val_loss = 0.0
        for i in val_idx:
            b = bags[i]
            out, _ = model_fwd(params, model_cfg, b.features, b.grid_coords,
                               b.mask, kernel=kernel)
            val_loss += cross_entropy_loss(out.logits, int(labels[i]))
        val_loss /= val_idx.size
        if not np.isfinite(val_loss):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}")
        val_trace.append(val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_params = ptree.tree_copy(params)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_cfg.early_stop_patience:
                stopped_epoch = epoch
                break

    test_auroc, test_ap, _ = evaluate(best_params, model_cfg,
                                      [bags[i] for i in test_idx],
                                      labels[test_idx], kernel)
    return FoldRecord(fold=fold, train_loss=train_trace, val_loss=val_trace,
                      stopped_epoch=stopped_epoch, best_epoch=best_epoch,
                      test_auroc=test_auroc, test_ap=test_ap,
                      best_params=best_params)


def train(bags: Sequence[PatchBag], labels, model_cfg: ModelConfig,
          train_cfg: TrainConfig, kernel: str = "naive",
          parallel_folds: bool = False) -> TrainRun:
    """Stratified k-fold training; see module docstring for the protocol.

    Folds are independent (own seed stream, own parameters), so
    ``parallel_folds`` may overlap them in threads; records come back in
    fold order and are identical to the sequential run.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(bags),):
        raise DimensionError(f"{len(bags)} bags vs labels shape {labels.shape}")
    folds = stratified_kfold(labels, train_cfg.n_folds, train_cfg.seed)
    if parallel_folds:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=len(folds)) as pool:
            futures = [
                pool.submit(_train_fold, bags, labels, test_idx, f,
                            model_cfg, train_cfg, kernel)
                for f, test_idx in enumerate(folds)
            ]
            records = [fut.result() for fut in futures]
    else:
        records = [
            _train_fold(bags, labels, test_idx, f, model_cfg, train_cfg, kernel)
            for f, test_idx in enumerate(folds)
        ]
    return TrainRun(folds=records)
