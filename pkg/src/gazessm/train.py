"""Fold-level training with class-imbalance machinery.

The loop is deliberately plain: seeded shuffling, weighted BCE on
logits, gradient clipping, AdamW, early stopping on a validation metric
with best-epoch restore.  After training, the decision rule is
calibrated on the validation split: a flip flag when the model ranks
classes inversely (validation AUC below 0.5), then an accuracy-maximal
threshold over the flip-adjusted probabilities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateFoldError
from .metrics import auc_pairwise
from .model import ModelConfig, ModelParams, forward_batch, init_params, predict_probs
from .numerics import AdamW, Tensor, backward, clip_grad_norm, softplus, tmean, mul, neg, add

logger = logging.getLogger("gazessm.train")

WEIGHTING_MODES = ("inverse_frequency", "pos_over_neg", "none")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch_size: int = 128
    max_epochs: int = 100
    clip_norm: float = 0.5
    patience: int = 15
    val_fraction: float = 0.05
    early_stop_metric: str = "accuracy"  # or "auc"
    seed: int = 0
    weighting_mode: str = "inverse_frequency"

    def validate(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ContractError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")
        if self.early_stop_metric not in ("accuracy", "auc"):
            raise ContractError(f"unknown early_stop_metric {self.early_stop_metric!r}")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ContractError(f"unknown weighting_mode {self.weighting_mode!r}")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "clip_norm": self.clip_norm,
            "patience": self.patience,
            "val_fraction": self.val_fraction,
            "early_stop_metric": self.early_stop_metric,
            "seed": self.seed,
            "weighting_mode": self.weighting_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class FoldArtifacts:
    params: ModelParams
    threshold: float
    flip: bool
    pos_weight: float
    trace: list  # per-epoch dicts
    best_epoch: int
    epochs_run: int
    collapse_warnings: int
    train_accuracy: float
    val_probs: np.ndarray  # raw (pre-flip) validation probabilities
    val_labels: np.ndarray


def compute_pos_weight(n_pos: int, n_neg: int, mode: str = "inverse_frequency") -> float:
    """Positive-class loss weight from training label counts.

    ``inverse_frequency`` (default) returns n_neg/n_pos so the minority
    positive class gets more weight; ``pos_over_neg`` returns the
    n_pos/n_neg variant; ``none`` returns 1.
    """
    if mode not in WEIGHTING_MODES:
        raise ContractError(f"unknown weighting mode {mode!r}")
    if n_pos <= 0 or n_neg <= 0:
        raise DegenerateFoldError(f"single-class fold (n_pos={n_pos}, n_neg={n_neg})")
    if mode == "inverse_frequency":
        return n_neg / n_pos
    if mode == "pos_over_neg":
        return n_pos / n_neg
    return 1.0


def weighted_bce(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean weighted binary cross-entropy, computed from logits.

    Uses softplus identities (log(sigmoid(l)) = -softplus(-l)) so the
    loss is exact and overflow-free for any logit.
    """
    y = np.asarray(labels, dtype=logits.data.dtype)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("weighted_bce: labels must be 0/1")
    if y.shape != logits.shape:
        raise ContractError("weighted_bce: logits/labels shape mismatch")
    w_pos = Tensor((pos_weight * y).astype(logits.data.dtype))
    w_neg = Tensor((1.0 - y).astype(logits.data.dtype))
    per = add(mul(w_pos, softplus(neg(logits))), mul(w_neg, softplus(logits)))
    return tmean(per)


def optimize_threshold(probs: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy-maximal decision threshold over the candidate grid.

    Candidates are the midpoints between consecutive sorted unique
    probabilities, the half-points below the minimum and above the
    maximum, plus 0.5 itself; ties prefer the candidate nearest 0.5
    (then the smaller).  0.5 always being a candidate guarantees
    acc(theta*) >= acc(0.5).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.size == 0:
        raise ContractError("optimize_threshold: empty input")
    uniq = np.unique(probs)
    edges = np.concatenate([[0.0], uniq, [1.0]])
    candidates = set((edges[:-1] + edges[1:]) / 2.0)
    candidates.add(0.5)
    best = None
    for theta in sorted(candidates):
        acc = float(np.mean((probs >= theta).astype(np.int64) == labels))
        key = (-acc, abs(theta - 0.5), theta)
        if best is None or key < best[0]:
            best = (key, theta)
    return float(best[1])


def calibrate_flip(probs: np.ndarray, labels: np.ndarray) -> bool:
    """Flip iff the validation ranking is inverted (AUC < 0.5).

    Undefined AUC (single-class validation) means no evidence either
    way, so no flip.
    """
    auc = auc_pairwise(probs, labels)
    return auc is not None and auc < 0.5


def split_validation(windows, frac: float, rng: np.random.Generator):
    """Deterministic validation split, stratified across participants.

    Takes about ``frac`` of each participant's windows (at least one,
    never all), so every participant contributes validation signal.  If
    the remaining training side would lose a class entirely, one window
    of the missing class is swapped back from validation.
    """
    by_participant: dict = {}
    for i, w in enumerate(windows):
        by_participant.setdefault(w.participant_id, []).append(i)
    val_idx = []
    for pid in sorted(by_participant):
        idxs = by_participant[pid]
        if len(idxs) < 2:
            continue
        k = min(len(idxs) - 1, max(1, int(round(frac * len(idxs)))))
        picked = rng.choice(len(idxs), size=k, replace=False)
        val_idx.extend(idxs[j] for j in sorted(picked))
    if not val_idx:  # all participants singleton: fall back to window-level
        n = len(windows)
        k = min(n - 1, max(1, int(round(frac * n))))
        val_idx = sorted(rng.choice(n, size=k, replace=False).tolist())
    val_set = set(val_idx)
    train_idx = [i for i in range(len(windows)) if i not in val_set]
    # keep both classes on the training side
    train_labels = {windows[i].label for i in train_idx}
    for missing in (0, 1):
        if missing not in train_labels:
            swap = next((i for i in val_idx if windows[i].label == missing), None)
            if swap is not None and len(val_idx) > 1:
                val_idx.remove(swap)
                train_idx.append(swap)
                train_idx.sort()
    return train_idx, sorted(val_idx)


def _stack(windows, idxs, dtype):
    z = np.stack([windows[i].z for i in idxs]).astype(dtype)
    y = np.asarray([windows[i].label for i in idxs], dtype=np.int64)
    return z, y


def train_fold(windows, cfg: TrainConfig, model_cfg: ModelConfig) -> FoldArtifacts:
    """Train one fold end to end and calibrate its decision rule.

    Raises DegenerateFoldError when the fold cannot support training
    (fewer than two windows or a single class).
    """
    cfg.validate()
    windows = list(windows)
    labels_all = np.asarray([w.label for w in windows], dtype=np.int64)
    n_pos = int((labels_all == 1).sum())
    n_neg = int((labels_all == 0).sum())
    if len(windows) < 2 or n_pos == 0 or n_neg == 0:
        raise DegenerateFoldError(
            f"fold has {len(windows)} windows with counts pos={n_pos}, neg={n_neg}"
        )

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_validation(windows, cfg.val_fraction, rng)
    dtype = np.float32
    z_train, y_train = _stack(windows, train_idx, dtype)
    z_val, y_val = _stack(windows, val_idx, dtype)

    n_pos_tr = int((y_train == 1).sum())
    n_neg_tr = int((y_train == 0).sum())
    pos_weight = compute_pos_weight(n_pos_tr, n_neg_tr, cfg.weighting_mode)

    params = init_params(model_cfg, dtype=dtype)
    opt = AdamW(
        params.parameter_list(),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )

    best_metric = -np.inf
    best_epoch = -1
    best_snapshot = params.snapshot()
    bad_epochs = 0
    collapse_warnings = 0
    trace = []
    n_train = len(train_idx)

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_train)
        losses = []
        for lo in range(0, n_train, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            zb = Tensor(z_train[sel])
            _, logit, _, _ = forward_batch(zb, params, training=True, rng=rng)
            loss = weighted_bce(logit, y_train[sel], pos_weight)
            opt.zero_grad()
            backward(loss)
            clip_grad_norm(params.parameter_list(), cfg.clip_norm)
            opt.step()
            losses.append(loss.item())

        val_probs = predict_probs(z_val, params)
        val_acc = float(np.mean((val_probs >= 0.5).astype(np.int64) == y_val))
        val_auc = auc_pairwise(val_probs, y_val)
        preds = (val_probs >= 0.5).astype(np.int64)
        collapsed = preds.size > 1 and (preds == preds[0]).all() and len(set(y_val.tolist())) > 1
        if collapsed:
            collapse_warnings += 1
            logger.warning("epoch %d: validation predictions collapsed to class %d", epoch, preds[0])

        if cfg.early_stop_metric == "auc" and val_auc is not None:
            metric = val_auc
        else:
            metric = val_acc
        trace.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_accuracy": val_acc,
                "val_auc": val_auc,
                "val_collapsed": bool(collapsed),
            }
        )
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_snapshot = params.snapshot()
            bad_epochs = 0
        else:
            if metric == best_metric:
                # tie: keep the later epoch (more training at equal
                # validation score) but still count toward patience
                best_epoch = epoch
                best_snapshot = params.snapshot()
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    params.restore(best_snapshot)

    val_probs = predict_probs(z_val, params)
    flip = calibrate_flip(val_probs, y_val)
    adjusted = 1.0 - val_probs if flip else val_probs
    threshold = optimize_threshold(adjusted, y_val)

    train_probs = predict_probs(z_train, params)
    adj_train = 1.0 - train_probs if flip else train_probs
    train_acc = float(np.mean((adj_train >= threshold).astype(np.int64) == y_train))

    return FoldArtifacts(
        params=params,
        threshold=threshold,
        flip=flip,
        pos_weight=float(pos_weight),
        trace=trace,
        best_epoch=best_epoch,
        epochs_run=len(trace),
        collapse_warnings=collapse_warnings,
        train_accuracy=train_acc,
        val_probs=val_probs,
        val_labels=y_val,
    )
