"""Training loop: RMSE objective, AdamW, listener-level folds, checkpoint
selection and ensemble averaging.

Everything is deterministic given (data, seed): seeds are spawned from one
np.random.SeedSequence, so retraining a fold reproduces the checkpoint
byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .conditioning import (ConditioningStats, ListenerProfile, Severity,
                           fit_conditioning_stats)
from .errors import ConfigError, DataError
from .model import ModelConfig, PreparedUtterance, build_model, forward
from .tensor import ParameterStore, Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs: int = 9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.0  # fraction of total steps with linear lr ramp
    final_lr_frac: float = 1.0  # cosine-decay floor as a fraction of lr; 1.0 = constant
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"bad training config: lr={self.lr}, epochs={self.epochs}, "
                              f"batch_size={self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"adam betas must be in [0,1): {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.warmup_frac < 1 or not 0 < self.final_lr_frac <= 1:
            raise ConfigError(f"warmup_frac in [0,1) and final_lr_frac in (0,1] required, "
                              f"got {self.warmup_frac}, {self.final_lr_frac}")


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based `step`: linear warmup, then cosine to
    `final_lr_frac * lr` (constant when final_lr_frac == 1)."""
    warm = cfg.warmup_frac * total_steps
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.final_lr_frac >= 1.0 or total_steps <= warm:
        return cfg.lr
    span = (step - warm) / (total_steps - warm)
    lo = cfg.final_lr_frac
    return cfg.lr * (lo + (1.0 - lo) * 0.5 * (1.0 + np.cos(np.pi * span)))


def rmse_loss(predictions: list[Tensor], labels: np.ndarray) -> Tensor:
    """Root-mean-square error over one minibatch, as graph ops end to end."""
    if len(predictions) != len(labels):
        raise DataError(f"{len(predictions)} predictions vs {len(labels)} labels")
    preds = tz.concat([tz.reshape(p, (1,)) for p in predictions], axis=0)
    return tz.sqrt(tz.mean(tz.square(preds - Tensor(np.asarray(labels, dtype=np.float64)))))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, store: ParameterStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in store.items()}

    def step(self, lr: float | None = None) -> None:
        c = self.cfg
        if lr is None:
            lr = c.lr
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name] = c.beta1 * self._m[name] + (1.0 - c.beta1) * g
            v = self._v[name] = c.beta2 * self._v[name] + (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            # decoupled decay on matrices only; biases, norms and embeddings
            # are left unregularized
            wd = c.weight_decay if p.data.ndim >= 2 else 0.0
            p.data -= lr * update + lr * wd * p.data


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    val_listeners: tuple[str, ...]
    train_listeners: tuple[str, ...]


def make_folds(profiles: dict[str, ListenerProfile], n_folds: int = 5,
               val_per_class: int = 2, seed: int = 0) -> list[Fold]:
    """Listener-level folds: each fold holds out val_per_class listeners of
    every severity class; all remaining listeners train.

    Classes with fewer than n_folds * val_per_class members are dealt
    cyclically (fresh shuffle each pass), so a listener may validate in
    more than one fold but never twice in the same fold.
    """
    by_class: dict[Severity, list[str]] = {s: [] for s in Severity}
    for lid in sorted(profiles):
        by_class[profiles[lid].severity].append(lid)
    for sev, members in by_class.items():
        if len(members) < val_per_class:
            raise DataError(f"severity {sev.name} has {len(members)} listeners, "
                            f"need at least {val_per_class}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    decks = {s: [] for s in Severity}
    folds = []
    all_ids = sorted(profiles)
    for i in range(n_folds):
        val: list[str] = []
        for sev in Severity:
            take: list[str] = []
            while len(take) < val_per_class:
                if not decks[sev]:
                    decks[sev] = [by_class[sev][j] for j in rng.permutation(len(by_class[sev]))]
                cand = decks[sev].pop(0)
                if cand not in take:
                    take.append(cand)
            val.extend(take)
        train = tuple(lid for lid in all_ids if lid not in val)
        folds.append(Fold(i, tuple(val), train))
    return folds


# ---------------------------------------------------------------------------
# fold training


@dataclass
class FoldResult:
    fold: int
    store: ParameterStore
    stats: ConditioningStats | None
    best_epoch: int
    best_val_rmse: float
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)


def predict(store: ParameterStore, cfg: ModelConfig, utts: list[PreparedUtterance],
            profiles: dict[str, ListenerProfile],
            stats: ConditioningStats | None = None) -> np.ndarray:
    out = np.empty(len(utts))
    for i, u in enumerate(utts):
        prof = profiles.get(u.listener_id) if cfg.conditioning != "none" else None
        out[i] = forward(store, cfg, u, prof, stats).prediction.item()
    return out


def predict_scores(store: ParameterStore, cfg: ModelConfig, utts: list[PreparedUtterance],
                   profiles: dict[str, ListenerProfile],
                   stats: ConditioningStats | None = None) -> np.ndarray:
    """Per-utterance [left, right, pooled] scores, shape [n, 3]."""
    out = np.empty((len(utts), 3))
    for i, u in enumerate(utts):
        prof = profiles.get(u.listener_id) if cfg.conditioning != "none" else None
        r = forward(store, cfg, u, prof, stats)
        out[i] = (r.score_left.item(), r.score_right.item(), r.prediction.item())
    return out


def rmse_metric(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(predictions) - np.asarray(labels)) ** 2)))


def train_fold(mcfg: ModelConfig, tcfg: TrainConfig, train_set: list[PreparedUtterance],
               val_set: list[PreparedUtterance], profiles: dict[str, ListenerProfile],
               fold_index: int = 0, log_fn=None) -> FoldResult:
    """Train one fold and return the best-validation checkpoint.

    Ties on validation RMSE keep the earlier epoch.
    """
    if not train_set or not val_set:
        raise DataError("train and validation sets must both be non-empty")
    for u in train_set + val_set:
        if u.label is None:
            raise DataError(f"utterance {u.utterance_id} has no label")
    ss = np.random.SeedSequence(entropy=tcfg.seed, spawn_key=(fold_index,))
    init_ss, loop_ss = ss.spawn(2)
    store = build_model(mcfg, np.random.default_rng(init_ss))
    rng = np.random.default_rng(loop_ss)

    stats = None
    if mcfg.conditioning in ("pta4", "pta8"):
        train_listeners = sorted({u.listener_id for u in train_set})
        stats = fit_conditioning_stats(mcfg.conditioning, [profiles[l] for l in train_listeners])

    opt = AdamW(store, tcfg)
    labels_val = np.array([u.label for u in val_set])
    steps_per_epoch = -(-len(train_set) // tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    step_idx = 0
    best_state, best_epoch, best_val = None, -1, np.inf
    history = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = [train_set[i] for i in order[start:start + tcfg.batch_size]]
            store.zero_grad()
            preds = []
            for u in batch:
                prof = profiles.get(u.listener_id) if mcfg.conditioning != "none" else None
                preds.append(forward(store, mcfg, u, prof, stats, rng, train=True).prediction)
            loss = rmse_loss(preds, np.array([u.label for u in batch]))
            loss.backward()
            opt.step(lr_at(tcfg, step_idx, total_steps))
            step_idx += 1
            epoch_losses.append(loss.item())
        val_rmse = rmse_metric(predict(store, mcfg, val_set, profiles, stats), labels_val)
        history.append((epoch, float(np.mean(epoch_losses)), val_rmse))
        if log_fn:
            log_fn(f"fold {fold_index} epoch {epoch}: train {np.mean(epoch_losses):.4f} "
                   f"val {val_rmse:.4f}")
        if val_rmse < best_val:
            best_val, best_epoch = val_rmse, epoch
            best_state = {k: v.copy() for k, v in store.state().items()}
    store.load_state(best_state)
    return FoldResult(fold_index, store, stats, best_epoch, best_val, history)


# ---------------------------------------------------------------------------
# ensembling


def anchored_mean(values: list[float]) -> float:
    """Mean via an exactly-summed deviation from the first element, so the
    mean of k identical values is bit-identical to that value."""
    x0 = values[0]
    return x0 + math.fsum(v - x0 for v in values) / len(values)


def ensemble_predict(members: list[tuple[ParameterStore, ConditioningStats | None]],
                     cfg: ModelConfig, utts: list[PreparedUtterance],
                     profiles: dict[str, ListenerProfile]) -> np.ndarray:
    """Average the member models' predictions per utterance."""
    if not members:
        raise ConfigError("ensemble needs at least one member")
    per_member = [predict(store, cfg, utts, profiles, stats) for store, stats in members]
    return np.array([anchored_mean([m[i] for m in per_member]) for i in range(len(utts))])


def ensemble_predict_scores(members: list[tuple[ParameterStore, ConditioningStats | None]],
                            cfg: ModelConfig, utts: list[PreparedUtterance],
                            profiles: dict[str, ListenerProfile]) -> np.ndarray:
    """Average per-ear and pooled scores across members, shape [n, 3]."""
    if not members:
        raise ConfigError("ensemble needs at least one member")
    per_member = [predict_scores(store, cfg, utts, profiles, stats)
                  for store, stats in members]
    out = np.empty((len(utts), 3))
    for i in range(len(utts)):
        for j in range(3):
            out[i, j] = anchored_mean([m[i, j] for m in per_member])
    return out
