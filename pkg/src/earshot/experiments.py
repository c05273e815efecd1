"""Desk-scale studies on the synthetic task.

Four report families: weighted RMSE pooling over groups, seen/unseen
stratification by system and by listener, scene-wise error histograms,
plus two training studies (the ablation matrix and the layer-window
sweep).  Everything here consumes in-memory records or specs and returns
plain dataclasses; CSV serialization lives with the command-line layer.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .model import READOUTS, ModelConfig, PreparedUtterance
from .synthetic import SynthSpec, generate_prepared
from .training import TrainConfig, rmse_metric, train_fold


# ---------------------------------------------------------------------------
# pooled RMSE


def pooled_rmse(groups: list[tuple[float, int]]) -> float:
    """Pool per-group RMSEs into the RMSE over the union.

    Exact identity, not an approximation: rmse_all = sqrt(sum n_i r_i^2 /
    sum n_i), because each group contributes n_i * r_i^2 of squared error.
    """
    if not groups:
        raise DataError("pooled_rmse needs at least one group")
    for r, n in groups:
        if n <= 0:
            raise DataError(f"group sizes must be positive, got {n}")
        if r < 0:
            raise DataError(f"RMSE cannot be negative, got {r}")
    total = sum(n for _, n in groups)
    return math.sqrt(math.fsum(n * r * r for r, n in groups) / total)


# ---------------------------------------------------------------------------
# evaluation records and stratification


@dataclass(frozen=True)
class EvalRecord:
    """One scored utterance joined with its ground truth and identities."""

    utterance_id: str
    prediction: float
    label: float
    listener_id: str = ""
    system_id: str = ""
    scene_id: str = ""


@dataclass(frozen=True)
class GroupStat:
    label: str
    rmse: float
    n: int


@dataclass(frozen=True)
class StratifiedReport:
    """Per-identity RMSE bars for one seen/unseen group plus their pool."""

    name: str
    groups: tuple[GroupStat, ...]
    pooled: float
    n: int


def _rmse_of(records: list[EvalRecord]) -> float:
    err = np.array([r.prediction - r.label for r in records])
    return float(np.sqrt(np.mean(err * err)))


def _report(name: str, records: list[EvalRecord], key) -> StratifiedReport:
    if not records:
        return StratifiedReport(name, (), 0.0, 0)
    by_id: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_id.setdefault(key(r), []).append(r)
    stats = tuple(GroupStat(k, _rmse_of(v), len(v)) for k, v in sorted(by_id.items()))
    pooled = pooled_rmse([(g.rmse, g.n) for g in stats])
    return StratifiedReport(name, stats, pooled, len(records))


def stratify(records: list[EvalRecord], train_listeners: set[str],
             train_systems: set[str]) -> dict[str, StratifiedReport]:
    """Split eval records along two axes: system seen in training or not,
    and listener seen in training or not.  Each axis is a partition, so
    seen.n + unseen.n equals the record count on both.  Empty or unknown
    ids count as unseen.
    """
    if not records:
        raise DataError("stratify needs at least one record")
    out = {}
    for axis, key, seen_ids in (("system", lambda r: r.system_id, train_systems),
                                ("listener", lambda r: r.listener_id, train_listeners)):
        seen = [r for r in records if key(r) and key(r) in seen_ids]
        unseen = [r for r in records if not (key(r) and key(r) in seen_ids)]
        out[f"{axis}_seen"] = _report(f"{axis}_seen", seen, key)
        out[f"{axis}_unseen"] = _report(f"{axis}_unseen", unseen, key)
    return out


# ---------------------------------------------------------------------------
# scene histogram


@dataclass(frozen=True)
class SceneHistogram:
    """Distribution of per-scene RMSE: fixed-width bins plus the share of
    scenes whose RMSE exceeds a threshold."""

    scene_rmse: tuple[tuple[str, float, int], ...]  # (scene_id, rmse, n)
    bin_width: float
    bin_edges: tuple[float, ...]   # len(bins) + 1 edges, starting at 0
    bin_counts: tuple[int, ...]
    tail_threshold: float
    tail_share: float


def scene_histogram(records: list[EvalRecord], bin_width: float = 5.0,
                    tail_threshold: float = 40.0) -> SceneHistogram:
    if not records:
        raise DataError("scene_histogram needs at least one record")
    if bin_width <= 0:
        raise ConfigError(f"bin_width must be positive, got {bin_width}")
    by_scene: dict[str, list[EvalRecord]] = {}
    for r in records:
        by_scene.setdefault(r.scene_id, []).append(r)
    rows = tuple((sid, _rmse_of(group), len(group))
                 for sid, group in sorted(by_scene.items()))
    values = [r[1] for r in rows]
    n_bins = max(1, int(math.floor(max(values) / bin_width)) + 1)
    edges = tuple(i * bin_width for i in range(n_bins + 1))
    counts = [0] * n_bins
    for v in values:
        counts[min(int(v // bin_width), n_bins - 1)] += 1
    tail = sum(1 for v in values if v > tail_threshold)
    return SceneHistogram(rows, bin_width, edges, tuple(counts),
                          tail_threshold, tail / len(values))


# ---------------------------------------------------------------------------
# shared study plumbing


def train_val_split(utts: list[PreparedUtterance],
                    n_train: int) -> tuple[list[PreparedUtterance], list[PreparedUtterance]]:
    """Utterance-level split for the desk studies: first n_train train, the
    rest validate.  (Listener-level folds live in training.make_folds; the
    studies here compare architectures on a fixed split instead.)"""
    if not 1 <= n_train < len(utts):
        raise ConfigError(f"n_train {n_train} must leave a non-empty validation "
                          f"set out of {len(utts)} utterances")
    return utts[:n_train], utts[n_train:]


def constant_baseline_rmse(train_utts: list[PreparedUtterance],
                           val_utts: list[PreparedUtterance]) -> float:
    """RMSE of always predicting the training-label mean."""
    mean = float(np.mean([u.label for u in train_utts]))
    return rmse_metric(np.full(len(val_utts), mean),
                       np.array([u.label for u in val_utts]))


# ---------------------------------------------------------------------------
# ablation matrix


ABLATION_VARIANTS = {
    "no_reference": {"use_reference": False},
    "no_conditioning": {"conditioning": "none"},
    "average_ear": {"ear_pooling": "average"},
}


@dataclass(frozen=True)
class AblationRow:
    variant: str   # "full" or a key of ABLATION_VARIANTS
    seed: int
    val_rmse: float


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def margin(self, variant: str, seed: int) -> float:
        """Ablated minus full validation RMSE; positive means the removed
        ingredient was helping."""
        by = {(r.variant, r.seed): r.val_rmse for r in self.rows}
        return by[(variant, seed)] - by[("full", seed)]

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def wins(self, variant: str) -> int:
        return sum(self.margin(variant, s) > 0 for s in self.seeds())

    def majority(self, variant: str) -> bool:
        seeds = self.seeds()
        return self.wins(variant) * 2 > len(seeds)


def run_ablations(base_cfg: ModelConfig, tcfg: TrainConfig, data_spec: SynthSpec,
                  n_train: int, n_seeds: int = 5, log_fn=None) -> AblationReport:
    """Train the full model and each single-ingredient removal on n_seeds
    fresh datasets.  Within a seed all variants share the same data and the
    same training seed, so differences are attributable to the ablation.
    """
    if n_seeds < 1:
        raise ConfigError(f"n_seeds must be >= 1, got {n_seeds}")
    variants = {"full": base_cfg}
    for name, changes in ABLATION_VARIANTS.items():
        variants[name] = dataclasses.replace(base_cfg, **changes)
    rows = []
    for s in range(n_seeds):
        dspec = dataclasses.replace(data_spec, seed=data_spec.seed + s)
        tc = dataclasses.replace(tcfg, seed=tcfg.seed + s)
        utts, profiles = generate_prepared(dspec, base_cfg)
        train_set, val_set = train_val_split(utts, n_train)
        for name, cfg in variants.items():
            res = train_fold(cfg, tc, train_set, val_set, profiles)
            rows.append(AblationRow(name, s, res.best_val_rmse))
            if log_fn:
                log_fn(f"ablation seed {s} {name}: val RMSE {res.best_val_rmse:.4f}")
    return AblationReport(tuple(rows))


# ---------------------------------------------------------------------------
# layer-window sweep


@dataclass(frozen=True)
class SweepSpec:
    """Grid of candidate layer windows crossed with readout variants.

    window_size is 1 (single layer) or 4 (contiguous block).  Single-layer
    sweeps skip the listener_token readout: with one content token the
    layer sequence is degenerate and reading the score off the conditioning
    token alone is not meaningful.
    """

    window_size: int
    candidates: tuple[tuple[int, int], ...]   # 1-based display windows, inclusive
    readouts: tuple[str, ...] = ("mean",)

    def __post_init__(self):
        if self.window_size not in (1, 4):
            raise ConfigError(f"window_size must be 1 or 4, got {self.window_size}")
        if not self.candidates:
            raise ConfigError("sweep needs at least one candidate window")
        for lo, hi in self.candidates:
            if hi - lo + 1 != self.window_size:
                raise ConfigError(f"candidate {lo}-{hi} is not {self.window_size} layers")
        if not self.readouts:
            raise ConfigError("sweep needs at least one readout")
        for r in self.readouts:
            if r not in READOUTS:
                raise ConfigError(f"unknown readout '{r}'")
        if self.window_size == 1 and "listener_token" in self.readouts:
            raise ConfigError("single-layer sweeps do not support the "
                              "listener_token readout")


@dataclass(frozen=True)
class SweepRow:
    window: tuple[int, int]
    readout: str
    val_rmse: float | None
    error: str = ""


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]

    def argmin(self, readout: str | None = None) -> SweepRow:
        pool = [r for r in self.rows if r.val_rmse is not None
                and (readout is None or r.readout == readout)]
        if not pool:
            raise DataError("no successful sweep cells to take the argmin of")
        return min(pool, key=lambda r: r.val_rmse)


def synthetic_dataset_factory(data_spec: SynthSpec):
    """dataset_for callable over the generator: every window slices the
    same underlying utterances, since generation is seed-deterministic."""
    return lambda cfg: generate_prepared(data_spec, cfg)


def run_sweep(sweep: SweepSpec, base_cfg: ModelConfig, tcfg: TrainConfig,
              n_train: int, dataset_for, log_fn=None) -> SweepReport:
    """Train one model per (window, readout) cell and record its best
    validation RMSE.  `dataset_for(cfg)` returns (utterances, profiles)
    prepared for that cell's config; a cell that raises is recorded with
    the error message, not fatal.
    """
    rows = []
    for win in sweep.candidates:
        for ro in sweep.readouts:
            cfg = dataclasses.replace(base_cfg, layer_window=win, readout=ro)
            try:
                utts, profiles = dataset_for(cfg)
                train_set, val_set = train_val_split(utts, n_train)
                res = train_fold(cfg, tcfg, train_set, val_set, profiles)
                rows.append(SweepRow(win, ro, res.best_val_rmse))
                if log_fn:
                    log_fn(f"sweep {win[0]}-{win[1]}/{ro}: val RMSE "
                           f"{res.best_val_rmse:.4f}")
            except Exception as e:  # cell failure is a result, not a crash
                rows.append(SweepRow(win, ro, None, f"{type(e).__name__}: {e}"))
                if log_fn:
                    log_fn(f"sweep {win[0]}-{win[1]}/{ro}: failed: {e}")
    return SweepReport(tuple(rows))
