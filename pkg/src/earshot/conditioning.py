"""Listener hearing-loss descriptors and their injection into the model.

A listener is described by an 8-band pure-tone audiogram per ear plus a
severity class. Conditioning turns that into a single extra token for the
layer-stage sequence, in one of four modes:

  none         no token
  categorical  learned embedding per severity class
  pta4         better/worse-agnostic both-ear PTA4 scalar -> learned linear
  pta8         per-band both-ear means [8] -> learned linear

PTA inputs are standardized with statistics fitted on the training fold
only; the fitted mean/std travel with the checkpoint sidecar, never inside
the weight file.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tz
from .errors import ConfigError, DataError
from .tensor import ParameterStore, Tensor

log = logging.getLogger("earshot")

AUDIOGRAM_FREQS_HZ = (250, 500, 1000, 2000, 3000, 4000, 6000, 8000)
PTA4_FREQS_HZ = (500, 1000, 2000, 4000)
_PTA4_COLS = tuple(AUDIOGRAM_FREQS_HZ.index(f) for f in PTA4_FREQS_HZ)

CONDITIONING_MODES = ("none", "categorical", "pta4", "pta8")


class Severity(Enum):
    MILD = 0
    MODERATE = 1
    MODERATELY_SEVERE = 2

    @classmethod
    def from_name(cls, name: str) -> "Severity":
        key = name.strip().upper().replace(" ", "_").replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise DataError(f"unknown severity '{name}'") from None


@dataclass
class ListenerProfile:
    listener_id: str
    severity: Severity
    audiogram_left: np.ndarray   # dB HL at AUDIOGRAM_FREQS_HZ
    audiogram_right: np.ndarray

    def __post_init__(self):
        self.audiogram_left = np.asarray(self.audiogram_left, dtype=np.float64)
        self.audiogram_right = np.asarray(self.audiogram_right, dtype=np.float64)
        for name, a in (("left", self.audiogram_left), ("right", self.audiogram_right)):
            if a.shape != (8,):
                raise DataError(
                    f"listener {self.listener_id}: {name} audiogram must have 8 bands, got {a.shape}"
                )
            if not np.all(np.isfinite(a)):
                raise DataError(f"listener {self.listener_id}: non-finite {name} audiogram")


def pta4(profile: ListenerProfile) -> float:
    """Both-ear mean threshold over 500/1000/2000/4000 Hz."""
    cols = list(_PTA4_COLS)
    return float((profile.audiogram_left[cols].mean() + profile.audiogram_right[cols].mean()) / 2.0)


def pta8(profile: ListenerProfile) -> np.ndarray:
    """Per-band mean of the two ears' thresholds, [8]."""
    return (profile.audiogram_left + profile.audiogram_right) / 2.0


# WHO-style grading from PTA4, half-open dB bands.
_GRADE_BANDS = (
    (20.0, 35.0, Severity.MILD),
    (35.0, 50.0, Severity.MODERATE),
    (50.0, 65.0, Severity.MODERATELY_SEVERE),
)


def grade_from_pta4(value: float) -> Severity | None:
    """Severity grade implied by a PTA4 value; None outside the graded range."""
    for lo, hi, grade in _GRADE_BANDS:
        if lo <= value < hi:
            return grade
    return None


def check_profile_consistency(profile: ListenerProfile) -> list[str]:
    """Warn (never fail) when the labelled severity disagrees with the
    grade the audiogram implies."""
    warnings = []
    p = pta4(profile)
    implied = grade_from_pta4(p)
    if implied is None:
        warnings.append(
            f"listener {profile.listener_id}: PTA4 {p:.1f} dB outside the graded 20-65 dB range"
        )
    elif implied != profile.severity:
        warnings.append(
            f"listener {profile.listener_id}: labelled {profile.severity.name} but "
            f"PTA4 {p:.1f} dB grades as {implied.name}"
        )
    for msg in warnings:
        log.warning(msg)
    return warnings


# ---------------------------------------------------------------------------
# standardization + token construction


@dataclass(frozen=True)
class ConditioningStats:
    """Train-fold mean/std used to standardize PTA inputs."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "ConditioningStats":
        v = np.atleast_2d(np.asarray(values, dtype=np.float64))
        if v.shape[0] < 1:
            raise DataError("cannot fit conditioning stats on an empty set")
        return cls(v.mean(axis=0), np.maximum(v.std(axis=0), 1e-8))

    def transform(self, value: np.ndarray) -> np.ndarray:
        return (np.atleast_1d(np.asarray(value, dtype=np.float64)) - self.mean) / self.std


def conditioning_input_dim(mode: str) -> int:
    if mode == "pta4":
        return 1
    if mode == "pta8":
        return 8
    raise ConfigError(f"mode '{mode}' has no numeric conditioning input")


def init_conditioning(store: ParameterStore, mode: str, d_model: int,
                      rng: np.random.Generator) -> None:
    if mode == "none":
        return
    if mode == "categorical":
        store.register("cond.embed", Tensor(rng.normal(0.0, 0.02, size=(len(Severity), d_model))))
    elif mode in ("pta4", "pta8"):
        n = conditioning_input_dim(mode)
        bound = 1.0 / np.sqrt(n)
        store.register("cond.proj.w", Tensor(rng.uniform(-bound, bound, size=(n, d_model))))
        store.register("cond.proj.b", Tensor(np.zeros(d_model)))
    else:
        raise ConfigError(f"unknown conditioning mode '{mode}'")


def conditioning_param_count(mode: str, d_model: int) -> int:
    if mode == "none":
        return 0
    if mode == "categorical":
        return len(Severity) * d_model
    if mode in ("pta4", "pta8"):
        return conditioning_input_dim(mode) * d_model + d_model
    raise ConfigError(f"unknown conditioning mode '{mode}'")


def conditioning_token(store: ParameterStore, mode: str, profile: ListenerProfile,
                       stats: ConditioningStats | None) -> Tensor | None:
    """Build the [1, d_model] listener token, or None in mode 'none'."""
    if mode == "none":
        return None
    if mode == "categorical":
        return tz.narrow(store["cond.embed"], 0, profile.severity.value, 1)
    if mode in ("pta4", "pta8"):
        if stats is None:
            raise ConfigError(f"conditioning mode '{mode}' requires fitted stats")
        raw = np.array([pta4(profile)]) if mode == "pta4" else pta8(profile)
        z = stats.transform(raw)
        return tz.linear(Tensor(z.reshape(1, -1)), store["cond.proj.w"], store["cond.proj.b"])
    raise ConfigError(f"unknown conditioning mode '{mode}'")


def fit_conditioning_stats(mode: str, profiles: list[ListenerProfile]) -> ConditioningStats | None:
    if mode in ("none", "categorical"):
        return None
    if mode == "pta4":
        return ConditioningStats.fit(np.array([[pta4(p)] for p in profiles]))
    if mode == "pta8":
        return ConditioningStats.fit(np.stack([pta8(p) for p in profiles]))
    raise ConfigError(f"unknown conditioning mode '{mode}'")
