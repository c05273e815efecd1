"""Synthetic corpus with a planted, recoverable intelligibility signal.

Each utterance carries two latent clarity values cL, cR in [0, 1], one per
ear. Every layer of every stream is "low-rank signal + white noise": a
fixed (per backbone) orthonormal basis carries strong, mostly
time-constant coordinates on top of unit white noise. Inside the planted
layer window each ear is a mixture of the reference tokens and fresh
noise,

    ear = c * ref + (1 - c) * noise

The energy of the mixture only reveals c^2 + (1-c)^2, which is symmetric
in c <-> 1-c; resolving the ambiguity — and hence predicting well —
requires correlating the ear against the reference. Layers outside the
planted window have the same marginal structure but coordinates
independent of the reference, and log-Mel matrices are plain noise.

One basis direction carries a per-utterance "content difficulty"
coordinate that only the reference stream encodes cleanly. Labels are

    clamp(100 * max(cL, cR) - penalty(severity), 0, 100)
        - content_scale * difficulty + noise

so best-ear pooling, the reference stream and listener conditioning are
each worth real error reduction, and their ablations measurably hurt.

Utterances are materialized lazily, one at a time, from
SeedSequence(seed, (1, index)); nothing scales with corpus size except
the output files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .conditioning import ListenerProfile, Severity
from .dsp import (N_MELS, SFM_DIM, BackboneId, FeatureBundle, LogMel, SfmStack,
                  StreamFeatures, display_window_to_indices, write_bundle)
from .errors import ConfigError
from .model import ModelConfig, PreparedUtterance, prepare_bundle


@dataclass(frozen=True)
class SynthSpec:
    n_utterances: int = 128
    listeners_per_class: tuple[int, int, int] = (3, 3, 3)
    t_range: tuple[int, int] = (16, 32)
    available_window: tuple[int, int] = (11, 16)  # 1-based display, inclusive
    planted_window: tuple[int, int] = (12, 15)    # 1-based display, inclusive
    backbones: tuple[str, ...] = ("synthetic",)
    planted_rank: int = 4       # dimension of the shared signal subspace
    planted_scale: float = 8.0  # coordinate std
    white_scale: float = 0.3    # per-dim std of the white token-noise floor
    base_fraction: float = 0.85  # share of coord variance held constant over time
    signature_scale: float = 12.0  # per-layer fixed beacon vectors, 0 disables
    content_scale: float = 5.0  # label points per std of reference-borne difficulty
    penalties: tuple[float, float, float] = (0.0, 10.0, 20.0)  # per severity class
    label_noise: float = 2.0
    n_scenes: int = 4
    n_systems: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_utterances < 1:
            raise ConfigError("need at least one utterance")
        if any(n < 1 for n in self.listeners_per_class):
            raise ConfigError("every severity class needs at least one listener")
        if not (1 <= self.t_range[0] <= self.t_range[1]):
            raise ConfigError(f"bad t_range {self.t_range}")
        a, p = self.available_window, self.planted_window
        if not (1 <= a[0] <= a[1]):
            raise ConfigError(f"bad available_window {a}")
        if not (a[0] <= p[0] <= p[1] <= a[1]):
            raise ConfigError(f"planted_window {p} not inside available_window {a}")
        if self.planted_rank < 1 or self.planted_scale <= 0 or self.white_scale <= 0:
            raise ConfigError(f"bad planted subspace: rank {self.planted_rank}, "
                              f"scale {self.planted_scale}, white {self.white_scale}")
        if not 0.0 <= self.base_fraction <= 1.0:
            raise ConfigError(f"base_fraction must be in [0,1], got {self.base_fraction}")
        if self.content_scale < 0 or self.signature_scale < 0:
            raise ConfigError(f"content_scale and signature_scale must be >= 0, got "
                              f"{self.content_scale}, {self.signature_scale}")
        if self.n_scenes < 1 or self.n_systems < 1:
            raise ConfigError(f"n_scenes and n_systems must be >= 1, got "
                              f"{self.n_scenes}, {self.n_systems}")
        for b in self.backbones:
            BackboneId.from_name(b)


# PTA4 bands (dB HL) that grade into each severity class.
_CLASS_PTA4 = {
    Severity.MILD: (21.0, 34.0),
    Severity.MODERATE: (36.0, 49.0),
    Severity.MODERATELY_SEVERE: (51.0, 64.0),
}


def make_listeners(spec: SynthSpec) -> dict[str, ListenerProfile]:
    """Listeners with audiograms whose PTA4 lands inside their class band."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(0, 0)))
    profiles: dict[str, ListenerProfile] = {}
    i = 0
    for sev, count in zip(Severity, spec.listeners_per_class):
        lo, hi = _CLASS_PTA4[sev]
        for _ in range(count):
            target = rng.uniform(lo, hi)
            ears = []
            for _ in range(2):
                a = target + rng.normal(0.0, 4.0, size=8)
                ears.append(a)
            # shift both ears so the both-ear PTA4 hits the target exactly
            cols = [1, 2, 3, 5]  # 500/1000/2000/4000 Hz
            actual = (ears[0][cols].mean() + ears[1][cols].mean()) / 2.0
            ears = [a + (target - actual) for a in ears]
            lid = f"L{i:03d}"
            profiles[lid] = ListenerProfile(lid, sev, ears[0], ears[1])
            i += 1
    return profiles


def planted_basis(spec: SynthSpec, backbone_index: int) -> np.ndarray:
    """Fixed orthonormal basis [1024, rank + 1 + n_layers]: `rank` columns
    of shared-signal subspace, one content-difficulty direction, then one
    signature direction per available layer. A dataset-wide constant per
    backbone."""
    n_layers = spec.available_window[1] - spec.available_window[0] + 1
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(2, backbone_index)))
    q, _ = np.linalg.qr(rng.normal(size=(SFM_DIM, spec.planted_rank + 1 + n_layers)))
    return q


def _mel_map(spec: SynthSpec, backbone_index: int) -> np.ndarray:
    """Fixed [1024, 128] projection turning a token field into its log-Mel."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(3, backbone_index)))
    return rng.normal(size=(SFM_DIM, N_MELS)) / np.sqrt(SFM_DIM)


def _mix(c: float, ref: np.ndarray, noise: np.ndarray) -> np.ndarray:
    return c * ref + (1.0 - c) * noise


def clarity_to_label(c_left: float, c_right: float, severity: Severity,
                     spec: SynthSpec, content: float = 0.0) -> float:
    base = np.clip(100.0 * max(c_left, c_right) - spec.penalties[severity.value], 0.0, 100.0)
    return float(base - spec.content_scale * content)


def generate_utterance(spec: SynthSpec, index: int,
                       profiles: dict[str, ListenerProfile]) -> tuple[FeatureBundle, dict]:
    """Materialize utterance `index`: a feature bundle plus its manifest row
    (without file paths)."""
    if not 0 <= index < spec.n_utterances:
        raise ConfigError(f"utterance index {index} outside [0,{spec.n_utterances})")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(1, index)))
    listener_ids = sorted(profiles)
    lid = listener_ids[index % len(listener_ids)]
    severity = profiles[lid].severity
    t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
    c = {"left": float(rng.uniform()), "right": float(rng.uniform())}

    lo, hi = display_window_to_indices(spec.available_window)
    indices = list(range(lo, hi + 1))
    p_lo, p_hi = display_window_to_indices(spec.planted_window)
    planted = np.array([p_lo <= i <= p_hi for i in indices])

    content = float(rng.normal())
    streams: dict[str, StreamFeatures] = {}
    ref_stacks, ear_stacks = [], {"left": [], "right": []}
    mel_mix = {"left": [], "right": [], "reference": []}
    for bi, b in enumerate(spec.backbones):
        bid = BackboneId.from_name(b)
        basis = planted_basis(spec, bi)
        g, r = spec.planted_scale, spec.planted_rank
        b_std = g * np.sqrt(spec.base_fraction)
        w_std = g * np.sqrt(1.0 - spec.base_fraction)
        signatures = spec.signature_scale * basis[:, r + 1:].T  # [n_layers, 1024]
        mel_map = _mel_map(spec, bi)

        def field(content_coord):
            # mostly time-constant coordinates: a per-layer base plus wiggle,
            # and every layer's fixed signature beacon
            base = rng.normal(0.0, b_std, size=(len(indices), 1, r + 1))
            wiggle = rng.normal(0.0, w_std, size=(len(indices), t, r + 1))
            coords = base + wiggle
            if content_coord is not None:
                coords[:, :, r] = g * content_coord
            out = coords @ basis[:, : r + 1].T
            out += spec.white_scale * rng.normal(size=(len(indices), t, SFM_DIM))
            return out + signatures[:, None, :]

        ref = field(content)
        ref_stacks.append(SfmStack(bid, ref, indices))
        mel_mix["reference"].append(ref.mean(axis=0) @ mel_map)
        for ear in ("left", "right"):
            noise = field(None)
            layers = np.where(planted[:, None, None], _mix(c[ear], ref, noise), noise)
            ear_stacks[ear].append(SfmStack(bid, layers, indices))
            mel_mix[ear].append(layers.mean(axis=0) @ mel_map)

    def logmel_for(name: str) -> LogMel:
        # log-Mel as a fixed linear image of the stream's own token field:
        # carries nothing a model with that stream could not already see
        m = np.mean(mel_mix[name], axis=0)
        return LogMel(m + spec.white_scale * rng.normal(size=(t, N_MELS)), frame_rate=100.0)

    for ear in ("left", "right"):
        streams[ear] = StreamFeatures(ear_stacks[ear], logmel_for(ear))
    streams["reference"] = StreamFeatures(ref_stacks, logmel_for("reference"))

    label = clarity_to_label(c["left"], c["right"], severity, spec, content)
    label = float(np.clip(label + rng.normal(0.0, spec.label_noise), 0.0, 100.0))
    uid = f"U{index:05d}"
    bundle = FeatureBundle(uid, streams["left"], streams["right"], streams["reference"])
    meta = {"utterance_id": uid, "listener_id": lid,
            "scene_id": f"S{index % spec.n_scenes:02d}",
            "system_id": f"Y{(index // spec.n_scenes) % spec.n_systems:02d}",
            "label": round(label, 6)}
    return bundle, meta


def generate_prepared(spec: SynthSpec, cfg: ModelConfig,
                      indices: list[int] | None = None
                      ) -> tuple[list[PreparedUtterance], dict[str, ListenerProfile]]:
    """In-memory route: generate and immediately pool/select each utterance."""
    profiles = make_listeners(spec)
    out = []
    for i in indices if indices is not None else range(spec.n_utterances):
        bundle, meta = generate_utterance(spec, i, profiles)
        prep = prepare_bundle(bundle, cfg, meta["listener_id"], meta["label"])
        prep.scene_id = meta["scene_id"]
        prep.system_id = meta["system_id"]
        out.append(prep)
    return out, profiles


def generate_dataset(spec: SynthSpec, out_dir) -> Path:
    """On-disk route: write feature files, manifest.json and listeners.json.

    Returns the manifest path. Utterances are generated and written one at
    a time; memory stays flat in corpus size.
    """
    from .data import write_listeners, write_manifest  # avoid import cycle

    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    profiles = make_listeners(spec)
    rows = []
    for i in range(spec.n_utterances):
        bundle, meta = generate_utterance(spec, i, profiles)
        paths = write_bundle(features_dir, bundle)
        meta["streams"] = {
            name: {"sfm": [str(Path(p).relative_to(out_dir)) for p in entry["sfm"]],
                   "logmel": str(Path(entry["logmel"]).relative_to(out_dir))}
            for name, entry in paths.items()}
        rows.append(meta)
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, rows, seed=spec.seed)
    write_listeners(out_dir / "listeners.json", profiles)
    return manifest_path
