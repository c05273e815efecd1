"""Acoustic feature plumbing: log-Mel extraction, SFM layer-stack
ingestion, x8 temporal pooling, layer-window selection and the binary
feature file formats (SFMF / LMEL).

Feature containers hold plain float64 numpy arrays; they only become
autodiff tensors once the model wraps them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

SFM_DIM = 1024
N_MELS = 128
LOGMEL_FLOOR = 1e-10
POOL_FACTOR = 8


class BackboneId(Enum):
    CANARY_LIKE = 0
    PARAKEET_LIKE = 1
    SYNTHETIC = 2

    @classmethod
    def from_name(cls, name: str) -> "BackboneId":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigError(f"unknown backbone '{name}'") from None


STREAMS = ("left", "right", "reference")


# ---------------------------------------------------------------------------
# containers


@dataclass
class LogMel:
    """Log-energy Mel matrix [T, 128] plus its frame rate in Hz."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise DataError(f"log-Mel matrix must be [T,{N_MELS}], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("log-Mel matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class SfmStack:
    """Hidden-state stack [L, T, 1024] of one frozen speech encoder.

    layer_indices are the 0-based original encoder indices of the kept
    layers (reports display them 1-based); they must be strictly
    increasing and match L.
    """

    backbone_id: BackboneId
    layers: np.ndarray
    layer_indices: list[int]

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        self.layer_indices = [int(i) for i in self.layer_indices]
        if self.layers.ndim != 3 or self.layers.shape[2] != SFM_DIM:
            raise DataError(f"SFM stack must be [L,T,{SFM_DIM}], got {self.layers.shape}")
        if self.layers.shape[0] != len(self.layer_indices):
            raise DataError(
                f"stack has {self.layers.shape[0]} layers but {len(self.layer_indices)} indices"
            )
        if any(b <= a for a, b in zip(self.layer_indices, self.layer_indices[1:])):
            raise DataError(f"layer indices must be strictly increasing, got {self.layer_indices}")

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def n_frames(self) -> int:
        return self.layers.shape[1]


@dataclass
class StreamFeatures:
    """One stream's features: an SFM stack per backbone plus log-Mel."""

    stacks: list[SfmStack]
    logmel: LogMel

    def __post_init__(self):
        if not self.stacks:
            raise DataError("stream has no SFM stacks")
        t = self.logmel.n_frames
        for s in self.stacks:
            if s.n_frames != t:
                raise DataError(
                    f"stack frame count {s.n_frames} inconsistent with log-Mel {t}"
                )
        seen = set()
        for s in self.stacks:
            if s.backbone_id in seen:
                raise DataError(f"duplicate backbone {s.backbone_id.name} in stream")
            seen.add(s.backbone_id)

    @property
    def n_frames(self) -> int:
        return self.logmel.n_frames

    def stack_for(self, backbone: BackboneId) -> SfmStack:
        for s in self.stacks:
            if s.backbone_id == backbone:
                return s
        raise DataError(f"stream has no stack for backbone {backbone.name}")


@dataclass
class FeatureBundle:
    """All acoustic input for one utterance: left/right ear streams and,
    unless the no-reference ablation is running, the clean reference."""

    utterance_id: str
    left: StreamFeatures
    right: StreamFeatures
    reference: StreamFeatures | None

    def stream(self, name: str) -> StreamFeatures | None:
        if name not in STREAMS:
            raise DataError(f"unknown stream '{name}'")
        return getattr(self, name)

    @property
    def valid_frames(self) -> dict[str, int]:
        out = {"left": self.left.n_frames, "right": self.right.n_frames}
        if self.reference is not None:
            out["reference"] = self.reference.n_frames
        return out


# ---------------------------------------------------------------------------
# log-Mel front end


@dataclass
class LogMelConfig:
    window_s: float = 0.025
    hop_s: float = 0.010
    n_mels: int = N_MELS
    # 2048-point FFT keeps every HTK-mel triangle non-empty for 128 bands
    # at 16 kHz; smaller FFTs leave low/mid filters without any bin.
    n_fft: int = 2048
    floor: float = LOGMEL_FLOOR
    normalize: bool = False  # per-utterance mean/var normalization, off by default


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, n_mels: int = N_MELS, sr: float = 16000.0) -> np.ndarray:
    """Triangular HTK-mel filterbank [n_mels, n_fft_bins] spanning 0..Nyquist.

    Unnormalized triangles: between the first and last peak, each FFT-bin
    column sums to 1 (rising and falling flanks of adjacent filters
    partition unity).
    """
    if n_mels >= n_fft_bins:
        raise ConfigError(f"need n_mels < n_fft_bins, got {n_mels} >= {n_fft_bins}")
    n_fft = 2 * (n_fft_bins - 1)
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft_bins) * sr / n_fft
    lower = edges_hz[:-2, None]
    center = edges_hz[1:-1, None]
    upper = edges_hz[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def filterbank_center_freqs(n_mels: int = N_MELS, sr: float = 16000.0) -> np.ndarray:
    """Peak frequency (Hz) of each mel filter; the geometry oracle for tests."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))[1:-1]


def log_mel(waveform: np.ndarray, sample_rate: float, config: LogMelConfig | None = None) -> LogMel:
    """STFT (25 ms Hann window, 10 ms hop) -> power spectrum -> 128
    triangular mel filters -> natural log with a 1e-10 floor."""
    cfg = config or LogMelConfig()
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1:
        raise DataError(f"waveform must be 1-D, got shape {wave.shape}")
    if sample_rate < 16000:
        raise DataError(f"sample rate must be >= 16 kHz, got {sample_rate}")
    win = int(round(cfg.window_s * sample_rate))
    hop = int(round(cfg.hop_s * sample_rate))
    if wave.size < win:
        raise DataError(f"waveform of {wave.size} samples is shorter than one {win}-sample window")
    if cfg.n_fft < win:
        raise ConfigError(f"n_fft {cfg.n_fft} smaller than window {win}")
    n_frames = 1 + (wave.size - win) // hop
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    starts = np.arange(n_frames) * hop
    frames = wave[starts[:, None] + np.arange(win)[None, :]] * window
    spectrum = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    fb = mel_filterbank(cfg.n_fft // 2 + 1, cfg.n_mels, sample_rate)
    mel = power @ fb.T
    out = np.log(np.maximum(mel, cfg.floor))
    if cfg.normalize:
        out = (out - out.mean()) / max(out.std(), 1e-8)
    return LogMel(out, frame_rate=sample_rate / hop)


def resample_linear(waveform: np.ndarray, sr_in: float, sr_out: float) -> np.ndarray:
    """Basic linear-interpolation resampler."""
    wave = np.asarray(waveform, dtype=np.float64)
    if sr_in == sr_out:
        return wave.copy()
    n_out = int(round(wave.size * sr_out / sr_in))
    t_out = np.arange(n_out) / sr_out
    t_in = np.arange(wave.size) / sr_in
    return np.interp(t_out, t_in, wave)


# ---------------------------------------------------------------------------
# stack transforms


def temporal_pool_x8(stack: SfmStack, factor: int = POOL_FACTOR) -> SfmStack:
    """Average non-overlapping windows of `factor` frames; a final partial
    window is averaged over its actual length, so T' = ceil(T / factor)."""
    layers = stack.layers
    t = layers.shape[1]
    if t < 1:
        raise DataError("cannot pool an empty stack")
    full = t // factor
    chunks = []
    if full:
        chunks.append(layers[:, : full * factor].reshape(layers.shape[0], full, factor, SFM_DIM).mean(axis=2))
    if t % factor:
        chunks.append(layers[:, full * factor :].mean(axis=1, keepdims=True))
    pooled = np.concatenate(chunks, axis=1) if len(chunks) > 1 else chunks[0]
    return SfmStack(stack.backbone_id, pooled, stack.layer_indices)


def pooled_length(t: int, factor: int = POOL_FACTOR) -> int:
    return -(-t // factor)


def select_layers(stack: SfmStack, window: tuple[int, int]) -> SfmStack:
    """Keep layers whose original encoder index lies in [lo, hi] inclusive."""
    lo, hi = int(window[0]), int(window[1])
    if lo > hi:
        raise ConfigError(f"layer window lo {lo} > hi {hi}")
    available = stack.layer_indices
    if lo < available[0] or hi > available[-1]:
        raise ConfigError(
            f"layer window [{lo},{hi}] outside available indices [{available[0]},{available[-1]}]"
        )
    keep = [i for i, idx in enumerate(available) if lo <= idx <= hi]
    if not keep:
        raise ConfigError(f"layer window [{lo},{hi}] selects no layers from {available}")
    return SfmStack(stack.backbone_id, stack.layers[keep], [available[i] for i in keep])


# Files store 0-based encoder indices; configs, reports and sweep tables
# use 1-based indices to match the usual layer numbering. These two helpers
# are the only place the conversion happens.


def display_to_index(display: int) -> int:
    if display < 1:
        raise ConfigError(f"display layer index must be >= 1, got {display}")
    return display - 1


def index_to_display(index: int) -> int:
    return index + 1


def display_window_to_indices(window: tuple[int, int]) -> tuple[int, int]:
    return display_to_index(window[0]), display_to_index(window[1])


# ---------------------------------------------------------------------------
# binary feature files

_SFM_MAGIC = b"SFMF"
_LMEL_MAGIC = b"LMEL"
_FORMAT_VERSION = 1


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            self.blob = f.read()
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated, needed {n} bytes for {what} at byte {self.offset}"
            )
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def done(self) -> None:
        if self.offset != len(self.blob):
            raise FormatError(f"{self.path}: trailing bytes at byte {self.offset}")


def write_sfm_file(path, stack: SfmStack) -> None:
    with open(path, "wb") as f:
        f.write(_SFM_MAGIC)
        f.write(struct.pack("<IB", _FORMAT_VERSION, stack.backbone_id.value))
        f.write(struct.pack("<I", stack.n_layers))
        f.write(struct.pack(f"<{stack.n_layers}I", *stack.layer_indices))
        f.write(struct.pack("<II", stack.n_frames, SFM_DIM))
        f.write(np.ascontiguousarray(stack.layers, dtype="<f8").tobytes())


def read_sfm_file(path) -> SfmStack:
    r = _Reader(path)
    if r.take(4, "magic") != _SFM_MAGIC:
        raise FormatError(f"{path}: bad SFMF magic at byte 0")
    version, backbone = struct.unpack("<IB", r.take(5, "header"))
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported SFMF version {version} at byte 4")
    try:
        backbone_id = BackboneId(backbone)
    except ValueError:
        raise FormatError(f"{path}: unknown backbone id {backbone} at byte 8") from None
    (n_layers,) = struct.unpack("<I", r.take(4, "layer count"))
    indices = list(struct.unpack(f"<{n_layers}I", r.take(4 * n_layers, "layer indices")))
    t, d = struct.unpack("<II", r.take(8, "frame header"))
    if d != SFM_DIM:
        raise FormatError(f"{path}: hidden dim {d} != {SFM_DIM} at byte {r.offset - 4}")
    data = np.frombuffer(r.take(8 * n_layers * t * d, "layer data"), dtype="<f8")
    r.done()
    return SfmStack(backbone_id, data.reshape(n_layers, t, d).astype(np.float64), indices)


def write_logmel_file(path, logmel: LogMel) -> None:
    with open(path, "wb") as f:
        f.write(_LMEL_MAGIC)
        f.write(struct.pack("<III", _FORMAT_VERSION, logmel.n_frames, N_MELS))
        f.write(struct.pack("<d", logmel.frame_rate))
        f.write(np.ascontiguousarray(logmel.frames, dtype="<f8").tobytes())


def read_logmel_file(path) -> LogMel:
    r = _Reader(path)
    if r.take(4, "magic") != _LMEL_MAGIC:
        raise FormatError(f"{path}: bad LMEL magic at byte 0")
    version, t, d = struct.unpack("<III", r.take(12, "header"))
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported LMEL version {version} at byte 4")
    if d != N_MELS:
        raise FormatError(f"{path}: mel dim {d} != {N_MELS} at byte 12")
    (frame_rate,) = struct.unpack("<d", r.take(8, "frame rate"))
    data = np.frombuffer(r.take(8 * t * d, "frame data"), dtype="<f8")
    r.done()
    return LogMel(data.reshape(t, d).astype(np.float64), frame_rate)


def write_bundle(directory, bundle: FeatureBundle) -> dict[str, dict]:
    """Write one SFMF file per (stream, backbone) plus one LMEL per stream.

    Returns the per-stream path mapping in the shape the manifest expects.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths: dict[str, dict] = {}
    for name in STREAMS:
        stream = bundle.stream(name)
        if stream is None:
            continue
        sfm_paths = []
        for stack in stream.stacks:
            p = directory / f"{bundle.utterance_id}_{name}_{stack.backbone_id.name.lower()}.sfmf"
            write_sfm_file(p, stack)
            sfm_paths.append(str(p))
        lp = directory / f"{bundle.utterance_id}_{name}.lmel"
        write_logmel_file(lp, stream.logmel)
        paths[name] = {"sfm": sfm_paths, "logmel": str(lp)}
    return paths


def read_bundle(utterance_id: str, stream_paths: dict[str, dict]) -> FeatureBundle:
    """Assemble a FeatureBundle from per-stream SFMF/LMEL paths."""
    streams: dict[str, StreamFeatures | None] = {"left": None, "right": None, "reference": None}
    for name, entry in stream_paths.items():
        if name not in STREAMS:
            raise DataError(f"unknown stream '{name}' for utterance {utterance_id}")
        stacks = [read_sfm_file(p) for p in entry["sfm"]]
        logmel = read_logmel_file(entry["logmel"])
        streams[name] = StreamFeatures(stacks, logmel)
    if streams["left"] is None or streams["right"] is None:
        raise DataError(f"utterance {utterance_id} must provide left and right streams")
    return FeatureBundle(utterance_id, streams["left"], streams["right"], streams["reference"])
