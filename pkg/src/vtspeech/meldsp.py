"""Waveform <-> log-mel <-> discrete speech-frame conversions.

The discrete representation maps each log-mel value to one of 16 evenly
spaced levels between a dataset minimum ``m`` and maximum ``M``; levels are
inclusive of both endpoints. A Griffin-Lim reconstructor stands in for a
neural vocoder so generated frames can be listened to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensorfile
from .errors import (
    CorruptSequenceError,
    DegenerateRangeError,
    EmptyInputError,
    FormatError,
    ShapeError,
)

EOS_CLASS = 16  # reserved per-channel end-of-sequence class; never a level index


@dataclass(frozen=True)
class AudioSignal:
    """Mono waveform with amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"audio must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ShapeError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ShapeError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    """Analysis parameters. Defaults give 40 frames/second at 16 kHz.

    Frames are non-overlapping by default (hop == window) and taken with a
    rectangular window, which keeps the short-time transform exactly
    invertible frame by frame.
    """

    sample_rate: int = 16000
    window_len: int = 400
    hop_len: int = 400
    fft_size: int = 512
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if not (0 < self.hop_len <= self.window_len <= self.fft_size):
            raise ShapeError(
                f"need hop <= window <= fft, got {self.hop_len}/{self.window_len}/{self.fft_size}"
            )
        if self.n_mels < 1:
            raise ShapeError("n_mels must be >= 1")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ShapeError(f"need 0 <= fmin < fmax <= nyquist, got {self.fmin}/{self.fmax}")
        if self.log_floor <= 0:
            raise ShapeError("log_floor must be positive")

    @property
    def frame_hop_seconds(self) -> float:
        return self.hop_len / self.sample_rate


@dataclass(frozen=True)
class MelSpec:
    """T x F matrix of natural-log mel energies."""

    values: np.ndarray
    frame_hop_seconds: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"mel spec must be T x F, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ShapeError("mel spec contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DMelCodebook:
    """16 evenly spaced levels spanning [m, M] inclusive."""

    m: float
    M: float
    bits: int = 4

    def __post_init__(self):
        if not (self.m < self.M):
            raise DegenerateRangeError(f"need m < M, got m={self.m}, M={self.M}")
        if self.bits < 1:
            raise ShapeError("bits must be >= 1")

    @property
    def n_levels(self) -> int:
        return 2**self.bits

    @property
    def levels(self) -> np.ndarray:
        return np.linspace(self.m, self.M, self.n_levels)

    @property
    def delta(self) -> float:
        return (self.M - self.m) / (self.n_levels - 1)


@dataclass(frozen=True)
class DMelSeq:
    """T x F grid of level indices in {0..15}."""

    indices: np.ndarray
    frame_hop_seconds: float

    def __post_init__(self):
        indices = np.asarray(self.indices)
        if indices.ndim != 2:
            raise ShapeError(f"discrete speech must be T x F, got shape {indices.shape}")
        if indices.size and not np.issubdtype(indices.dtype, np.integer):
            raise ShapeError("discrete speech indices must be integers")
        object.__setattr__(self, "indices", indices.astype(np.int64))

    @property
    def n_frames(self) -> int:
        return self.indices.shape[0]

    @property
    def n_mels(self) -> int:
        return self.indices.shape[1]


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank_cached(sample_rate, fft_size, n_mels, fmin, fmax):
    n_bins = fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / fft_size
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, center, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / max(center - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        fb[i] *= 2.0 / (hi - lo)  # unit area in Hz
    return fb


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular, area-normalized filters: (n_mels, fft_size//2 + 1)."""
    return _filterbank_cached(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.fmin, cfg.fmax)


def _frame(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    n = (len(samples) - cfg.window_len) // cfg.hop_len + 1
    idx = np.arange(n)[:, None] * cfg.hop_len + np.arange(cfg.window_len)[None, :]
    return samples[idx]


def _stft_power(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    frames = _frame(samples, cfg)
    spectrum = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    return np.abs(spectrum) ** 2


def compute_logmel(audio: AudioSignal, cfg: MelConfig) -> MelSpec:
    """Natural-log mel energies; T = floor((len - window)/hop) + 1, no padding."""
    if audio.sample_rate != cfg.sample_rate:
        raise ShapeError(f"audio rate {audio.sample_rate} != config rate {cfg.sample_rate}")
    if len(audio.samples) < cfg.window_len:
        raise EmptyInputError(
            f"audio has {len(audio.samples)} samples, need at least {cfg.window_len}"
        )
    power = _stft_power(audio.samples, cfg)
    mel = power @ mel_filterbank(cfg).T
    values = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpec(values=values, frame_hop_seconds=cfg.frame_hop_seconds)


def fit_codebook(specs: Iterable[MelSpec], bits: int = 4) -> DMelCodebook:
    """Global min/max over every cell of every spec; endpoints become levels."""
    lo = np.inf
    hi = -np.inf
    seen = False
    for spec in specs:
        if spec.values.size == 0:
            continue
        seen = True
        lo = min(lo, float(spec.values.min()))
        hi = max(hi, float(spec.values.max()))
    if not seen:
        raise EmptyInputError("need at least one non-empty mel spec")
    if lo == hi:
        raise DegenerateRangeError(f"all mel values equal ({lo}); cannot span a range")
    return DMelCodebook(m=lo, M=hi, bits=bits)


def discretize(spec: MelSpec, cb: DMelCodebook) -> DMelSeq:
    """Nearest level per cell; exact ties resolve to the lower index."""
    dist = np.abs(spec.values[:, :, None] - cb.levels[None, None, :])
    indices = np.argmin(dist, axis=2)  # argmin takes the first (lower) index on ties
    return DMelSeq(indices=indices, frame_hop_seconds=spec.frame_hop_seconds)


def invert(seq: DMelSeq, cb: DMelCodebook) -> MelSpec:
    """Indices back to level values."""
    idx = seq.indices
    if idx.size and (idx.min() < 0 or idx.max() >= cb.n_levels):
        raise CorruptSequenceError(
            f"indices outside [0, {cb.n_levels - 1}]: min={idx.min()}, max={idx.max()}"
        )
    return MelSpec(values=cb.levels[idx], frame_hop_seconds=seq.frame_hop_seconds)


def _istft_from_frames(frames_time: np.ndarray, cfg: MelConfig, n_samples: int) -> np.ndarray:
    # Rectangular-window overlap-add; divide by per-sample coverage.
    out = np.zeros(n_samples)
    cover = np.zeros(n_samples)
    for i in range(frames_time.shape[0]):
        start = i * cfg.hop_len
        out[start : start + cfg.window_len] += frames_time[i, : cfg.window_len]
        cover[start : start + cfg.window_len] += 1.0
    cover[cover == 0] = 1.0
    return out / cover


def griffin_lim(spec: MelSpec, cfg: MelConfig, iterations: int = 60) -> AudioSignal:
    """Phase-retrieval reconstruction from log-mel energies.

    Mel-to-linear uses the filterbank pseudo-inverse with a non-negativity
    clamp; phases start at zero so the result is deterministic.
    """
    if iterations < 1:
        raise ShapeError("iterations must be >= 1")
    if spec.n_mels != cfg.n_mels:
        raise ShapeError(f"spec has {spec.n_mels} mels, config expects {cfg.n_mels}")
    fb = mel_filterbank(cfg)
    # Cells at the floor are indistinguishable from true zeros; subtract the
    # floor so silent frames invert to silence instead of leaking energy.
    mel_power = np.maximum(np.exp(spec.values) - cfg.log_floor, 0.0)
    power = np.maximum(mel_power @ np.linalg.pinv(fb).T, 0.0)
    magnitude = np.sqrt(power)
    n_samples = (spec.n_frames - 1) * cfg.hop_len + cfg.window_len

    phase = np.zeros_like(magnitude)
    x = None
    for _ in range(iterations):
        frames_time = np.fft.irfft(magnitude * np.exp(1j * phase), n=cfg.fft_size, axis=1)
        x = _istft_from_frames(frames_time, cfg, n_samples)
        phase = np.angle(np.fft.rfft(_frame(x, cfg), n=cfg.fft_size, axis=1))
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return AudioSignal(samples=x, sample_rate=cfg.sample_rate)


def spectral_residual(audio: AudioSignal, spec: MelSpec, cfg: MelConfig) -> float:
    """Relative distance between the waveform's linear magnitude and the
    magnitude implied by ``spec`` (pseudo-inverse target). Used to compare
    reconstruction quality across iteration counts."""
    fb = mel_filterbank(cfg)
    mel_power = np.maximum(np.exp(spec.values) - cfg.log_floor, 0.0)
    target = np.sqrt(np.maximum(mel_power @ np.linalg.pinv(fb).T, 0.0))
    got = np.sqrt(_stft_power(audio.samples, cfg))
    n = min(got.shape[0], target.shape[0])
    return float(np.linalg.norm(got[:n] - target[:n]) / max(np.linalg.norm(target[:n]), 1e-12))


# --- serialization -----------------------------------------------------------

def save_mel_spec(path, spec: MelSpec) -> None:
    tensorfile.save_tensors(
        path, {"values": spec.values}, attrs={"frame_hop_seconds": spec.frame_hop_seconds}
    )


def load_mel_spec(path) -> MelSpec:
    tensors, attrs = tensorfile.load_tensors(path)
    return MelSpec(values=tensors["values"], frame_hop_seconds=float(attrs["frame_hop_seconds"]))


def save_dmel(path, seq: DMelSeq) -> None:
    tensorfile.save_tensors(
        path,
        {"indices": seq.indices.astype(np.int64)},
        attrs={"frame_hop_seconds": seq.frame_hop_seconds},
    )


def load_dmel(path) -> DMelSeq:
    tensors, attrs = tensorfile.load_tensors(path)
    return DMelSeq(indices=tensors["indices"], frame_hop_seconds=float(attrs["frame_hop_seconds"]))


def save_codebook(path, cb: DMelCodebook) -> None:
    Path(path).write_text(f"{cb.m!r} {cb.M!r} {cb.bits}\n", encoding="utf-8")


def load_codebook(path) -> DMelCodebook:
    parts = Path(path).read_text(encoding="utf-8").split()
    if len(parts) != 3:
        raise FormatError(f"{path}: expected 'm M bits', got {parts!r}")
    return DMelCodebook(m=float(parts[0]), M=float(parts[1]), bits=int(parts[2]))
