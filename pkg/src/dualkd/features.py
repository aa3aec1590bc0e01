"""Log-mel front end: Hann-window STFT, HTK mel filterbank, log compression.

Frames are centred: the waveform is reflection-padded by ``window_size // 2``
on each side, so a clip of ``L`` samples yields ``L // hop_size + 1`` frames
and frame ``i`` is centred on sample ``i * hop_size``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_size: int = 2048
    hop_size: int = 256
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.hop_size > self.window_size or self.hop_size < 1:
            raise ConfigurationError(f"hop_size {self.hop_size} must lie in [1, window_size]")
        if self.n_mels < 1:
            raise ConfigurationError("n_mels must be >= 1")
        if self.fmax is not None and self.fmax > self.sample_rate / 2:
            raise ConfigurationError(f"fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2}")
        if self.fmin < 0 or self.fmin >= self.upper_freq:
            raise ConfigurationError(f"fmin {self.fmin} must lie in [0, fmax)")

    @property
    def upper_freq(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def n_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def frame_seconds(self) -> float:
        return self.hop_size / self.sample_rate

    def num_frames(self, n_samples: int) -> int:
        return n_samples // self.hop_size + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft(wave, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Magnitude spectrogram ``[frames, window_size // 2 + 1]``."""
    wave = np.asarray(wave, dtype=np.float64).reshape(-1)
    if wave.size == 0:
        raise InputError("stft: empty waveform")
    half = cfg.window_size // 2
    # reflection needs more samples than the pad width
    mode = "reflect" if wave.size > half else "constant"
    padded = np.pad(wave, (half, half), mode=mode)
    n_frames = cfg.num_frames(wave.size)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_size)[:: cfg.hop_size][:n_frames]
    return np.abs(np.fft.rfft(frames * hann(cfg.window_size), axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular HTK-scale filters ``[n_mels, n_bins]`` with unit peak height."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_freq), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.window_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def apply_filterbank(power: np.ndarray, fb: np.ndarray) -> np.ndarray:
    return power @ fb.T


def log_mel(magnitudes, cfg: FeatureConfig = FeatureConfig(), fb=None) -> np.ndarray:
    """``log(mel(|X|^2) + 1e-10)`` as ``[frames, n_mels]``."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    if np.any(magnitudes < 0):
        raise InputError("log_mel expects nonnegative magnitudes")
    fb = mel_filterbank(cfg) if fb is None else fb
    return np.log(apply_filterbank(magnitudes**2, fb) + LOG_FLOOR)


def logmel_from_wave(wave, cfg: FeatureConfig = FeatureConfig(), fb=None) -> np.ndarray:
    return log_mel(stft(wave, cfg), cfg, fb)


def write_wave(path, wave) -> None:
    """Raw little-endian float32 mono samples."""
    np.asarray(wave, dtype="<f4").tofile(str(path))


def read_wave(path) -> np.ndarray:
    path = Path(path)
    nbytes = path.stat().st_size
    if nbytes % 4:
        raise InputError(f"{path}: size {nbytes} is not a whole number of float32 samples")
    return np.fromfile(str(path), dtype="<f4")
