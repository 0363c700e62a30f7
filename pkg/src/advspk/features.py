"""Differentiable log-mel filterbank front-end.

Waveform -> Hamming-windowed frames -> DFT power via explicit cosine/sine
matrices (two matmuls, so gradients flow) -> triangular mel filters ->
log with a small floor. The DFT-as-matmul choice trades FFT speed for a
trivially differentiable graph, which is all the attack loop needs at
this scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

LOG_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 8000
    frame_len: int = 200
    hop: int = 80
    n_fft: int = 256
    n_mels: int = 40
    fmin: float = 50.0
    fmax: float = 4000.0

    def __post_init__(self):
        if self.frame_len > self.n_fft:
            raise ValueError(f"frame_len {self.frame_len} > n_fft {self.n_fft}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError(f"need 0 <= fmin < fmax <= sample_rate/2, got [{self.fmin}, {self.fmax}]")
        if self.n_mels < 2:
            raise ValueError(f"n_mels must be >= 2, got {self.n_mels}")
        if self.hop < 1 or self.frame_len < 1:
            raise ValueError("frame_len and hop must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _cached_window(frame_len: int) -> np.ndarray:
    return np.hamming(frame_len)


@lru_cache(maxsize=8)
def _cached_dft(frame_len: int, n_fft: int) -> tuple[np.ndarray, np.ndarray]:
    # zero-padding to n_fft is implicit: samples beyond frame_len are zero,
    # so the matrices only need frame_len rows
    n = np.arange(frame_len)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    ang = 2.0 * np.pi * n * k / n_fft
    return np.cos(ang), np.sin(ang)


def frame_and_window(x, cfg: FeatureConfig) -> ad.Tensor:
    """Hamming-windowed overlapping frames, (n_frames, frame_len)."""
    x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    if x.data.ndim != 1:
        raise ad.ShapeError("frame_and_window", x.shape)
    if x.shape[0] < cfg.frame_len:
        raise ValueError(
            f"frame_and_window: input of {x.shape[0]} samples shorter than one frame ({cfg.frame_len})")
    return ad.frame(x, cfg.frame_len, cfg.hop, window=_cached_window(cfg.frame_len))


def _dft_power(frames: ad.Tensor, cfg: FeatureConfig) -> ad.Tensor:
    cos_m, sin_m = _cached_dft(cfg.frame_len, cfg.n_fft)
    re = ad.matmul(frames, ad.constant(cos_m))
    im = ad.matmul(frames, ad.constant(sin_m))
    return ad.add(ad.mul(re, re), ad.mul(im, im))


def dft_magnitude(frames, cfg: FeatureConfig) -> ad.Tensor:
    """Magnitude spectrum |X_k| of windowed frames, (n_frames, n_fft/2+1)."""
    frames = frames if isinstance(frames, ad.Tensor) else ad.Tensor(frames)
    if frames.data.ndim != 2 or frames.shape[1] != cfg.frame_len:
        raise ad.ShapeError("dft_magnitude", frames.shape)
    return ad.sqrt(_dft_power(frames, cfg))


def mel_matrix(cfg: FeatureConfig) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, n_fft/2+1).

    Centers are uniform on the mel scale; each row is evaluated at the
    FFT bin frequencies and peak-normalized so the filter is exactly 1.0
    at its center bin. A filter with no nonzero bin means n_mels exceeds
    the spectral resolution and is an error.
    """
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    bins_hz = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    weights = np.zeros((cfg.n_mels, cfg.n_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bins_hz - lo) / (center - lo)
        falling = (hi - bins_hz) / (hi - center)
        tri = np.minimum(rising, falling)
        peak = tri.max()
        if peak <= 0.0:
            raise ValueError(
                f"mel_matrix: filter {m} is empty; n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}")
        weights[m] = np.clip(tri, 0.0, None) / peak
    return weights


def filter_centers_hz(cfg: FeatureConfig) -> np.ndarray:
    """Analytic center frequency of each mel filter."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    return edges_hz[1:-1]


@lru_cache(maxsize=8)
def _cached_mel_t(cfg: FeatureConfig) -> np.ndarray:
    return np.ascontiguousarray(mel_matrix(cfg).T)


def mel_energies(x, cfg: FeatureConfig) -> ad.Tensor:
    """Pre-log mel energies: mel filters applied to the DFT power."""
    frames = frame_and_window(x, cfg)
    power = _dft_power(frames, cfg)
    return ad.matmul(power, ad.constant(_cached_mel_t(cfg)))


def log_mel(x, cfg: FeatureConfig) -> ad.Tensor:
    """Log mel-filterbank energies, (n_frames, n_mels), differentiable in x."""
    return ad.log(ad.add(mel_energies(x, cfg), ad.constant(LOG_FLOOR)))
