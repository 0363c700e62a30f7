"""16-bit PCM WAV read/write via the stdlib wave module."""
from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


def write_wav(path, x: np.ndarray, sample_rate: int) -> None:
    x = np.asarray(x, dtype=np.float64)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(Path(path)), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sample_rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, sample_rate
