"""Deterministic synthetic speaker corpus.

Each speaker is a small set of voice-source parameters (fundamental,
formant resonances, spectral tilt, jitter) drawn from a seeded PCG64
stream; utterances are harmonic series shaped by the formants with
per-utterance pitch offset, vibrato, amplitude modulation and noise.
Everything regenerates bit-identically from
(n_speakers, utts_per_speaker, master_seed).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PEAK = 0.9
SPLITS = ("train", "enroll", "test")

# stream tags keep the per-purpose PCG64 streams disjoint
_TAG_SPEAKER = 0x5EA4
_TAG_UTT = 0x077E
_TAG_SPLIT = 0x51D7


def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class SpeakerParams:
    f0: float                      # fundamental, Hz
    formants: tuple[float, ...]    # resonance centers, Hz
    bandwidths: tuple[float, ...]  # resonance bandwidths, Hz
    formant_gains: tuple[float, ...]
    tilt: float                    # spectral slope, dB/octave
    jitter: float                  # relative f0 wobble depth
    noise_level: float             # breathiness floor relative to the peak
    noise_tilt: float              # spectral color of the breath noise

    def __post_init__(self):
        if not (80.0 <= self.f0 <= 300.0):
            raise ValueError(f"f0 {self.f0} outside [80, 300] Hz")
        if len(self.formants) != len(self.bandwidths) or len(self.formants) != len(self.formant_gains):
            raise ValueError("formant parameter lengths disagree")


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    speaker: int
    seed: int
    split: str
    x: np.ndarray


@dataclass(frozen=True)
class Corpus:
    speakers: tuple[SpeakerParams, ...]
    utterances: tuple[Utterance, ...]
    sample_rate: int
    master_seed: int

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [u for u in self.utterances if u.split == name]

    def pairs(self, name: str) -> list[tuple[np.ndarray, int]]:
        return [(u.x, u.speaker) for u in self.split(name)]


_FORMANT_TEMPLATE = ((450.0, 140.0), (1150.0, 230.0), (1950.0, 320.0), (2900.0, 400.0))


def make_speaker(seed: int, nyquist: float = 4000.0) -> SpeakerParams:
    """Voice parameters drawn from fixed ranges; same seed, same speaker.

    Formants sit at per-speaker offsets around a shared three-resonance
    template, so identity lives mostly in mid-band spectral detail
    rather than in the fundamental alone.
    """
    rng = _rng(_TAG_SPEAKER, seed)
    f0 = float(rng.uniform(125.0, 185.0))
    centers = []
    for base, spread in _FORMANT_TEMPLATE:
        centers.append(min(base + rng.uniform(-spread, spread), nyquist * 0.9))
    bandwidths = rng.uniform(100.0, 200.0, size=len(centers))
    gains = rng.uniform(1.2, 2.6, size=len(centers))
    tilt = float(rng.uniform(8.5, 12.5))
    jitter = float(rng.uniform(0.003, 0.015))
    noise_level = float(rng.uniform(0.018, 0.032))
    noise_tilt = float(rng.uniform(-0.4, 0.4))
    return SpeakerParams(
        f0=f0,
        formants=tuple(float(c) for c in centers),
        bandwidths=tuple(float(b) for b in bandwidths),
        formant_gains=tuple(float(g) for g in gains),
        tilt=tilt,
        jitter=jitter,
        noise_level=noise_level,
        noise_tilt=noise_tilt,
    )


def synth_utterance(speaker: SpeakerParams, duration_s: float, seed: int,
                    sample_rate: int = 8000) -> np.ndarray:
    """One utterance: jittered harmonic series through the speaker's formants.

    Peak-normalized to exactly 0.9. Deterministic given (speaker, seed).
    """
    if duration_s < 0.5:
        raise ValueError(f"duration must be >= 0.5 s, got {duration_s}")
    rng = _rng(_TAG_UTT, seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = speaker.f0 * (1.0 + rng.uniform(-0.012, 0.012))
    vib_rate = rng.uniform(3.0, 7.0)
    vib_phase = rng.uniform(0.0, 2.0 * np.pi)
    wobble = speaker.jitter * np.sin(2.0 * np.pi * vib_rate * t + vib_phase)
    inst_freq = f0 * (1.0 + wobble)
    phase = 2.0 * np.pi * np.cumsum(inst_freq) / sample_rate

    slope = speaker.tilt / 6.0206  # dB/octave -> amplitude ~ k^-slope
    n_harm = max(1, int(0.45 * sample_rate / f0))
    x = np.zeros(n)
    for k in range(1, n_harm + 1):
        fk = k * f0
        gain = 1.0
        for fc, bw, g in zip(speaker.formants, speaker.bandwidths, speaker.formant_gains):
            gain += g * bw * bw / ((fk - fc) ** 2 + bw * bw)
        amp = gain * k ** (-slope)
        x += amp * np.sin(k * phase + rng.uniform(0.0, 2.0 * np.pi))

    am_rate = rng.uniform(1.5, 4.0)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    x *= 1.0 + 0.18 * np.sin(2.0 * np.pi * am_rate * t + am_phase)

    x /= np.abs(x).max()
    x += _colored_noise(rng, n, speaker.noise_tilt, sample_rate) \
        * speaker.noise_level * rng.uniform(0.85, 1.18)
    # two-step normalization keeps the peak at exactly +-0.9
    x /= np.abs(x).max()
    return x * PEAK


def _colored_noise(rng: np.random.Generator, n: int, color: float, sample_rate: int) -> np.ndarray:
    """Unit-RMS noise with magnitude ~ ((0.1 + f/nyquist))^color."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    shaping = (0.1 + f / (sample_rate / 2)) ** color
    noise = np.fft.irfft(spec * shaping, n=n)
    return noise / max(noise.std(), 1e-12)


def _split_sizes(utts_per_speaker: int) -> tuple[int, int, int]:
    n_train = int(utts_per_speaker * 0.7)
    n_enroll = max(1, int(utts_per_speaker * 0.1))
    n_test = utts_per_speaker - n_train - n_enroll
    return n_train, n_enroll, n_test


def make_corpus(n_speakers: int = 20, utts_per_speaker: int = 10, master_seed: int = 0,
                duration_s: float = 1.0, sample_rate: int = 8000) -> Corpus:
    """Deterministic corpus with a 70/10/20 train/enroll/test split per speaker."""
    if n_speakers < 2:
        raise ValueError(f"need at least 2 speakers, got {n_speakers}")
    n_train, n_enroll, n_test = _split_sizes(utts_per_speaker)
    if n_test < 1 or n_train < 1:
        raise ValueError(
            f"utts_per_speaker={utts_per_speaker} leaves an empty split "
            f"(train={n_train}, enroll={n_enroll}, test={n_test})")
    seed_rng = _rng(master_seed)
    speaker_seeds = seed_rng.integers(0, 2 ** 62, size=n_speakers)
    utt_seeds = seed_rng.integers(0, 2 ** 62, size=(n_speakers, utts_per_speaker))
    speakers = tuple(make_speaker(int(s), nyquist=sample_rate / 2) for s in speaker_seeds)
    utterances = []
    for spk in range(n_speakers):
        for j in range(utts_per_speaker):
            if j < n_train:
                split = "train"
            elif j < n_train + n_enroll:
                split = "enroll"
            else:
                split = "test"
            seed = int(utt_seeds[spk, j])
            x = synth_utterance(speakers[spk], duration_s, seed, sample_rate)
            utterances.append(Utterance(
                utt_id=f"spk{spk:03d}_utt{j:03d}", speaker=spk, seed=seed, split=split, x=x))
    return Corpus(speakers=speakers, utterances=tuple(utterances),
                  sample_rate=sample_rate, master_seed=master_seed)


def save_corpus(corpus: Corpus, out_dir: Path) -> Path:
    """Write WAVs plus a manifest CSV; returns the manifest path."""
    from .audioio import write_wav

    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "speaker_id", "split", "seed"])
        for u in corpus.utterances:
            write_wav(wav_dir / f"{u.utt_id}.wav", u.x, corpus.sample_rate)
            writer.writerow([u.utt_id, u.speaker, u.split, u.seed])
    return manifest
