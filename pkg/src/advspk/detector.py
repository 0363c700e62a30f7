"""Binary adversarial/clean classifier gating the purifier.

A small conv net over log-mel features with a two-class angular-margin
head. Clean-classified audio bypasses purification byte-identically;
everything else is routed through the diffusion purifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import cosine_decay
from .diffusion import Denoiser, DiffusionSchedule, purify
from .encoder import EmbeddingModel, EncoderConfig, arcface_logits, arcface_loss, embed_graph
from .features import FeatureConfig
from .optim import Adam

CLEAN, ADVERSARIAL = 0, 1
CLASS_NAMES = ("clean", "adversarial")


@dataclass(frozen=True)
class DetectorConfig:
    channels: tuple[int, ...] = (16, 16, 16, 16)
    kernel: int = 3
    embedding_dim: int = 16
    margin: float = 0.2
    scale: float = 32.0
    features: FeatureConfig = field(default_factory=FeatureConfig)


class Detector:
    """Two-class wrapper around the embedding-model machinery."""

    def __init__(self, cfg: DetectorConfig = DetectorConfig(), seed: int = 0):
        self.cfg = cfg
        self.net = EmbeddingModel(EncoderConfig(
            channels=cfg.channels, kernel=cfg.kernel, embedding_dim=cfg.embedding_dim,
            n_speakers=2, margin=cfg.margin, scale=cfg.scale, features=cfg.features,
        ), seed=seed)

    @property
    def params(self):
        return self.net.params

    def state_arrays(self):
        return self.net.state_arrays()

    def load_state(self, arrays):
        self.net.load_state(arrays)


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    holdout_fraction: float = 0.1
    seed: int = 0


def detect(det: Detector, x: np.ndarray) -> tuple[str, float]:
    """Class name plus adversarial-class probability."""
    with ad.no_grad():
        emb = embed_graph(det.net, ad.Tensor(x)).data
    logits = arcface_logits(det.net, emb)
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    label = int(np.argmax(logits))
    return CLASS_NAMES[label], float(p[ADVERSARIAL])


def _split(items, fraction, rng):
    items = list(items)
    order = rng.permutation(len(items))
    n_hold = max(1, int(round(fraction * len(items))))
    hold = [items[i] for i in order[:n_hold]]
    fit = [items[i] for i in order[n_hold:]]
    return fit, hold


def train_detector(det: Detector, clean_waveforms, adv_waveforms,
                   cfg: DetectorTrainConfig = DetectorTrainConfig()):
    """Balanced-batch training with a per-class holdout split.

    Returns (detector, held-out accuracy, per-epoch losses).
    """
    clean_waveforms = list(clean_waveforms)
    adv_waveforms = list(adv_waveforms)
    if not clean_waveforms or not adv_waveforms:
        raise ValueError("train_detector: need nonempty clean and adversarial sets")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xDE7E))))
    clean_fit, clean_hold = _split(clean_waveforms, cfg.holdout_fraction, rng)
    adv_fit, adv_hold = _split(adv_waveforms, cfg.holdout_fraction, rng)

    opt = Adam(det.params, lr=cfg.lr_start)
    half = max(1, cfg.batch_size // 2)
    n_batches = max(1, (len(clean_fit) + len(adv_fit)) // cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    step_idx = 0
    history = []
    for _ in range(cfg.epochs):
        epoch_losses = []
        for _ in range(n_batches):
            batch = [(clean_fit[int(rng.integers(len(clean_fit)))], CLEAN) for _ in range(half)]
            batch += [(adv_fit[int(rng.integers(len(adv_fit)))], ADVERSARIAL) for _ in range(half)]
            opt.zero_grad()
            for x, y in batch:
                loss = arcface_loss(det.net, embed_graph(det.net, ad.Tensor(x)), y)
                ad.backward(loss)
                epoch_losses.append(loss.item())
            lr = cosine_decay(cfg.lr_start, cfg.lr_end, step_idx, max(1, total_steps - 1)) \
                if total_steps > 1 else cfg.lr_start
            opt.step(grad_scale=1.0 / len(batch), lr=lr)
            step_idx += 1
        history.append(float(np.mean(epoch_losses)))

    correct = sum(detect(det, x)[0] == "clean" for x in clean_hold)
    correct += sum(detect(det, x)[0] == "adversarial" for x in adv_hold)
    accuracy = correct / (len(clean_hold) + len(adv_hold))
    return det, float(accuracy), history


@dataclass(frozen=True)
class PurifierStack:
    """Everything gated purification needs: denoiser, schedule, depth."""
    denoiser: Denoiser
    schedule: DiffusionSchedule
    t_star: int
    stochastic: bool = True


def gated_purify(det: Detector, stack: PurifierStack, x: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Purify only inputs the detector flags as adversarial."""
    label, _ = detect(det, x)
    if label == "clean":
        return np.asarray(x, dtype=np.float64).copy()
    return purify(stack.denoiser, stack.schedule, x, stack.t_star, rng,
                  stochastic=stack.stochastic)
