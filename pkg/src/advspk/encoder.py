"""Miniature residual convolutional speaker encoder with ArcFace training.

log-mel features -> stack of 1-D conv blocks over time (relu, residual
where channel counts match) -> global statistics pooling (per-channel
temporal mean and std concatenated) -> affine projection to the
embedding. Classification for training uses an additive angular margin
head: logits are scale * cos(theta_j + margin * 1[j == label]).

Embeddings are NOT length-normalized at extraction; cosine comparisons
normalize at comparison time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureConfig, log_mel
from .optim import Adam

MIN_FRAMES = 4


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (32, 64)
    kernel: int = 3
    embedding_dim: int = 32
    n_speakers: int = 20
    margin: float = 0.2
    scale: float = 32.0
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not (0.0 <= self.margin < math.pi / 2):
            raise ValueError(f"margin must be in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.n_speakers < 2:
            raise ValueError(f"need at least 2 speakers, got {self.n_speakers}")
        if not self.channels:
            raise ValueError("channel plan must be nonempty")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


class EmbeddingModel:
    """Named parameter tensors plus the config that shapes them."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xE5C0))))
        params: dict[str, Tensor] = {}
        c_prev = cfg.features.n_mels
        for i, c_out in enumerate(cfg.channels):
            fan_in = c_prev * cfg.kernel
            params[f"conv{i}.w"] = Tensor(
                rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_prev, cfg.kernel)),
                requires_grad=True)
            params[f"conv{i}.b"] = Tensor(np.zeros((c_out, 1)), requires_grad=True)
            c_prev = c_out
        pooled = 2 * c_prev
        params["proj.w"] = Tensor(
            rng.normal(0.0, math.sqrt(1.0 / pooled), size=(cfg.embedding_dim, pooled)),
            requires_grad=True)
        params["proj.b"] = Tensor(np.zeros(cfg.embedding_dim), requires_grad=True)
        params["head.w"] = Tensor(
            rng.normal(0.0, 1.0, size=(cfg.n_speakers, cfg.embedding_dim)),
            requires_grad=True)
        self.params = params

    def copy(self) -> "EmbeddingModel":
        clone = EmbeddingModel.__new__(EmbeddingModel)
        clone.cfg = self.cfg
        clone.params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r} in state")
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter {k!r}: shape {arrays[k].shape} != {p.shape}")
            p.data = np.asarray(arrays[k], dtype=np.float64).copy()


def _expand_cols(col: Tensor, t_len: int) -> Tensor:
    # (c, 1) -> (c, t) without broadcasting: matmul against a ones row
    return ad.matmul(col, ad.constant(np.ones((1, t_len))))


def embed_graph(model: EmbeddingModel, x: Tensor) -> Tensor:
    """Embedding as a differentiable graph over the waveform tensor."""
    cfg = model.cfg
    n_frames = cfg.features.n_frames(x.shape[0])
    if n_frames < MIN_FRAMES:
        raise ValueError(
            f"embed: input of {x.shape[0]} samples yields {n_frames} frames; need >= {MIN_FRAMES}")
    feats = log_mel(x, cfg.features)
    h = ad.transpose(feats)  # (n_mels, n_frames): channels x time
    t_len = h.shape[1]
    for i, c_out in enumerate(cfg.channels):
        c_in = h.shape[0]
        y = ad.conv1d(h, model.params[f"conv{i}.w"])
        y = ad.add(y, _expand_cols(model.params[f"conv{i}.b"], t_len))
        y = ad.relu(y)
        h = ad.add(y, h) if c_in == c_out else y
    mu = ad.mean_axis(h, axis=1)
    sd = ad.std_axis(h, axis=1)
    pooled = ad.concat([mu, sd], axis=0)
    return ad.add(ad.matmul(model.params["proj.w"], pooled), model.params["proj.b"])


def embed(model: EmbeddingModel, x: np.ndarray) -> np.ndarray:
    """Embedding values for a waveform (no graph kept)."""
    with ad.no_grad():
        return embed_graph(model, ad.Tensor(x)).data


def _unit(v: Tensor) -> Tensor:
    norm = ad.sqrt(ad.tsum(ad.mul(v, v)))
    return ad.mul(v, ad.div(ad.constant(1.0), norm))


def cosine_scores_graph(model: EmbeddingModel, embedding: Tensor) -> Tensor:
    """cos(theta_j) between the embedding and each unit-normalized head row."""
    w = model.params["head.w"]
    row_sq = ad.scale(ad.mean_axis(ad.mul(w, w), axis=1), float(model.cfg.embedding_dim))
    inv = ad.div(ad.constant(np.ones(model.cfg.n_speakers)), ad.sqrt(row_sq))
    w_hat = ad.mul(w, ad.matmul(ad.reshape(inv, (model.cfg.n_speakers, 1)),
                                ad.constant(np.ones((1, model.cfg.embedding_dim)))))
    cos = ad.matmul(w_hat, _unit(embedding))
    return ad.clamp(cos, -1.0, 1.0)


def arcface_loss(model: EmbeddingModel, embedding, label: int) -> Tensor:
    """Additive angular margin cross-entropy for one embedding.

    cos(theta + m) is expanded as cos*cos(m) - sin*sin(m) with
    sin(theta) = sqrt(1 - cos^2) clamped into [0, 1]; with margin 0 this
    is exactly scaled-cosine softmax cross-entropy.
    """
    cfg = model.cfg
    if not (0 <= label < cfg.n_speakers):
        raise ValueError(f"label {label} out of range for {cfg.n_speakers} speakers")
    embedding = embedding if isinstance(embedding, Tensor) else ad.Tensor(embedding)
    cos = cosine_scores_graph(model, embedding)
    onehot = np.zeros(cfg.n_speakers)
    onehot[label] = 1.0
    hot = ad.constant(onehot)
    c_y = ad.tsum(ad.mul(cos, hot))
    sin_y = ad.sqrt(ad.clamp(ad.sub(ad.constant(1.0), ad.mul(c_y, c_y)), 0.0, 1.0))
    margined = ad.sub(ad.scale(c_y, math.cos(cfg.margin)), ad.scale(sin_y, math.sin(cfg.margin)))
    delta = ad.sub(margined, c_y)
    logits = ad.scale(ad.add(cos, ad.mul(hot, delta)), cfg.scale)
    # logsumexp with a detached shift for stability
    shift = float(logits.data.max())
    z = ad.sub(logits, ad.constant(shift))
    lse = ad.add(ad.log(ad.tsum(ad.exp(z))), ad.constant(shift))
    return ad.sub(lse, ad.tsum(ad.mul(logits, hot)))


def arcface_logits(model: EmbeddingModel, embedding, label: int | None = None) -> np.ndarray:
    """Logit values (scale * adjusted cosines); margin applied when a label is given."""
    embedding = embedding if isinstance(embedding, Tensor) else ad.Tensor(embedding)
    with ad.no_grad():
        cos = cosine_scores_graph(model, embedding).data.copy()
    if label is not None:
        c = cos[label]
        s = math.sqrt(min(max(1.0 - c * c, 0.0), 1.0))
        cos[label] = c * math.cos(model.cfg.margin) - s * math.sin(model.cfg.margin)
    return model.cfg.scale * cos


def train(model: EmbeddingModel, pairs, cfg: TrainConfig):
    """Mini-batch Adam training on (waveform, label) pairs.

    Returns (model, per-epoch mean losses); the model is trained in
    place. Deterministic given cfg.seed.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("train: empty corpus")
    counts = np.zeros(model.cfg.n_speakers, dtype=int)
    for _, label in pairs:
        counts[label] += 1
    present = counts[counts > 0]
    if present.size and present.min() < 2:
        raise ValueError("train: need at least 2 utterances per present speaker")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0x7EA1))))
    opt = Adam(model.params, lr=cfg.lr)
    history: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            for j in idx:
                x, label = pairs[j]
                loss = arcface_loss(model, embed_graph(model, ad.Tensor(x, requires_grad=False)), label)
                ad.backward(loss)
                epoch_losses.append(loss.item())
            opt.step(grad_scale=1.0 / len(idx))
        history.append(float(np.mean(epoch_losses)))
    return model, history


def speaker_centroids(model: EmbeddingModel, enroll_pairs) -> np.ndarray:
    """Unit-normalized per-speaker mean embeddings, (n_speakers, dim)."""
    sums = np.zeros((model.cfg.n_speakers, model.cfg.embedding_dim))
    counts = np.zeros(model.cfg.n_speakers, dtype=int)
    for x, label in enroll_pairs:
        sums[label] += embed(model, x)
        counts[label] += 1
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise ValueError(f"speaker_centroids: no enrollment audio for speakers {missing.tolist()}")
    centroids = sums / counts[:, None]
    return centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
