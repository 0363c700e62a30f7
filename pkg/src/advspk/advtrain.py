"""Active defense: fine-tune the encoder on relabeled adversarial examples.

Each batch gets random target assignments, attacks are regenerated
against the current model parameters, and the adversarial examples are
relabeled with their source speakers and trained on alongside the clean
originals (so every batch is exactly half clean, half adversarial).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AdamAttackConfig, PgdConfig, assign_targets, cosine_decay, run_attack
from .encoder import EmbeddingModel, arcface_loss, embed_graph, speaker_centroids
from .optim import Adam


@dataclass(frozen=True)
class AdvTrainConfig:
    method: str = "pgd"
    epochs: int = 3
    batch_size: int = 16
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    epsilon_fraction: float = 0.05
    seed: int = 0
    pgd: PgdConfig = field(default_factory=PgdConfig)
    adam: AdamAttackConfig = field(default_factory=AdamAttackConfig)
    clean_only: bool = False  # harness control: skip the adversarial halves

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.method not in ("pgd", "adam"):
            raise ValueError(f"unknown attack method {self.method!r}")


def make_adv_batch(model: EmbeddingModel, centroids: np.ndarray, batch, seed: int,
                   cfg: AdvTrainConfig) -> list[tuple[np.ndarray, int]]:
    """Adversarial halves relabeled with source speakers, then the clean batch.

    Output is exactly twice the input size with the label multiset doubled.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("make_adv_batch: empty batch")
    labels = [y for _, y in batch]
    targets = assign_targets(labels, model.cfg.n_speakers, seed)
    out: list[tuple[np.ndarray, int]] = []
    for (x, y), y_tgt in zip(batch, targets):
        ex = run_attack(cfg.method, model, centroids, x, y, y_tgt,
                        fraction=cfg.epsilon_fraction, pgd_cfg=cfg.pgd, adam_cfg=cfg.adam)
        out.append((ex.x_adv, y))
    out.extend(batch)
    return out


def adversarial_finetune(model: EmbeddingModel, train_pairs, enroll_pairs,
                         cfg: AdvTrainConfig):
    """Returns (defended model, per-epoch mean losses); input model untouched."""
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("adversarial_finetune: empty corpus")
    defended = model.copy()
    first_losses = []
    with ad.no_grad():
        for x, y in train_pairs[:8]:
            first_losses.append(arcface_loss(defended, embed_graph(defended, ad.Tensor(x)), y).item())
    if np.mean(first_losses) > np.log(model.cfg.n_speakers):
        warnings.warn("adversarial_finetune: starting loss near chance; model looks untrained")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xADF7))))
    opt = Adam(defended.params, lr=cfg.lr_start)
    n_batches = (len(train_pairs) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    step_idx = 0
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_pairs))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_pairs[j] for j in idx]
            if cfg.clean_only:
                mixed = batch
            else:
                centroids = speaker_centroids(defended, enroll_pairs)
                batch_seed = int(rng.integers(0, 2 ** 62))
                mixed = make_adv_batch(defended, centroids, batch, batch_seed, cfg)
            opt.zero_grad()
            for x, y in mixed:
                loss = arcface_loss(defended, embed_graph(defended, ad.Tensor(x)), y)
                ad.backward(loss)
                epoch_losses.append(loss.item())
            lr = cosine_decay(cfg.lr_start, cfg.lr_end, step_idx, max(1, total_steps - 1)) \
                if total_steps > 1 else cfg.lr_start
            opt.step(grad_scale=1.0 / len(mixed), lr=lr)
            step_idx += 1
        history.append(float(np.mean(epoch_losses)))
    return defended, history
