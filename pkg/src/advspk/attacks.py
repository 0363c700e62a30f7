"""Targeted white-box perturbation attacks on the speaker encoder.

Both attacks minimize 1 - cos(embedding(x + delta), target centroid)
under an L-infinity budget: the sign-gradient method takes fixed-size
signed steps, the moment-based method keeps running first/second moment
estimates of the gradient (no bias correction) and scales steps by
m / (sqrt(v) + xi). Step sizes follow a cosine decay. After every update
the perturbation is projected back into the budget and x + delta is
clamped into [-1, 1] by adjusting delta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EmbeddingModel, embed, embed_graph
from .metrics import cosine


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    fraction: float | None = None

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @classmethod
    def from_fraction(cls, x: np.ndarray, fraction: float = 0.05) -> "AttackBudget":
        """Budget as a fraction of the utterance's maximum amplitude."""
        peak = float(np.abs(x).max())
        if peak == 0.0:
            raise ValueError("cannot derive a budget from an all-zero waveform")
        return cls(epsilon=fraction * peak, fraction=fraction)


@dataclass(frozen=True)
class PgdConfig:
    iterations: int = 20
    alpha_start: float = 4e-3
    alpha_end: float = 4e-4

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (self.alpha_start >= self.alpha_end > 0.0):
            raise ValueError("need alpha_start >= alpha_end > 0")


@dataclass(frozen=True)
class AdamAttackConfig:
    iterations: int = 50
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    xi: float = 1e-8

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.xi <= 0.0:
            raise ValueError("xi must be positive")
        if not (self.lr_start >= self.lr_end > 0.0):
            raise ValueError("need lr_start >= lr_end > 0")


@dataclass(frozen=True)
class AdvExample:
    """A finished attack: source waveform, perturbation and bookkeeping."""
    source_id: str
    x: np.ndarray
    delta: np.ndarray
    source_label: int
    target_label: int
    epsilon: float
    method: str
    iterations: int
    final_loss: float
    loss_history: tuple[float, ...] = field(repr=False, default=())

    @property
    def x_adv(self) -> np.ndarray:
        return self.x + self.delta

    def sidecar(self) -> dict:
        return {
            "source_id": self.source_id,
            "source_label": self.source_label,
            "target_label": self.target_label,
            "epsilon": self.epsilon,
            "method": self.method,
            "iterations": self.iterations,
            "final_loss": self.final_loss,
        }


def cosine_decay(start: float, end: float, t: int, total: int) -> float:
    """end + (start-end) * (1 + cos(pi t / total)) / 2."""
    if total < 1:
        raise ValueError(f"total steps must be >= 1, got {total}")
    if not (0 <= t <= total):
        raise ValueError(f"step {t} outside [0, {total}]")
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * t / total))


def linf_project(delta: np.ndarray, epsilon: float, x: np.ndarray | None = None) -> np.ndarray:
    """Clamp the perturbation into [-eps, eps]; with x given, also keep
    x + delta inside [-1, 1] by shrinking delta (exactly, ulp-safe)."""
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    d = np.clip(delta, -epsilon, epsilon)
    if x is not None:
        d = np.clip(d, -1.0 - x, 1.0 - x)
        xa = x + d
        bad = np.abs(xa) > 1.0
        while bad.any():  # repair float rounding at the range boundary
            d[bad] = np.nextafter(d[bad], 0.0)
            bad = np.abs(x + d) > 1.0
    return d


def attack_loss_graph(model: EmbeddingModel, x_adv: ad.Tensor, target_centroid: np.ndarray) -> ad.Tensor:
    e = embed_graph(model, x_adv)
    dot = ad.tsum(ad.mul(e, ad.constant(target_centroid)))
    inv_norm = ad.div(ad.constant(1.0), ad.sqrt(ad.tsum(ad.mul(e, e))))
    return ad.sub(ad.constant(1.0), ad.mul(dot, inv_norm))


def attack_loss(model: EmbeddingModel, x_adv: np.ndarray, target_centroid: np.ndarray) -> float:
    """1 - cosine(embedding(x_adv), target centroid)."""
    with ad.no_grad():
        return attack_loss_graph(model, ad.Tensor(x_adv), target_centroid).item()


def _loss_and_grad(loss_fn, x_adv: np.ndarray) -> tuple[float, np.ndarray]:
    t = ad.Tensor(x_adv, requires_grad=True)
    loss = loss_fn(t)
    ad.backward(loss)
    return loss.item(), t.grad


def _run_attack(loss_fn, x, budget, iterations, step_fn) -> tuple[np.ndarray, tuple[float, ...]]:
    delta = np.zeros_like(x)
    history = []
    for t in range(iterations):
        value, grad = _loss_and_grad(loss_fn, x + delta)
        history.append(value)
        delta = step_fn(t, delta, grad)
        delta = linf_project(delta, budget.epsilon, x)
    return delta, tuple(history)


def _check_attack_args(model, y, y_target):
    if y == y_target:
        raise ValueError(f"target label must differ from source label (both {y})")
    if not (0 <= y_target < model.cfg.n_speakers):
        raise ValueError(f"target label {y_target} out of range")


def pgd_attack(model: EmbeddingModel, centroids: np.ndarray, x: np.ndarray,
               y: int, y_target: int, budget: AttackBudget,
               cfg: PgdConfig = PgdConfig(), source_id: str = "") -> AdvExample:
    """Signed-gradient descent on the attack loss with step-size decay."""
    _check_attack_args(model, y, y_target)
    centroid = centroids[y_target]
    loss_fn = lambda t: attack_loss_graph(model, t, centroid)

    def step(t, delta, grad):
        alpha = cosine_decay(cfg.alpha_start, cfg.alpha_end, t, cfg.iterations)
        return delta - alpha * np.sign(grad)

    delta, history = _run_attack(loss_fn, x, budget, cfg.iterations, step)
    final = attack_loss(model, x + delta, centroid)
    return AdvExample(source_id=source_id, x=x, delta=delta, source_label=y,
                      target_label=y_target, epsilon=budget.epsilon, method="pgd",
                      iterations=cfg.iterations, final_loss=final,
                      loss_history=history + (final,))


def adam_attack(model: EmbeddingModel, centroids: np.ndarray, x: np.ndarray,
                y: int, y_target: int, budget: AttackBudget,
                cfg: AdamAttackConfig = AdamAttackConfig(), source_id: str = "") -> AdvExample:
    """Moment-based perturbation descent (no bias correction)."""
    _check_attack_args(model, y, y_target)
    centroid = centroids[y_target]
    loss_fn = lambda t: attack_loss_graph(model, t, centroid)
    m = np.zeros_like(x)
    v = np.zeros_like(x)

    def step(t, delta, grad):
        nonlocal m, v
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        lr = cosine_decay(cfg.lr_start, cfg.lr_end, t, cfg.iterations)
        return delta - lr * m / (np.sqrt(v) + cfg.xi)

    delta, history = _run_attack(loss_fn, x, budget, cfg.iterations, step)
    final = attack_loss(model, x + delta, centroid)
    return AdvExample(source_id=source_id, x=x, delta=delta, source_label=y,
                      target_label=y_target, epsilon=budget.epsilon, method="adam",
                      iterations=cfg.iterations, final_loss=final,
                      loss_history=history + (final,))


def predicted_label(model: EmbeddingModel, x: np.ndarray, centroids: np.ndarray) -> int:
    """Nearest enrollment centroid by cosine; ties break to the lowest index."""
    e = embed(model, x)
    norm = np.linalg.norm(e)
    if norm == 0.0:
        raise ValueError("predicted_label: zero embedding")
    sims = centroids @ (e / norm) / np.linalg.norm(centroids, axis=1)
    return int(np.argmax(sims))


def predicted_label_batch(model: EmbeddingModel, x: np.ndarray,
                          peer_embeddings: np.ndarray, peer_labels) -> int:
    """Nearest clean batch-peer embedding instead of enrollment centroids."""
    e = embed(model, x)
    e = e / np.linalg.norm(e)
    peers = peer_embeddings / np.linalg.norm(peer_embeddings, axis=1, keepdims=True)
    return int(peer_labels[int(np.argmax(peers @ e))])


def assign_targets(labels, n_speakers: int, seed: int) -> list[int]:
    """Uniform random target label differing from each source label."""
    if n_speakers < 2:
        raise ValueError("need at least 2 speakers to assign attack targets")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x7A26))))
    out = []
    for y in labels:
        t = int(rng.integers(0, n_speakers - 1))
        if t >= y:
            t += 1
        out.append(t)
    return out


def run_attack(method: str, model: EmbeddingModel, centroids: np.ndarray, x: np.ndarray,
               y: int, y_target: int, fraction: float = 0.05,
               pgd_cfg: PgdConfig = PgdConfig(), adam_cfg: AdamAttackConfig = AdamAttackConfig(),
               source_id: str = "") -> AdvExample:
    budget = AttackBudget.from_fraction(x, fraction)
    if method == "pgd":
        return pgd_attack(model, centroids, x, y, y_target, budget, pgd_cfg, source_id)
    if method == "adam":
        return adam_attack(model, centroids, x, y, y_target, budget, adam_cfg, source_id)
    raise ValueError(f"unknown attack method {method!r}; expected 'pgd' or 'adam'")
