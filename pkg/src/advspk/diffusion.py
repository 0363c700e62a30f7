"""Passive defense: diffusion-based waveform purification.

Forward process: x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps with a
linear beta schedule. A small dilated conv net predicts the injected
noise from (x_t, step embedding); training minimizes the mean squared
error between predicted and true noise, which is the reconstruction MSE
up to the closed-form rescaling that recovers x0_hat from x_t and the
prediction. Purification noises an input to step t*, then runs ancestral
reverse steps with fixed variance sigma_t^2 = beta_t down to the clean
estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import Adam


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray       # beta_t for t = 1..T at index t-1
    alpha_bars: np.ndarray  # abar_t, cumulative products of (1 - beta)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.shape != abars.shape:
            raise ValueError("schedule arrays must be 1-D and aligned")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.05) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, T)
    return DiffusionSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Forward-noise x0 to step t: sqrt(abar_t) x0 + sqrt(1-abar_t) noise."""
    if not (0 <= t <= schedule.T):
        raise ValueError(f"step {t} outside [0, {schedule.T}]")
    if t == 0:
        return np.asarray(x0, dtype=np.float64).copy()
    if np.shape(noise) != np.shape(x0):
        raise ad.ShapeError("q_sample", np.shape(x0), np.shape(noise))
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 32
    blocks: int = 4
    kernel: int = 9
    dilation_base: int = 3
    t_dim: int = 32

    def __post_init__(self):
        if self.t_dim % 2:
            raise ValueError("t_dim must be even")


class Denoiser:
    """Dilated 1-D conv net predicting injected noise from (x_t, step)."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD1FF))))
        c, k = cfg.channels, cfg.kernel
        params: dict[str, Tensor] = {}
        params["in.w"] = Tensor(rng.normal(0.0, 1.0, size=(c, 1, 1)), requires_grad=True)
        params["in.b"] = Tensor(np.zeros((c, 1)), requires_grad=True)
        for i in range(cfg.blocks):
            params[f"block{i}.w"] = Tensor(
                rng.normal(0.0, math.sqrt(2.0 / (c * k)), size=(c, c, k)), requires_grad=True)
            params[f"block{i}.b"] = Tensor(np.zeros((c, 1)), requires_grad=True)
            params[f"block{i}.t"] = Tensor(
                rng.normal(0.0, math.sqrt(1.0 / cfg.t_dim), size=(c, cfg.t_dim)), requires_grad=True)
        params["out.w"] = Tensor(rng.normal(0.0, math.sqrt(1.0 / c), size=(1, c, 1)), requires_grad=True)
        params["out.b"] = Tensor(np.zeros((1, 1)), requires_grad=True)
        self.params = params

    def copy(self) -> "Denoiser":
        clone = Denoiser.__new__(Denoiser)
        clone.cfg = self.cfg
        clone.params = {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k!r} in state")
            p.data = np.asarray(arrays[k], dtype=np.float64).copy()


def step_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step index."""
    half = dim // 2
    freqs = 10.0 ** (-4.0 * np.arange(half) / max(1, half - 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def denoise_graph(den: Denoiser, x_t: Tensor, t: int) -> Tensor:
    """Predicted noise as a graph; x_t is a 1-D waveform tensor."""
    cfg = den.cfg
    n = x_t.shape[0]
    ones_row = ad.constant(np.ones((1, n)))
    h = ad.reshape(x_t, (1, n))
    h = ad.conv1d(h, den.params["in.w"])
    h = ad.relu(ad.add(h, ad.matmul(den.params["in.b"], ones_row)))
    emb = ad.constant(step_embedding(t, cfg.t_dim))
    for i in range(cfg.blocks):
        tb = ad.reshape(ad.matmul(den.params[f"block{i}.t"], emb), (cfg.channels, 1))
        bias = ad.add(den.params[f"block{i}.b"], tb)
        y = ad.conv1d(h, den.params[f"block{i}.w"], dilation=cfg.dilation_base ** i)
        y = ad.relu(ad.add(y, ad.matmul(bias, ones_row)))
        h = ad.add(y, h)
    out = ad.add(ad.conv1d(h, den.params["out.w"]), ad.matmul(den.params["out.b"], ones_row))
    return ad.reshape(out, (n,))


def predict_noise(den: Denoiser, x_t: np.ndarray, t: int) -> np.ndarray:
    with ad.no_grad():
        return denoise_graph(den, ad.Tensor(x_t), t).data


def reconstruct_x0(den: Denoiser, x_t: np.ndarray, t: int, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form clean estimate from x_t and the predicted noise."""
    abar = schedule.alpha_bar(t)
    eps = predict_noise(den, x_t, t)
    return (x_t - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)


@dataclass(frozen=True)
class DenoiserTrainConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 2e-4
    crop: int = 4000
    seed: int = 0
    log_every: int = 25


def train_denoiser(den: Denoiser, waveforms, schedule: DiffusionSchedule,
                   cfg: DenoiserTrainConfig = DenoiserTrainConfig()):
    """Noise-prediction training on random crops; returns (denoiser, losses).

    Per step: pick a batch of clean segments, a uniform step t in [1, T]
    and fresh Gaussian noise for each, and minimize the squared error of
    the noise prediction at x_t.
    """
    waveforms = [np.asarray(w, dtype=np.float64) for w in waveforms]
    if not waveforms:
        raise ValueError("train_denoiser: empty corpus")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 0xD7A1))))
    opt = Adam(den.params, lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        opt.zero_grad()
        batch_losses = []
        for _ in range(cfg.batch_size):
            w = waveforms[int(rng.integers(len(waveforms)))]
            if len(w) > cfg.crop:
                start = int(rng.integers(len(w) - cfg.crop + 1))
                w = w[start:start + cfg.crop]
            t = int(rng.integers(1, schedule.T + 1))
            noise = rng.standard_normal(len(w))
            x_t = q_sample(w, t, noise, schedule)
            pred = denoise_graph(den, ad.Tensor(x_t), t)
            diff = ad.sub(pred, ad.constant(noise))
            loss = ad.mean(ad.mul(diff, diff))
            ad.backward(loss)
            batch_losses.append(loss.item())
        opt.step(grad_scale=1.0 / cfg.batch_size)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            history.append(float(np.mean(batch_losses)))
    return den, history


def purify(den: Denoiser, schedule: DiffusionSchedule, x: np.ndarray, t_star: int,
           rng: np.random.Generator, stochastic: bool = True) -> np.ndarray:
    """Noise to step t_star, then reverse-denoise back to a clean estimate.

    t_star = 0 is the exact identity. With a fixed rng state this is a
    pure function; `stochastic=False` drops the per-step sampling noise
    (the forward noising still uses the rng).
    """
    x = np.asarray(x, dtype=np.float64)
    if not (0 <= t_star <= schedule.T):
        raise ValueError(f"t_star {t_star} outside [0, {schedule.T}]")
    if t_star == 0:
        return x.copy()
    x_t = q_sample(x, t_star, rng.standard_normal(len(x)), schedule)
    for t in range(t_star, 0, -1):
        beta = schedule.betas[t - 1]
        alpha = 1.0 - beta
        abar = schedule.alpha_bar(t)
        eps = predict_noise(den, x_t, t)
        mean = (x_t - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)
        if t > 1 and stochastic:
            x_t = mean + math.sqrt(beta) * rng.standard_normal(len(x))
        else:
            x_t = mean
    return np.clip(x_t, -1.0, 1.0)


@dataclass(frozen=True)
class SweepRow:
    t: int
    attack_success: float
    defense_success: float
    sim_src: float
    sim_tgt: float
    clean_sim: float


def sweep_steps(den: Denoiser, schedule: DiffusionSchedule, model, centroids: np.ndarray,
                adv_examples, clean_waveforms, t_list, seed: int = 0,
                stochastic: bool = True) -> list[SweepRow]:
    """Purification quality per diffusion depth t.

    For each t: success rates and centroid similarities of the purified
    adversarial set, plus how similar purified clean speech stays to
    itself in embedding space.
    """
    from .encoder import embed
    from .metrics import Judgement, cosine, judge

    rows = []
    for t in t_list:
        counts = {j: 0 for j in Judgement}
        sims_src, sims_tgt, clean_sims = [], [], []
        for i, ex in enumerate(adv_examples):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, t, 0xADE, i))))
            xp = purify(den, schedule, ex.x_adv, t, rng, stochastic=stochastic)
            e = embed(model, xp)
            counts[judge(e, ex.source_label, ex.target_label, centroids)] += 1
            sims_src.append(cosine(e, centroids[ex.source_label]))
            sims_tgt.append(cosine(e, centroids[ex.target_label]))
        for i, x in enumerate(clean_waveforms):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, t, 0xC1EA, i))))
            xp = purify(den, schedule, x, t, rng, stochastic=stochastic)
            clean_sims.append(cosine(embed(model, x), embed(model, xp)))
        n = max(1, len(adv_examples))
        rows.append(SweepRow(
            t=int(t),
            attack_success=100.0 * counts[Judgement.ATTACK_SUCCESS] / n,
            defense_success=100.0 * counts[Judgement.DEFENSE_SUCCESS] / n,
            sim_src=float(np.mean(sims_src)) if sims_src else float("nan"),
            sim_tgt=float(np.mean(sims_tgt)) if sims_tgt else float("nan"),
            clean_sim=float(np.mean(clean_sims)) if clean_sims else float("nan"),
        ))
    return rows


def select_t_star(rows: list[SweepRow]) -> int:
    """Pick the sweep point with the best defense success."""
    best = max(rows, key=lambda r: (r.defense_success, -r.t))
    return best.t
