# =========================
# Diffusion Core
# =========================
# Linear-beta forward process, the noise-prediction training loss, and the plain
# ancestral sampler. The toy model operates directly in data space.

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import torch

from .errors import ConfigurationError, ShapeMismatchError
from .models import MaskSet, forward_masked, timestep_embedding
from .numerics import DTYPE, RngStream, sample_normal

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_noise", "TrainingSample", "TrainingBatch",
    "make_batch", "ddpm_loss", "sample", "timestep_embedding",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Forward-process constants, stored 0-based: entry t-1 holds the value for step t.
    sigma2 is the sampler variance (sigma_t^2 = beta_t).
    """
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma2: torch.Tensor

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        beta = torch.as_tensor(list(betas), dtype=DTYPE)
        alpha = 1.0 - beta
        return cls(T=int(beta.numel()), beta=beta, alpha=alpha,
                   alpha_bar=torch.cumprod(alpha, dim=0), sigma2=beta.clone())

    def check_step(self, t: Union[int, torch.Tensor]) -> None:
        t_min, t_max = (int(t.min()), int(t.max())) if isinstance(t, torch.Tensor) else (int(t), int(t))
        if t_min < 1 or t_max > self.T:
            raise ConfigurationError(f"timestep out of range [1, {self.T}]: {t_min}..{t_max}")


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    """
    Build a noise schedule with betas spaced linearly from beta_start to beta_end.
    Raises ConfigurationError when the bounds are violated.
    """
    if kind != "linear":
        raise ConfigurationError(f"Unsupported schedule kind: {kind}")
    if T < 2:
        raise ConfigurationError(f"schedule needs at least 2 steps, got T={T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, T, dtype=DTYPE)
    sched = NoiseSchedule.from_betas(betas.tolist())
    logger.debug(f"Noise schedule T={T}, alpha_bar_T={float(sched.alpha_bar[-1]):.3e}")
    return sched


def forward_noise(x0: torch.Tensor, t: Union[int, torch.Tensor], eps: torch.Tensor,
                  sched: NoiseSchedule) -> torch.Tensor:
    """
    Noise x0 to step t: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.
    t may be a single step or one step per row of a batch.
    """
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    sched.check_step(t)
    if isinstance(t, torch.Tensor):
        abar = sched.alpha_bar[t.long() - 1].unsqueeze(-1)
    else:
        abar = sched.alpha_bar[t - 1]
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


# =========================
# Training Samples
# =========================


@dataclass
class TrainingSample:
    """One (x0, prompt, t, eps, x_t) tuple; xt is recomputable from the rest."""
    x0: torch.Tensor
    z: torch.Tensor
    prompt_id: int
    cluster_label: Optional[int]
    t: int
    eps: torch.Tensor
    xt: torch.Tensor


@dataclass
class TrainingBatch:
    """Stacked training samples."""
    x0: torch.Tensor
    z: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xt: torch.Tensor
    prompt_ids: List[int]
    labels: List[Optional[int]]

    def __len__(self) -> int:
        return len(self.prompt_ids)

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample]) -> "TrainingBatch":
        if not samples:
            raise ConfigurationError("empty batch")
        return cls(
            x0=torch.stack([s.x0 for s in samples]),
            z=torch.stack([s.z for s in samples]),
            t=torch.tensor([s.t for s in samples], dtype=torch.long),
            eps=torch.stack([s.eps for s in samples]),
            xt=torch.stack([s.xt for s in samples]),
            prompt_ids=[s.prompt_id for s in samples],
            labels=[s.cluster_label for s in samples],
        )

    def subset(self, rows: Sequence[int]) -> "TrainingBatch":
        idx = torch.as_tensor(list(rows), dtype=torch.long)
        return TrainingBatch(
            x0=self.x0[idx], z=self.z[idx], t=self.t[idx], eps=self.eps[idx], xt=self.xt[idx],
            prompt_ids=[self.prompt_ids[i] for i in rows], labels=[self.labels[i] for i in rows],
        )


def make_batch(corpus, indices: Sequence[int], sched: NoiseSchedule, rng: RngStream) -> TrainingBatch:
    """
    Build a training batch from corpus rows.
    Each item draws its step and noise from rng.child("item", prompt_id), so an item's
    sample does not depend on its position in the batch.
    """
    samples = []
    for i in indices:
        record = corpus.records[i]
        item_rng = rng.child("item", record.prompt_id)
        t = int(torch.randint(1, sched.T + 1, (1,), generator=item_rng.generator()))
        x0 = corpus.data[i]
        eps = sample_normal(x0.shape, item_rng)
        samples.append(TrainingSample(
            x0=x0, z=corpus.embeddings[i], prompt_id=record.prompt_id,
            cluster_label=record.cluster_label, t=t, eps=eps, xt=forward_noise(x0, t, eps, sched),
        ))
    return TrainingBatch.from_samples(samples)


def ddpm_loss(model: torch.nn.Module, masks: Optional[MaskSet], batch: TrainingBatch) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    eps_hat, _ = forward_masked(model, masks, batch.xt, batch.z, batch.t)
    return torch.mean((eps_hat - batch.eps) ** 2)


# =========================
# Ancestral Sampler
# =========================


def sample(model: torch.nn.Module, masks: Optional[MaskSet], z: torch.Tensor, sched: NoiseSchedule,
           rng: RngStream, x_start: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Generate x0-hat by ancestral sampling from t = T down to 1.

    z is one prompt embedding or a batch of them. The chain starts from x_start when
    given (x_T), otherwise from standard normal noise. Step t adds sigma_t * noise,
    except the last step (t = 1) which is noise free.
    """
    single = z.dim() == 1
    z = z.unsqueeze(0) if single else z
    if x_start is None:
        x = sample_normal((z.shape[0], model.spec.data_dim), rng.child("sample-start"))
    else:
        x = x_start.unsqueeze(0) if x_start.dim() == 1 else x_start.clone()
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            steps = torch.full((z.shape[0],), t, dtype=torch.long)
            eps_hat, _ = forward_masked(model, masks, x, z, steps)
            alpha, beta, abar = sched.alpha[t - 1], sched.beta[t - 1], sched.alpha_bar[t - 1]
            x = (x - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)
            if t > 1:
                x = x + torch.sqrt(sched.sigma2[t - 1]) * sample_normal(x.shape, rng.child("sample-step", t))
    return x[0] if single else x
