# =========================
# Objectives
# =========================
# Loss terms of the routed pruning phase and of expert fine-tuning:
#   contrastive_loss   - aligns architecture similarities with prompt similarities
#   resource_loss      - log-ratio distance between the average and the target MACs
#   distillation_loss  - output-level plus block-level MSE against the frozen teacher
#   pruning_objective  - the composed per-expert objective used in the joint phase
#   warmup_objective   - the same terms with every sample as its own architecture
#   finetune_objective - weighted DDPM + distillation for one hard-masked expert

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from .diffusion import TrainingBatch
from .errors import ConfigurationError, NumericalError, ShapeMismatchError
from .models import MaskSet, PrunableSpec, estimate_macs, forward_masked, total_macs
from .numerics import DTYPE, RngStream, cosine_matrix, sample_gumbel
from .router import ArchitecturePredictor, Codebook, RouteTable, gumbel_sigmoid, predict_arch_embedding
from .schemas import FinetuneConfig, PruningConfig

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

Parts = Dict[str, torch.Tensor]

# =========================
# Loss Terms
# =========================


def contrastive_loss(Z: torch.Tensor, Eprime: torch.Tensor, tau: float,
                     sign_as_printed: bool = False) -> torch.Tensor:
    """
    Soft binary cross-entropy between prompt-similarity and architecture-similarity softmaxes.

    r_ij = softmax_j(cos(z_i, z_j) / tau), s_ij = softmax_j(cos(e'_i, e'_j) / tau), diagonal included.
    L = -(1/B^2) sum_ij [r_ij log s_ij + (1 - r_ij) log(1 - s_ij)], logs clamped at 1e-12.
    With sign_as_printed the bracket is returned without the leading minus.
    """
    B = Z.shape[0]
    if B < 2:
        raise ConfigurationError("contrastive loss needs a batch of at least 2")
    if Eprime.shape[0] != B:
        raise ShapeMismatchError(f"{B} prompt embeddings but {Eprime.shape[0]} architecture vectors")
    r = torch.softmax(cosine_matrix(Z, Z, what="prompt embeddings") / tau, dim=1)
    s = torch.softmax(cosine_matrix(Eprime, Eprime, what="architecture vectors") / tau, dim=1)
    bracket = r * torch.log(s.clamp_min(LOG_CLAMP)) + (1 - r) * torch.log((1 - s).clamp_min(LOG_CLAMP))
    loss = -bracket.sum() / (B * B)
    return -loss if sign_as_printed else loss


def resource_loss(avg_macs: Union[float, torch.Tensor], target: Union[float, torch.Tensor]) -> torch.Tensor:
    """R(x, y) = log(max(x, y) / min(x, y)) = |log x - log y|."""
    x = torch.as_tensor(avg_macs, dtype=DTYPE)
    y = torch.as_tensor(target, dtype=DTYPE)
    if float(x) <= 0 or float(y) <= 0:
        raise NumericalError(f"resource loss needs positive MACs, got {float(x)} and {float(y)}")
    return torch.abs(torch.log(x) - torch.log(y))


@dataclass
class DistillPair:
    """Teacher and student outputs on the same inputs: final predictions and per-block outputs."""
    teacher_out: torch.Tensor
    student_out: torch.Tensor
    teacher_blocks: List[torch.Tensor]
    student_blocks: List[torch.Tensor]


def distillation_loss(pair: DistillPair) -> torch.Tensor:
    """Output MSE plus the sum of per-block MSEs; teacher tensors are detached."""
    if len(pair.teacher_blocks) != len(pair.student_blocks):
        raise ShapeMismatchError(
            f"teacher has {len(pair.teacher_blocks)} blocks, student has {len(pair.student_blocks)}")
    if pair.teacher_out.shape != pair.student_out.shape:
        raise ShapeMismatchError("teacher and student outputs differ in shape")
    loss = torch.mean((pair.teacher_out.detach() - pair.student_out) ** 2)
    for b, (t_block, s_block) in enumerate(zip(pair.teacher_blocks, pair.student_blocks)):
        if t_block.shape != s_block.shape:
            raise ShapeMismatchError(f"block {b} output shapes differ: {tuple(t_block.shape)} vs {tuple(s_block.shape)}")
        loss = loss + torch.mean((t_block.detach() - s_block) ** 2)
    return loss


def teacher_outputs(teacher: nn.Module, batch: TrainingBatch) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Unmasked teacher forward pass with gradients blocked."""
    with torch.no_grad():
        return teacher(batch.xt, batch.z, batch.t)


def mean_mac_fraction(spec: PrunableSpec, code_masks: MaskSet, counts: torch.Tensor) -> torch.Tensor:
    """Batch-weighted T-hat(A) / T_full with weights B^(i) / B over the codes."""
    per_code = estimate_macs(spec, code_masks)
    weights = counts.to(DTYPE) / counts.sum()
    return (weights * per_code).sum() / total_macs(spec)


def _student_terms(model: nn.Module, masks: MaskSet, batch: TrainingBatch,
                   t_out: torch.Tensor, t_blocks: List[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    eps_hat, blocks = forward_masked(model, masks, batch.xt, batch.z, batch.t)
    ddpm = torch.mean((eps_hat - batch.eps) ** 2)
    distill = distillation_loss(DistillPair(t_out, eps_hat, t_blocks, blocks))
    return ddpm, distill


def item_gumbel_noise(batch: TrainingBatch, dim: int, rng: RngStream) -> torch.Tensor:
    """Per-prompt Gumbel noise keyed by prompt id, independent of batch order."""
    return torch.stack([sample_gumbel((dim,), rng.child("gumbel-item", pid)) for pid in batch.prompt_ids])


def code_gumbel_noise(n_codes: int, dim: int, rng: RngStream) -> torch.Tensor:
    return torch.stack([sample_gumbel((dim,), rng.child("gumbel-code", i)) for i in range(n_codes)])


def _compose(ddpm, distill, resource, contrastive, cfg: PruningConfig) -> torch.Tensor:
    return ddpm + cfg.lambda_distill * distill + cfg.lambda_res * resource + cfg.lambda_cont * contrastive


def _contrastive_term(batch: TrainingBatch, Eprime: torch.Tensor, cfg: PruningConfig) -> torch.Tensor:
    if cfg.lambda_cont == 0:
        return torch.zeros((), dtype=DTYPE)
    return contrastive_loss(batch.z, Eprime, cfg.tau, cfg.contrastive_sign_as_printed)


# =========================
# Composed Objectives
# =========================


def pruning_objective(batch: TrainingBatch, route: RouteTable, codebook: Codebook, model: nn.Module,
                      teacher: nn.Module, cfg: PruningConfig, predictor: ArchitecturePredictor,
                      rng: Optional[RngStream] = None,
                      item_noise: Optional[torch.Tensor] = None,
                      code_noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Parts]:
    """
    Joint-phase objective.

    total = (1/N') sum_{i: B_i > 0} (1/B_i) sum_{j in i} [L_DDPM + lambda_distill * L_distill]
            + lambda_res * R(T-hat(A), T_d * T_full) + lambda_cont * L_cont
    where N' counts the nonempty experts. Expert masks are gumbel_sigmoid(a_i) with
    per-code noise; architecture vectors e' for the contrastive term use per-prompt noise.
    Noise comes from `rng` unless fixed explicitly; with neither, the relaxation is noise free.

    Returns:
        (total, parts) where parts holds ddpm, distill, resource, contrastive and avg_mac_fraction.
    """
    spec: PrunableSpec = model.spec
    if len(route) != len(batch):
        raise ShapeMismatchError(f"route has {len(route)} entries for a batch of {len(batch)}")
    N, D = codebook.N, codebook.D
    if item_noise is None:
        item_noise = item_gumbel_noise(batch, D, rng) if rng is not None else torch.zeros(len(batch), D, dtype=DTYPE)
    if code_noise is None:
        code_noise = code_gumbel_noise(N, D, rng) if rng is not None else torch.zeros(N, D, dtype=DTYPE)

    # e' only feeds the contrastive term here
    if cfg.lambda_cont == 0:
        contrastive = torch.zeros((), dtype=DTYPE)
    else:
        E = predict_arch_embedding(batch.z, predictor)
        Eprime = gumbel_sigmoid(E, cfg.gamma, noise=item_noise)
        contrastive = contrastive_loss(batch.z, Eprime, cfg.tau, cfg.contrastive_sign_as_printed)

    code_masks = MaskSet.from_vector(gumbel_sigmoid(codebook.codes, cfg.gamma, noise=code_noise), spec)
    t_out, t_blocks = teacher_outputs(teacher, batch)

    ddpm_terms, distill_terms = [], []
    for i in range(N):
        rows = route.members(i)
        if rows.size == 0:
            continue
        idx = torch.as_tensor(rows, dtype=torch.long)
        sub = batch.subset(rows.tolist())
        masks_i = MaskSet(v=[v[i] for v in code_masks.v], u=code_masks.u[i])
        ddpm_i, distill_i = _student_terms(model, masks_i, sub, t_out[idx], [b[idx] for b in t_blocks])
        ddpm_terms.append(ddpm_i)
        distill_terms.append(distill_i)
    # N' >= 1 since every prompt is routed somewhere
    ddpm = torch.stack(ddpm_terms).mean()
    distill = torch.stack(distill_terms).mean()

    counts = torch.as_tensor(route.counts, dtype=DTYPE)
    avg_fraction = mean_mac_fraction(spec, code_masks, counts)
    resource = resource_loss(avg_fraction, cfg.target_macs)

    total = _compose(ddpm, distill, resource, contrastive, cfg)
    parts = {
        "ddpm": ddpm.detach(), "distill": distill.detach(), "resource": resource.detach(),
        "contrastive": contrastive.detach(), "avg_mac_fraction": avg_fraction.detach(),
    }
    return total, parts


def warmup_objective(batch: TrainingBatch, model: nn.Module, teacher: nn.Module, cfg: PruningConfig,
                     predictor: ArchitecturePredictor, rng: Optional[RngStream] = None,
                     item_noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Parts]:
    """
    Warm-up objective: every sample is pruned by its own predicted architecture e',
    so the expert grouping collapses to a plain batch mean.
    """
    spec: PrunableSpec = model.spec
    D = predictor.arch_dim
    if item_noise is None:
        item_noise = item_gumbel_noise(batch, D, rng) if rng is not None else torch.zeros(len(batch), D, dtype=DTYPE)
    E = predict_arch_embedding(batch.z, predictor)
    Eprime = gumbel_sigmoid(E, cfg.gamma, noise=item_noise)
    masks = MaskSet.from_vector(Eprime, spec)

    t_out, t_blocks = teacher_outputs(teacher, batch)
    ddpm, distill = _student_terms(model, masks, batch, t_out, t_blocks)
    avg_fraction = estimate_macs(spec, masks).mean() / total_macs(spec)
    resource = resource_loss(avg_fraction, cfg.target_macs)
    contrastive = _contrastive_term(batch, Eprime, cfg)

    total = _compose(ddpm, distill, resource, contrastive, cfg)
    parts = {
        "ddpm": ddpm.detach(), "distill": distill.detach(), "resource": resource.detach(),
        "contrastive": contrastive.detach(), "avg_mac_fraction": avg_fraction.detach(),
    }
    return total, parts


def finetune_objective(batch: TrainingBatch, expert_masks: MaskSet, model: nn.Module, teacher: nn.Module,
                       cfg: FinetuneConfig) -> torch.Tensor:
    """alpha_ddpm * L_DDPM + alpha_distill * L_distill for one hard-masked expert."""
    t_out, t_blocks = teacher_outputs(teacher, batch)
    ddpm, distill = _student_terms(model, expert_masks, batch, t_out, t_blocks)
    return cfg.alpha_ddpm * ddpm + cfg.alpha_distill * distill
