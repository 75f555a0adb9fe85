# =========================
# Training Orchestration
# =========================
# Teacher pre-training, the two pruning phases, per-expert fine-tuning and the
# ablation / static baselines.
#
#   pretrain_teacher : unmasked DDPM training; the result is the frozen teacher
#   prune            : warm-up (per-sample architectures) -> k-means codes -> joint phase
#                      with balanced routing -> binarized experts
#   finetune         : route the training prompts, fine-tune one copy per expert
#   ablation_run     : prune with one component switched off
#   weight_norm_prune: static magnitude-based masks meeting the same MAC budget

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn as nn
from tqdm import tqdm

from .corpus import Corpus, split_indices
from .diffusion import NoiseSchedule, ddpm_loss, make_batch, make_schedule
from .errors import ConfigurationError, DivergenceError
from .models import (MaskSet, PrunableSpec, ToyDenoiser, binarize, build_toy_unet, default_spec,
                     estimate_macs, total_macs)
from .numerics import DTYPE, RngStream
from .objectives import finetune_objective, pruning_objective, warmup_objective
from .router import (ArchitecturePredictor, Codebook, RouteTable, init_codebook_kmeans, route_inference_batch,
                     route_pruning, sinkhorn_assign)
from .schemas import PruningConfig, RunConfig, Variant
from .settings import get_settings

logger = logging.getLogger(__name__)

# =========================
# Training Log
# =========================


class TrainingLog:
    """
    JSON-lines sink for per-iteration loss parts.
    Lines carry no timestamps, so identically seeded runs write identical files.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[dict] = []
        self._fh = None
        self._log = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")
            self._log = structlog.wrap_logger(
                structlog.PrintLogger(file=self._fh),
                processors=[structlog.processors.JSONRenderer(sort_keys=True)],
            )

    def record(self, phase: str, iteration: int, parts: Dict[str, torch.Tensor]) -> None:
        entry = {"phase": phase, "iter": iteration, **{k: float(v) for k, v in parts.items()}}
        self.records.append(entry)
        if self._log is not None:
            self._log.info("step", **entry)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# =========================
# Results
# =========================


@dataclass
class PruningResult:
    """
    Output of the pruning phase: trained codes and predictor, binarized expert masks,
    their MAC fractions, and the pruned student plus the frozen teacher.
    """
    spec: PrunableSpec
    codebook: torch.Tensor
    predictor_state: Dict[str, torch.Tensor]
    masks: List[MaskSet]
    mac_fractions: List[float]
    model_state: Dict[str, torch.Tensor]
    teacher_state: Dict[str, torch.Tensor]
    variant: str = Variant.full.value
    log_path: Optional[Path] = None

    @property
    def n_experts(self) -> int:
        return self.codebook.shape[0]

    def build_model(self) -> ToyDenoiser:
        return load_denoiser(self.spec, self.model_state)

    def build_teacher(self) -> ToyDenoiser:
        return frozen(load_denoiser(self.spec, self.teacher_state))

    def build_predictor(self) -> ArchitecturePredictor:
        predictor = ArchitecturePredictor(self.spec.embed_dim, self.spec.D)
        predictor.load_state_dict(self.predictor_state)
        return predictor


@dataclass
class Expert:
    index: int
    masks: MaskSet
    state: Dict[str, torch.Tensor]
    trained: bool
    n_routed: int


@dataclass
class ExpertSet:
    """Per-expert hard masks and independently fine-tuned parameters."""
    spec: PrunableSpec
    experts: List[Expert]
    codebook: torch.Tensor
    predictor_state: Dict[str, torch.Tensor]
    teacher_state: Dict[str, torch.Tensor]
    variant: str = Variant.full.value

    def build_model(self, index: int) -> ToyDenoiser:
        return frozen(load_denoiser(self.spec, self.experts[index].state))

    def build_predictor(self) -> ArchitecturePredictor:
        predictor = ArchitecturePredictor(self.spec.embed_dim, self.spec.D)
        predictor.load_state_dict(self.predictor_state)
        return predictor


# =========================
# Helpers
# =========================


def spec_for(cfg: RunConfig) -> PrunableSpec:
    """Default toy topology sized by the run configuration."""
    return default_spec(data_dim=cfg.corpus.data_dim, embed_dim=cfg.corpus.embed_dim,
                        feature_dim=cfg.model.feature_dim, hidden=cfg.model.hidden,
                        t_embed_dim=cfg.model.t_embed_dim)


def schedule_for(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.steps, s.kind, s.beta_start, s.beta_end)


def load_denoiser(spec: PrunableSpec, state: Dict[str, torch.Tensor]) -> ToyDenoiser:
    model = ToyDenoiser(spec)
    model.load_state_dict(state)
    return model


def frozen(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def clone_state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def draw_indices(pool: Sequence[int], batch_size: int, rng: RngStream) -> List[int]:
    """Sample a batch of positions from pool without replacement."""
    if len(pool) == 0:
        raise ConfigurationError("cannot draw a batch from an empty pool")
    perm = rng.numpy().permutation(len(pool))[:batch_size]
    return [int(pool[i]) for i in perm]


def linear_warmup(optimizer: torch.optim.Optimizer, warmup: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Constant rate after a linear ramp over `warmup` steps."""
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup))


def check_finite(total: torch.Tensor, parts: Dict[str, torch.Tensor], iteration: int, phase: str) -> None:
    """Raise DivergenceError naming the first non-finite loss term."""
    if math.isfinite(float(total)):
        return
    for name, value in parts.items():
        if not math.isfinite(float(value)):
            raise DivergenceError(iteration, name, phase)
    raise DivergenceError(iteration, "total", phase)


def _progress(n: int, desc: str):
    return tqdm(range(n), desc=desc, disable=not get_settings().progress or n == 0, leave=False)


def effective_pruning_config(cfg: PruningConfig, variant: Variant) -> PruningConfig:
    """Apply the loss-weight and expert-count changes a variant implies."""
    if variant == Variant.no_distill:
        return cfg.model_copy(update={"lambda_distill": 0.0})
    if variant == Variant.no_contrastive:
        return cfg.model_copy(update={"lambda_cont": 0.0})
    if variant in (Variant.uni_arch, Variant.weight_norm):
        return cfg.model_copy(update={"lambda_cont": 0.0, "n_experts": 1})
    return cfg


# =========================
# Teacher Pre-training
# =========================


def pretrain_teacher(corpus: Corpus, train_idx: Sequence[int], spec: PrunableSpec, sched: NoiseSchedule,
                     cfg: PruningConfig, rng: RngStream, log: Optional[TrainingLog] = None) -> ToyDenoiser:
    """
    Train the unmasked denoiser with the DDPM objective.
    The returned network is frozen and serves as the distillation teacher.
    """
    model = build_toy_unet(spec, rng.child("init"))
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    logger.info(f"Pre-training teacher for {cfg.pretrain_iters} iterations")
    for it in _progress(cfg.pretrain_iters, "pretrain"):
        idx = draw_indices(train_idx, cfg.batch_size, rng.child("pretrain-sample", it))
        batch = make_batch(corpus, idx, sched, rng.child("pretrain-batch", it))
        loss = ddpm_loss(model, None, batch)
        parts = {"ddpm": loss.detach()}
        check_finite(loss, parts, it, "pretrain")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if log is not None:
            log.record("pretrain", it, parts)
    return frozen(model)


# =========================
# Pruning
# =========================


def _route_batch(E: torch.Tensor, codes: torch.Tensor, cfg: PruningConfig, variant: Variant) -> RouteTable:
    if codes.shape[0] == 1:
        return RouteTable(assignments=np.zeros(E.shape[0], dtype=np.int64), n_codes=1)
    if variant == Variant.no_ot:
        indices, _ = route_inference_batch(E, codes)
        return RouteTable(assignments=indices, n_codes=codes.shape[0])
    plan = sinkhorn_assign(E, codes, cfg.eps_ot, cfg.sinkhorn_iters)
    return route_pruning(plan)


def _hard_experts(codes: torch.Tensor, spec: PrunableSpec, threshold: float) -> Tuple[List[MaskSet], List[float]]:
    t_full = total_macs(spec)
    masks = [binarize(code, spec, threshold) for code in codes.detach()]
    fractions = [float(estimate_macs(spec, m)) / t_full for m in masks]
    return masks, fractions


def prune(corpus: Corpus, cfg: RunConfig, rng: RngStream, variant: Variant = Variant.full,
          log_path: Optional[Path] = None, teacher: Optional[ToyDenoiser] = None) -> PruningResult:
    """
    Run the pruning pipeline on the training split of the corpus.

    1. pre-train (or reuse) the teacher; the student starts as a copy of it
    2. warm-up: per-sample architectures e' prune the student directly
    3. codes start as k-means centroids of e from the last warm-up batches
    4. joint phase: balanced Sinkhorn routing (cosine argmax for no_ot) and the full objective
    5. binarize every code with the noise-free relaxation

    Raises DivergenceError on a non-finite loss.
    """
    variant = Variant(variant)
    pcfg = effective_pruning_config(cfg.pruning, variant)
    spec = spec_for(cfg)
    spec.validate()
    sched = schedule_for(cfg)
    train_idx, _ = split_indices(corpus.records, cfg.corpus.held_out_fraction)
    if not train_idx:
        raise ConfigurationError("corpus has no training prompts")

    with TrainingLog(log_path) as log:
        if teacher is None:
            teacher = pretrain_teacher(corpus, train_idx, spec, sched, pcfg, rng.child("teacher"), log)
        teacher = frozen(teacher)
        if variant == Variant.weight_norm:
            result = weight_norm_prune(teacher, spec, pcfg, rng.child("predictor"))
            result.log_path = log_path
            return result

        student = copy.deepcopy(teacher)
        student.train()
        for p in student.parameters():
            p.requires_grad_(True)
        predictor = ArchitecturePredictor(spec.embed_dim, spec.D, pcfg.init_logit, rng.child("predictor"))

        model_opt = torch.optim.AdamW(student.parameters(), lr=pcfg.lr, weight_decay=pcfg.weight_decay)
        model_sched = linear_warmup(model_opt, pcfg.lr_warmup)
        arch_opt = torch.optim.AdamW(predictor.parameters(), lr=pcfg.arch_lr, weight_decay=0.0)

        if variant == Variant.uni_arch:
            # one free code, no router; it trains over the whole pruning budget
            codebook = Codebook(torch.full((1, spec.D), pcfg.init_logit, dtype=DTYPE))
            joint_iters = pcfg.warmup_iters + pcfg.joint_iters
        else:
            collected = _warmup(corpus, train_idx, sched, student, teacher, predictor, pcfg, rng,
                                model_opt, model_sched, arch_opt, log)
            codebook = init_codebook_kmeans(torch.cat(collected), pcfg.n_experts, seed=cfg.seed,
                                            restarts=pcfg.kmeans_restarts)
            joint_iters = pcfg.joint_iters

        code_opt = torch.optim.AdamW(codebook.parameters(), lr=pcfg.arch_lr, weight_decay=0.0)
        logger.info(f"Joint phase: {joint_iters} iterations, N={codebook.N}, variant={variant.value}")
        for it in _progress(joint_iters, "joint"):
            idx = draw_indices(train_idx, pcfg.batch_size, rng.child("joint-sample", it))
            batch = make_batch(corpus, idx, sched, rng.child("joint-batch", it))
            with torch.no_grad():
                E = predictor(batch.z)
            route = _route_batch(E, codebook.codes.detach(), pcfg, variant)
            total, parts = pruning_objective(batch, route, codebook, student, teacher, pcfg, predictor,
                                             rng=rng.child("joint-noise", it))
            check_finite(total, parts, it, "joint")
            model_opt.zero_grad()
            arch_opt.zero_grad()
            code_opt.zero_grad()
            total.backward()
            model_opt.step()
            model_sched.step()
            if variant != Variant.uni_arch:
                arch_opt.step()
            code_opt.step()
            log.record("joint", it, parts)

    masks, fractions = _hard_experts(codebook.codes, spec, pcfg.binarize_threshold)
    logger.info(f"Pruned {len(masks)} experts, MAC fractions {[round(f, 4) for f in fractions]}")
    return PruningResult(
        spec=spec, codebook=codebook.codes.detach().clone(), predictor_state=clone_state(predictor),
        masks=masks, mac_fractions=fractions, model_state=clone_state(student),
        teacher_state=clone_state(teacher), variant=variant.value, log_path=log_path,
    )


def _warmup(corpus, train_idx, sched, student, teacher, predictor, cfg: PruningConfig, rng: RngStream,
            model_opt, model_sched, arch_opt, log: TrainingLog) -> List[torch.Tensor]:
    """Warm-up phase; returns the architecture embeddings of the final `kmeans_batches` batches."""
    collected: List[torch.Tensor] = []
    keep_from = cfg.warmup_iters - cfg.kmeans_batches
    logger.info(f"Warm-up phase: {cfg.warmup_iters} iterations")
    for it in _progress(cfg.warmup_iters, "warm-up"):
        idx = draw_indices(train_idx, cfg.batch_size, rng.child("warmup-sample", it))
        batch = make_batch(corpus, idx, sched, rng.child("warmup-batch", it))
        total, parts = warmup_objective(batch, student, teacher, cfg, predictor, rng=rng.child("warmup-noise", it))
        check_finite(total, parts, it, "warmup")
        model_opt.zero_grad()
        arch_opt.zero_grad()
        total.backward()
        model_opt.step()
        model_sched.step()
        arch_opt.step()
        log.record("warmup", it, parts)
        if it >= keep_from:
            with torch.no_grad():
                collected.append(predictor(batch.z))
    # codes still need a starting point without a warm-up
    for k in range(len(collected), cfg.kmeans_batches):
        idx = draw_indices(train_idx, cfg.batch_size, rng.child("kmeans-sample", k))
        with torch.no_grad():
            collected.append(predictor(corpus.embeddings[idx]))
    return collected


def ablation_run(variant: Variant, corpus: Corpus, cfg: RunConfig, rng: RngStream,
                 log_path: Optional[Path] = None, teacher: Optional[ToyDenoiser] = None) -> PruningResult:
    """
    prune() with one component switched off:
    no_ot routes by nearest code, no_distill and no_contrastive zero their loss weight,
    uni_arch trains one free mask vector without a router.
    """
    return prune(corpus, cfg, rng, variant=variant, log_path=log_path, teacher=teacher)


# =========================
# Static Baseline
# =========================


def weight_norm_prune(teacher: ToyDenoiser, spec: PrunableSpec, cfg: PruningConfig,
                      rng: Optional[RngStream] = None) -> PruningResult:
    """
    Static magnitude pruning to the MAC target.
    Hidden units are ranked by the L1 norm of their incoming weights (normalized by the layer mean);
    every layer keeps its strongest unit, then units are added greedily while the budget allows.
    All depth gates stay open.
    """
    budget = cfg.target_macs * total_macs(spec)
    per_unit = spec.macs_per_unit()
    masks = MaskSet(v=[torch.zeros(w, dtype=DTYPE) for w in spec.widths], u=torch.ones(spec.M, dtype=DTYPE))
    candidates = []
    with torch.no_grad():
        for l, name in enumerate(spec.width_layers):
            norms = teacher.blocks[name].fc_in.weight.abs().sum(dim=1)
            scores = norms / norms.mean()
            order = torch.argsort(scores, descending=True, stable=True)
            masks.v[l][order[0]] = 1.0
            candidates.extend((float(scores[k]), l, int(k)) for k in order[1:])
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    spent = float(estimate_macs(spec, masks))
    for _, l, k in candidates:
        cost = per_unit[spec.width_layers[l]]
        if spent + cost > budget:
            continue
        masks.v[l][k] = 1.0
        spent += cost
    fraction = spent / total_macs(spec)
    logger.info(f"Weight-norm baseline keeps {fraction:.4f} of the MACs")
    code = torch.where(masks.to_vector() > 0, torch.tensor(10.0, dtype=DTYPE), torch.tensor(-10.0, dtype=DTYPE))
    predictor = ArchitecturePredictor(spec.embed_dim, spec.D, 0.0, rng if rng is not None else RngStream(0))
    return PruningResult(
        spec=spec, codebook=code.unsqueeze(0), predictor_state=clone_state(predictor), masks=[masks],
        mac_fractions=[fraction], model_state=clone_state(teacher), teacher_state=clone_state(teacher),
        variant=Variant.weight_norm.value,
    )


# =========================
# Fine-tuning
# =========================


def route_prompts(embeddings: torch.Tensor, predictor: ArchitecturePredictor,
                  codebook: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
    """Inference routing of prompt embeddings: predictor, then highest cosine code."""
    with torch.no_grad():
        E = predictor(embeddings)
    return route_inference_batch(E, codebook)


def finetune(result: PruningResult, corpus: Corpus, cfg: RunConfig, rng: RngStream) -> ExpertSet:
    """
    Fine-tune one independent copy of the pruned student per expert on the training
    prompts routed to it. Experts with no routed prompts are returned untrained.
    """
    fcfg = cfg.finetune
    spec = result.spec
    sched = schedule_for(cfg)
    teacher = result.build_teacher()
    predictor = result.build_predictor()
    train_idx, _ = split_indices(corpus.records, cfg.corpus.held_out_fraction)
    assignments, _ = route_prompts(corpus.embeddings[train_idx], predictor, result.codebook)

    experts: List[Expert] = []
    for i, masks in enumerate(result.masks):
        members = [train_idx[j] for j in np.flatnonzero(assignments == i)]
        model = result.build_model()
        if not members:
            logger.warning(f"Expert {i} received no prompts; left untrained")
            experts.append(Expert(i, masks, clone_state(model), trained=False, n_routed=0))
            continue
        optimizer = torch.optim.AdamW(model.parameters(), lr=fcfg.lr, weight_decay=fcfg.weight_decay)
        for it in _progress(fcfg.iters, f"finetune expert {i}"):
            idx = draw_indices(members, fcfg.batch_size, rng.child("finetune-sample", i, it))
            batch = make_batch(corpus, idx, sched, rng.child("finetune-batch", i, it))
            loss = finetune_objective(batch, masks, model, teacher, fcfg)
            check_finite(loss, {"finetune": loss.detach()}, it, f"finetune expert {i}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        logger.info(f"Fine-tuned expert {i} on {len(members)} prompts")
        experts.append(Expert(i, masks, clone_state(model), trained=fcfg.iters > 0, n_routed=len(members)))
    return ExpertSet(spec=spec, experts=experts, codebook=result.codebook.clone(),
                     predictor_state={k: v.clone() for k, v in result.predictor_state.items()},
                     teacher_state=result.teacher_state, variant=result.variant)
