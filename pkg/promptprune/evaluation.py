# =========================
# Evaluation Harness
# =========================
# Budget adherence, assignment statistics, routing consistency, specialization
# tables, held-out denoising loss and a Gaussian-kernel MMD between generated and
# real data. Everything here is read-only with respect to models and corpus.

import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.spatial.distance import cdist, pdist
from scipy.stats import spearmanr

from .corpus import Corpus, split_indices
from .diffusion import NoiseSchedule, make_batch, sample
from .errors import ConfigurationError, NumericalError
from .models import MaskSet, PrunableSpec, block_macs, build_toy_unet, estimate_macs, full_masks, total_macs
from .numerics import RngStream
from .router import RouteTable
from .schemas import EvalReport, ExpertEval, RunConfig
from .training import ExpertSet, PruningResult, draw_indices, route_prompts, schedule_for, spec_for

logger = logging.getLogger(__name__)

# =========================
# Routing Statistics
# =========================


def assignment_stats(routes: RouteTable, N: int) -> Tuple[float, np.ndarray]:
    """
    Usage shares B_i / B and their entropy -sum(s log s), with 0 log 0 = 0.
    """
    if len(routes) == 0:
        raise ConfigurationError("assignment statistics need at least one routed prompt")
    counts = np.bincount(routes.assignments, minlength=N).astype(np.float64)
    shares = counts / counts.sum()
    nonzero = shares[shares > 0]
    entropy = float(-(nonzero * np.log(nonzero)).sum())
    return entropy, shares


def routing_consistency(routes: RouteTable, labels: Optional[Sequence[int]] = None) -> Tuple[List[float], float]:
    """
    For each cluster (in label order), the fraction of its prompts routed to its modal expert,
    and the mean over clusters.
    """
    labels = list(labels) if labels is not None else list(routes.labels or [])
    if len(labels) != len(routes):
        raise ConfigurationError(f"{len(labels)} labels for {len(routes)} routed prompts")
    per_cluster: Dict[int, List[int]] = defaultdict(list)
    for label, code in zip(labels, routes.assignments):
        per_cluster[label].append(int(code))
    agreements = []
    for label in sorted(per_cluster):
        codes = per_cluster[label]
        agreements.append(Counter(codes).most_common(1)[0][1] / len(codes))
    mean = float(np.mean(agreements)) if agreements else 0.0
    return agreements, mean


# =========================
# Budget Reports
# =========================


@dataclass
class BudgetReport:
    mac_fractions: List[float]
    block_ratios: pd.DataFrame
    usage_weighted_fraction: float


def expert_masks(result) -> List[MaskSet]:
    """Hard masks of a PruningResult or an ExpertSet."""
    if isinstance(result, ExpertSet):
        return [e.masks for e in result.experts]
    return list(result.masks)


def budget_report(result, spec: PrunableSpec, routes: RouteTable) -> BudgetReport:
    """
    Per-expert MAC fraction, per-block retained-MAC ratio table (one row per expert,
    one column per block), and the usage-weighted average fraction.
    """
    masks = expert_masks(result)
    t_full = total_macs(spec)
    full_blocks = block_macs(spec, full_masks(spec))
    fractions, rows = [], []
    for i, m in enumerate(masks):
        fractions.append(float(estimate_macs(spec, m)) / t_full)
        per_block = block_macs(spec, m)
        row = {"expert": i}
        row.update({name: float(per_block[name]) / float(full_blocks[name]) for name in per_block})
        rows.append(row)
    _, shares = assignment_stats(routes, len(masks))
    weighted = float(np.dot(shares, fractions))
    return BudgetReport(mac_fractions=fractions, block_ratios=pd.DataFrame(rows),
                        usage_weighted_fraction=weighted)


# =========================
# Distribution Distance
# =========================


def toy_mmd(gen, real, bandwidth: float = 0.0, unbiased: bool = True) -> float:
    """
    Squared MMD with kernel exp(-|a - b|^2 / (2 h^2)).
    h is the median pairwise distance within `real` when bandwidth <= 0.
    The unbiased estimator drops the diagonal terms and needs at least 2 points per set.
    """
    x = np.asarray(gen, dtype=np.float64)
    y = np.asarray(real, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    m, n = len(x), len(y)
    if m == 0 or n == 0:
        raise ConfigurationError("toy_mmd needs two nonempty sets")
    if unbiased and (m < 2 or n < 2):
        raise ConfigurationError("the unbiased MMD estimator needs at least 2 points per set")
    h = bandwidth
    if h <= 0:
        if n < 2:
            raise ConfigurationError("median bandwidth needs at least 2 real points")
        h = float(np.median(pdist(y)))
        if h == 0:
            raise NumericalError("median pairwise distance of the real set is zero")
    kernel = lambda a, b: np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * h * h))
    kxx, kyy, kxy = kernel(x, x), kernel(y, y), kernel(x, y)
    if unbiased:
        a = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        b = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        a, b = kxx.mean(), kyy.mean()
    return float(a + b - 2.0 * kxy.mean())


# =========================
# Denoising Loss
# =========================


def per_prompt_losses(model: torch.nn.Module, masks: Optional[MaskSet], corpus: Corpus, indices: Sequence[int],
                      sched: NoiseSchedule, rng: RngStream, repeats: int = 1) -> np.ndarray:
    """Noise-prediction MSE per prompt, averaged over `repeats` independent (t, eps) draws."""
    if len(indices) == 0:
        return np.zeros(0)
    totals = np.zeros(len(indices))
    with torch.no_grad():
        for r in range(repeats):
            batch = make_batch(corpus, indices, sched, rng.child("held-out", r))
            eps_hat, _ = model(batch.xt, batch.z, batch.t, masks)
            totals += ((eps_hat - batch.eps) ** 2).mean(dim=1).cpu().numpy()
    return totals / repeats


def held_out_loss(model: torch.nn.Module, masks: Optional[MaskSet], corpus: Corpus, indices: Sequence[int],
                  sched: NoiseSchedule, rng: RngStream, repeats: int = 1) -> float:
    """Mean held-out denoising loss of one (model, masks) pair."""
    losses = per_prompt_losses(model, masks, corpus, indices, sched, rng, repeats)
    return float(losses.mean()) if losses.size else float("nan")


# =========================
# Specialization
# =========================


def specialization_table(routes: RouteTable, mac_fractions: Sequence[float]) -> pd.DataFrame:
    """
    One row per expert: MAC fraction, usage count, modal cluster and the count of
    prompts from every cluster routed to it.
    """
    labels = list(routes.labels) if routes.labels is not None else [None] * len(routes)
    clusters = sorted({l for l in labels if l is not None})
    rows = []
    for i, fraction in enumerate(mac_fractions):
        members = [labels[j] for j in routes.members(i)]
        hist = Counter(members)
        modal = hist.most_common(1)[0][0] if members else None
        row = {"expert": i, "mac_fraction": float(fraction), "usage": len(members), "modal_cluster": modal}
        row.update({f"cluster_{c}": hist.get(c, 0) for c in clusters})
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame["modal_cluster"] = frame["modal_cluster"].astype("Int64")
    return frame


def extreme_budget_prompts(routes: RouteTable, mac_fractions: Sequence[float], limit: int = 5) -> pd.DataFrame:
    """Prompts routed to the highest- and lowest-budget experts (first `limit` of each)."""
    order = np.argsort(np.asarray(mac_fractions), kind="stable")
    lowest, highest = int(order[0]), int(order[-1])
    prompt_ids = list(routes.prompt_ids) if routes.prompt_ids is not None else list(range(len(routes)))
    labels = list(routes.labels) if routes.labels is not None else [None] * len(routes)
    rows = []
    for budget, expert in (("highest", highest), ("lowest", lowest)):
        for j in routes.members(expert)[:limit]:
            rows.append({"budget": budget, "expert": expert, "mac_fraction": float(mac_fractions[expert]),
                         "prompt_id": prompt_ids[j], "cluster_label": labels[j]})
    return pd.DataFrame(rows, columns=["budget", "expert", "mac_fraction", "prompt_id", "cluster_label"])


def _spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    if len(a) < 2 or len(set(a)) < 2 or len(set(b)) < 2:
        return None
    value = float(spearmanr(a, b)[0])
    return None if math.isnan(value) else value


def difficulty_budget_correlation(routes: RouteTable, difficulties: Sequence[float],
                                  mac_fractions: Sequence[float]) -> Optional[float]:
    """
    Spearman correlation between each prompt's cluster difficulty and the MAC fraction
    of the expert it routes to. None when either side is constant.
    """
    budgets = [float(mac_fractions[i]) for i in routes.assignments]
    return _spearman(list(difficulties), budgets)


def difficulty_ordering(corpus: Corpus, cfg: RunConfig, rng: RngStream) -> Tuple[Optional[float], Dict[int, float]]:
    """
    Train one unmasked reference denoiser per cluster for `eval.reference_iters` iterations and
    report the Spearman correlation of its held-out loss against cluster difficulty.
    """
    spec = spec_for(cfg)
    sched = schedule_for(cfg)
    train_idx, held_idx = split_indices(corpus.records, cfg.corpus.held_out_fraction)
    difficulty = corpus.cluster_difficulty()
    losses: Dict[int, float] = {}
    for label in sorted(difficulty):
        pool = [i for i in train_idx if corpus.records[i].cluster_label == label]
        held = [i for i in held_idx if corpus.records[i].cluster_label == label] or pool
        model = build_toy_unet(spec, rng.child("reference-init", label))
        optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.pruning.pretrain_lr)
        for it in range(cfg.eval.reference_iters):
            idx = draw_indices(pool, cfg.pruning.batch_size, rng.child("reference-sample", label, it))
            batch = make_batch(corpus, idx, sched, rng.child("reference-batch", label, it))
            eps_hat, _ = model(batch.xt, batch.z, batch.t)
            loss = torch.mean((eps_hat - batch.eps) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        losses[label] = held_out_loss(model, None, corpus, held, sched, rng.child("reference-eval", label),
                                      cfg.eval.loss_repeats)
        logger.info(f"Reference denoiser for cluster {label}: held-out loss {losses[label]:.5f}")
    labels = sorted(losses)
    return _spearman([difficulty[l] for l in labels], [losses[l] for l in labels]), losses


# =========================
# Full Evaluation
# =========================


def evaluate(experts: ExpertSet, corpus: Corpus, cfg: RunConfig, rng: RngStream,
             pruning: Optional[PruningResult] = None) -> Tuple[EvalReport, RouteTable, pd.DataFrame]:
    """
    Route the held-out split, then measure per-expert budgets, usage, held-out loss
    (after fine-tuning, and before when the pruning result is given) and MMD between
    samples and real data of the prompts routed to each expert.

    Returns:
        (report, held-out route table, per-block ratio table)
    """
    sched = schedule_for(cfg)
    _, held_idx = split_indices(corpus.records, cfg.corpus.held_out_fraction)
    if not held_idx:
        raise ConfigurationError("corpus has no held-out prompts to evaluate on")
    predictor = experts.build_predictor()
    assignments, cosines = route_prompts(corpus.embeddings[held_idx], predictor, experts.codebook)
    N = len(experts.experts)
    routes = RouteTable(assignments=assignments, n_codes=N,
                        prompt_ids=[corpus.records[i].prompt_id for i in held_idx],
                        labels=[corpus.records[i].cluster_label for i in held_idx], cosines=cosines)
    entropy, shares = assignment_stats(routes, N)
    agreements, mean_agreement = routing_consistency(routes)
    budget = budget_report(experts, experts.spec, routes)
    before_model = pruning.build_model() if pruning is not None else None

    rows: List[ExpertEval] = []
    losses_after = np.zeros(len(held_idx))
    losses_before = np.zeros(len(held_idx))
    generated, real = [], []
    for expert in experts.experts:
        members = routes.members(expert.index)
        positions = [held_idx[j] for j in members]
        row = ExpertEval(index=expert.index, mac_fraction=budget.mac_fractions[expert.index],
                         usage_count=len(members), usage_share=float(shares[expert.index]),
                         trained=expert.trained)
        if positions:
            model = experts.build_model(expert.index)
            after = per_prompt_losses(model, expert.masks, corpus, positions, sched,
                                      rng.child("eval-loss"), cfg.eval.loss_repeats)
            losses_after[members] = after
            row.held_out_loss = float(after.mean())
            if before_model is not None:
                before = per_prompt_losses(before_model, expert.masks, corpus, positions, sched,
                                           rng.child("eval-loss"), cfg.eval.loss_repeats)
                losses_before[members] = before
                row.held_out_loss_before = float(before.mean())
            gen = sample(model, expert.masks, corpus.embeddings[positions], sched,
                         rng.child("eval-sample", expert.index)).cpu().numpy()
            ref = corpus.data[positions].cpu().numpy()
            generated.append(gen)
            real.append(ref)
            if len(positions) >= 2 or not cfg.eval.mmd_unbiased:
                row.mmd = toy_mmd(gen, ref, cfg.eval.mmd_bandwidth, cfg.eval.mmd_unbiased)
        rows.append(row)

    all_gen, all_real = np.concatenate(generated), np.concatenate(real)
    pooled_mmd = toy_mmd(all_gen, all_real, cfg.eval.mmd_bandwidth, cfg.eval.mmd_unbiased) \
        if len(all_gen) >= 2 else None
    difficulties = [corpus.records[i].difficulty for i in held_idx]
    report = EvalReport(
        variant=experts.variant,
        n_experts=N,
        experts=rows,
        assignment_entropy=entropy,
        min_usage_share=float(shares.min()),
        modal_agreement=agreements,
        mean_modal_agreement=mean_agreement,
        usage_weighted_mac_fraction=budget.usage_weighted_fraction,
        pooled_held_out_loss=float(losses_after.mean()),
        pooled_held_out_loss_before=float(losses_before.mean()) if before_model is not None else None,
        pooled_mmd=pooled_mmd,
        difficulty_budget_spearman=difficulty_budget_correlation(routes, difficulties, budget.mac_fractions),
        block_ratios={str(int(r["expert"])): [float(r[b.name]) for b in experts.spec.blocks]
                      for _, r in budget.block_ratios.iterrows()},
    )
    logger.info(f"Evaluated {N} experts: entropy {entropy:.4f}, agreement {mean_agreement:.4f}, "
                f"usage-weighted MACs {budget.usage_weighted_fraction:.4f}")
    return report, routes, budget.block_ratios
