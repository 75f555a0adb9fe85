import copy
import math

import numpy as np
import pytest
import torch

from promptprune.diffusion import ddpm_loss, make_batch
from promptprune.errors import ConfigurationError, NumericalError, ShapeMismatchError
from promptprune.models import MaskSet, fixed_macs, full_masks, total_macs
from promptprune.numerics import DTYPE, RngStream, grad_check, sample_gumbel, sample_normal
from promptprune.objectives import (DistillPair, code_gumbel_noise, contrastive_loss, distillation_loss,
                                    finetune_objective, item_gumbel_noise, mean_mac_fraction, pruning_objective,
                                    resource_loss, warmup_objective)
from promptprune.router import ArchitecturePredictor, Codebook, RouteTable, gumbel_sigmoid
from promptprune.schemas import FinetuneConfig, PruningConfig

from .conftest import LookupDenoiser


def _unit(*values):
    return torch.tensor(values, dtype=DTYPE)


# =========================
# Contrastive Term
# =========================


def test_contrastive_identical_vectors_give_log2():
    Z = torch.stack([_unit(1.0, 2.0), _unit(1.0, 2.0)])
    E = torch.stack([_unit(0.5, 0.5, 0.5), _unit(0.5, 0.5, 0.5)])
    assert float(contrastive_loss(Z, E, 0.03)) == pytest.approx(math.log(2), abs=1e-12)


def test_contrastive_orthogonal_prompts():
    Z = torch.stack([_unit(1.0, 0.0), _unit(0.0, 1.0)])
    same = torch.stack([_unit(1.0, 1.0), _unit(1.0, 1.0)])
    matched = torch.stack([_unit(1.0, 0.0), _unit(0.0, 1.0)])
    assert float(contrastive_loss(Z, same, 0.03)) == pytest.approx(math.log(2), abs=1e-6)
    assert float(contrastive_loss(Z, matched, 0.03)) < math.log(2) - 0.5


def test_contrastive_equal_similarities_give_entropy():
    Z = torch.rand(5, 4, generator=torch.Generator().manual_seed(0), dtype=DTYPE) + 0.1
    r = torch.softmax((Z / Z.norm(dim=1, keepdim=True)) @ (Z / Z.norm(dim=1, keepdim=True)).T / 0.5, dim=1)
    entropy = -(r * torch.log(r) + (1 - r) * torch.log(1 - r)).sum() / 25
    assert float(contrastive_loss(Z, Z, 0.5)) == pytest.approx(float(entropy), abs=1e-12)


def test_contrastive_bounded_below_by_entropy():
    gen = torch.Generator().manual_seed(1)
    Z = torch.randn(6, 4, generator=gen, dtype=DTYPE)
    E = torch.rand(6, 8, generator=gen, dtype=DTYPE)
    assert float(contrastive_loss(Z, E, 0.3)) >= float(contrastive_loss(Z, Z, 0.3)) - 1e-12


def test_contrastive_sign_switch():
    gen = torch.Generator().manual_seed(2)
    Z = torch.randn(4, 3, generator=gen, dtype=DTYPE)
    E = torch.rand(4, 5, generator=gen, dtype=DTYPE)
    assert float(contrastive_loss(Z, E, 0.1, sign_as_printed=True)) == -float(contrastive_loss(Z, E, 0.1))


def test_contrastive_needs_two_prompts():
    with pytest.raises(ConfigurationError):
        contrastive_loss(torch.ones(1, 3, dtype=DTYPE), torch.ones(1, 4, dtype=DTYPE), 0.03)


# =========================
# Resource Term
# =========================


def test_resource_loss_values():
    assert float(resource_loss(0.7, 0.7)) == 0.0
    assert float(resource_loss(0.85, 1.0)) == pytest.approx(0.16252, abs=1e-5)
    assert float(resource_loss(0.3, 0.6)) == pytest.approx(float(resource_loss(0.6, 0.3)), abs=1e-15)
    assert float(resource_loss(300.0, 600.0)) == pytest.approx(float(resource_loss(0.3, 0.6)), abs=1e-12)


def test_mean_mac_fraction_weights_codes_by_batch_share(tiny_spec):
    rows = torch.stack([torch.ones(tiny_spec.D, dtype=DTYPE), torch.zeros(tiny_spec.D, dtype=DTYPE)])
    masks = MaskSet.from_vector(rows, tiny_spec)
    # all-zero row still pays for MID (never pruned) and the input/output projections
    assert total_macs(tiny_spec) == 504.0
    empty = 4 * (12 + 6) + fixed_macs(tiny_spec)
    assert empty == 168
    value = mean_mac_fraction(tiny_spec, masks, torch.tensor([3, 1]))
    assert float(value) == pytest.approx((3 * 504 + empty) / (4 * 504), abs=1e-12)
    assert float(value) == pytest.approx(5 / 6, abs=1e-12)
    only_full = mean_mac_fraction(tiny_spec, masks, torch.tensor([5, 0]))
    assert float(only_full) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("x,y", [(0.0, 0.5), (0.5, 0.0), (-1.0, 0.5)])
def test_resource_loss_rejects_nonpositive(x, y):
    with pytest.raises(NumericalError):
        resource_loss(x, y)


# =========================
# Distillation Term
# =========================


def test_distillation_identical_outputs_give_zero():
    out = torch.randn(3, 4, dtype=DTYPE)
    blocks = [torch.randn(3, 2, dtype=DTYPE) for _ in range(2)]
    assert float(distillation_loss(DistillPair(out, out.clone(), blocks, [b.clone() for b in blocks]))) == 0.0


def test_distillation_shifted_output():
    out = torch.zeros(3, 4, dtype=DTYPE)
    assert float(distillation_loss(DistillPair(out, out + 1.0, [], []))) == 1.0


def test_distillation_block_count_mismatch():
    out = torch.zeros(2, 2, dtype=DTYPE)
    with pytest.raises(ShapeMismatchError):
        distillation_loss(DistillPair(out, out, [out], []))


def test_distillation_does_not_update_teacher():
    teacher_out = torch.randn(2, 3, dtype=DTYPE, requires_grad=True)
    student_out = torch.randn(2, 3, dtype=DTYPE, requires_grad=True)
    distillation_loss(DistillPair(teacher_out, student_out, [], [])).backward()
    assert teacher_out.grad is None
    assert student_out.grad is not None


def test_distillation_matches_direct_recomputation(tiny_model, tiny_corpus, tiny_schedule, tiny_spec):
    teacher = copy.deepcopy(tiny_model)
    batch = make_batch(tiny_corpus, [0, 9, 20], tiny_schedule, RngStream(4))
    masks = MaskSet.from_vector(torch.rand(tiny_spec.D, generator=torch.Generator().manual_seed(5), dtype=DTYPE),
                                tiny_spec)
    t_out, t_blocks = teacher(batch.xt, batch.z, batch.t)
    s_out, s_blocks = tiny_model(batch.xt, batch.z, batch.t, masks)
    expected = ((t_out - s_out) ** 2).mean() + sum(((a - b) ** 2).mean() for a, b in zip(t_blocks, s_blocks))
    got = distillation_loss(DistillPair(t_out, s_out, t_blocks, s_blocks))
    assert float(got) == pytest.approx(float(expected), abs=1e-12)


# =========================
# Term Gradients
# =========================


def test_contrastive_loss_gradients():
    Z = sample_normal((5, 4), RngStream(20))
    Eprime = torch.sigmoid(sample_normal((5, 6), RngStream(21))).requires_grad_(True)
    for sign_as_printed in (False, True):
        report = grad_check(lambda: contrastive_loss(Z, Eprime, 0.5, sign_as_printed), {"Eprime": Eprime})
        assert report.passed, report.errors


@pytest.mark.parametrize("x0", [0.55, 0.9])
def test_resource_loss_gradients_off_the_kink(x0):
    x = torch.tensor(x0, dtype=DTYPE, requires_grad=True)
    report = grad_check(lambda: resource_loss(x, 0.7), {"x": x})
    assert report.passed, report.errors
    resource_loss(x, 0.7).backward()
    assert float(x.grad) == pytest.approx(math.copysign(1.0 / x0, x0 - 0.7), abs=1e-12)


def test_resource_loss_gradients_through_soft_masks(tiny_spec):
    logits = (sample_normal((2, tiny_spec.D), RngStream(22)) + 2.0).requires_grad_(True)
    counts = torch.tensor([3, 5])

    def loss():
        fraction = mean_mac_fraction(tiny_spec, MaskSet.from_vector(torch.sigmoid(logits), tiny_spec), counts)
        return resource_loss(fraction, 0.5)

    report = grad_check(loss, {"logits": logits})
    assert report.passed, report.errors


def test_distillation_loss_gradients():
    t_out = sample_normal((3, 4), RngStream(23))
    t_blocks = [sample_normal((3, 2), RngStream(24 + b)) for b in range(2)]
    s_out = sample_normal((3, 4), RngStream(30)).requires_grad_(True)
    s_blocks = [sample_normal((3, 2), RngStream(31 + b)).requires_grad_(True) for b in range(2)]
    report = grad_check(lambda: distillation_loss(DistillPair(t_out, s_out, t_blocks, s_blocks)),
                        {"out": s_out, "block0": s_blocks[0], "block1": s_blocks[1]})
    assert report.passed, report.errors


# =========================
# Composed Pruning Objective
# =========================


def _setup(tiny_spec, tiny_corpus, tiny_schedule, n_codes=2, rows=(0, 5, 10, 15, 20, 25, 30, 35), seed=0):
    batch = make_batch(tiny_corpus, list(rows), tiny_schedule, RngStream(seed))
    codebook = Codebook(sample_normal((n_codes, tiny_spec.D), RngStream(seed + 1)) + 1.0)
    predictor = ArchitecturePredictor(tiny_spec.embed_dim, tiny_spec.D, init_logit=1.0, rng=RngStream(seed + 2))
    return batch, codebook, predictor


def test_perfect_denoiser_without_regularizers_scores_zero(tiny_spec, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule)
    oracle = LookupDenoiser(batch.xt, batch.eps, spec=tiny_spec)
    cfg = PruningConfig(lambda_distill=0.0, lambda_res=0.0, lambda_cont=0.0)
    route = RouteTable(assignments=[0, 1] * 4, n_codes=2)
    total, parts = pruning_objective(batch, route, codebook, oracle, oracle, cfg, predictor, rng=RngStream(1))
    assert float(total) == 0.0
    assert float(parts["ddpm"]) == 0.0


def test_single_expert_routing_matches_expert_ddpm(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule, n_codes=4)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    code_noise = code_gumbel_noise(4, tiny_spec.D, RngStream(3))
    route = RouteTable(assignments=[2] * len(batch), n_codes=4)
    _, parts = pruning_objective(batch, route, codebook, tiny_model, teacher, cfg, predictor,
                                 code_noise=code_noise)
    masks = MaskSet.from_vector(gumbel_sigmoid(codebook.codes[2], cfg.gamma, noise=code_noise[2]), tiny_spec)
    assert float(parts["ddpm"]) == pytest.approx(float(ddpm_loss(tiny_model, masks, batch)), abs=1e-12)


def test_total_is_weighted_sum_of_parts(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    route = RouteTable(assignments=[0, 0, 1, 1, 0, 1, 0, 1], n_codes=2)
    total, p = pruning_objective(batch, route, codebook, tiny_model, teacher, cfg, predictor, rng=RngStream(4))
    expected = (p["ddpm"] + cfg.lambda_distill * p["distill"] + cfg.lambda_res * p["resource"]
                + cfg.lambda_cont * p["contrastive"])
    assert float(total) == pytest.approx(float(expected), abs=1e-10)
    assert 0 < float(p["avg_mac_fraction"]) <= 1


def test_objective_is_invariant_to_batch_order(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    rows = [0, 5, 10, 15, 20, 25, 30, 35]
    assignments = [0, 1, 1, 0, 0, 1, 0, 1]
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule, rows=rows)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    total, _ = pruning_objective(batch, RouteTable(assignments=assignments, n_codes=2), codebook, tiny_model,
                                 teacher, cfg, predictor, rng=RngStream(6))
    perm = [3, 7, 0, 5, 1, 6, 2, 4]
    shuffled = make_batch(tiny_corpus, [rows[i] for i in perm], tiny_schedule, RngStream(0))
    route = RouteTable(assignments=[assignments[i] for i in perm], n_codes=2)
    total_perm, _ = pruning_objective(shuffled, route, codebook, tiny_model, teacher, cfg, predictor,
                                      rng=RngStream(6))
    assert float(total_perm) == pytest.approx(float(total), abs=1e-12)


def test_empty_experts_are_skipped(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule, n_codes=3)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    code_noise = code_gumbel_noise(3, tiny_spec.D, RngStream(7))
    assignments = [0, 0, 0, 0, 2, 2, 2, 2]
    _, parts = pruning_objective(batch, RouteTable(assignments=assignments, n_codes=3), codebook, tiny_model,
                                 teacher, cfg, predictor, code_noise=code_noise)
    per_expert = []
    for code, rows in ((0, [0, 1, 2, 3]), (2, [4, 5, 6, 7])):
        masks = MaskSet.from_vector(gumbel_sigmoid(codebook.codes[code], cfg.gamma, noise=code_noise[code]),
                                    tiny_spec)
        per_expert.append(float(ddpm_loss(tiny_model, masks, batch.subset(rows))))
    assert float(parts["ddpm"]) == pytest.approx(np.mean(per_expert), abs=1e-12)


def test_zero_contrastive_weight_skips_the_term(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig(lambda_cont=0.0)
    route = RouteTable(assignments=[0, 1] * 4, n_codes=2)
    total, parts = pruning_objective(batch, route, codebook, tiny_model, teacher, cfg, predictor, rng=RngStream(12))
    assert float(parts["contrastive"]) == 0.0
    total.backward()
    assert all(p.grad is None for p in predictor.parameters())
    assert codebook.codes.grad is not None

    single = batch.subset([0])
    total, _ = pruning_objective(single, RouteTable(assignments=[1], n_codes=2), codebook, tiny_model, teacher,
                                 cfg, predictor)
    assert math.isfinite(float(total))


def test_pruning_objective_gradients(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, codebook, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    route = RouteTable(assignments=[0, 1] * 4, n_codes=2)
    item_noise = item_gumbel_noise(batch, tiny_spec.D, RngStream(8))
    code_noise = code_gumbel_noise(2, tiny_spec.D, RngStream(9))
    params = {f"model.{k}": v for k, v in tiny_model.named_parameters()}
    params["codes"] = codebook.codes
    params.update({f"predictor.{k}": v for k, v in predictor.named_parameters()})

    def loss():
        return pruning_objective(batch, route, codebook, tiny_model, teacher, cfg, predictor,
                                 item_noise=item_noise, code_noise=code_noise)

    report = grad_check(loss, params, tol=1e-4)
    assert report.passed, report.errors


def test_warmup_objective_gradients(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    batch, _, predictor = _setup(tiny_spec, tiny_corpus, tiny_schedule)
    teacher = copy.deepcopy(tiny_model)
    cfg = PruningConfig()
    item_noise = item_gumbel_noise(batch, tiny_spec.D, RngStream(10))
    params = {f"predictor.{k}": v for k, v in predictor.named_parameters()}
    params["in_proj.weight"] = tiny_model.in_proj.weight

    report = grad_check(lambda: warmup_objective(batch, tiny_model, teacher, cfg, predictor, item_noise=item_noise),
                        params, tol=1e-4)
    assert report.passed, report.errors


def test_item_noise_is_keyed_by_prompt(tiny_corpus, tiny_schedule):
    rng = RngStream(11)
    a = make_batch(tiny_corpus, [1, 2], tiny_schedule, rng)
    b = make_batch(tiny_corpus, [2, 1], tiny_schedule, rng)
    na, nb = item_gumbel_noise(a, 5, rng), item_gumbel_noise(b, 5, rng)
    assert torch.equal(na[0], nb[1]) and torch.equal(na[1], nb[0])
    assert torch.equal(na[0], sample_gumbel((5,), rng.child("gumbel-item", a.prompt_ids[0])))


# =========================
# Fine-Tuning Objective
# =========================


def test_finetune_objective_limits(tiny_spec, tiny_model, tiny_corpus, tiny_schedule):
    teacher = copy.deepcopy(tiny_model)
    batch = make_batch(tiny_corpus, [3, 13, 23], tiny_schedule, RngStream(12))
    full = full_masks(tiny_spec)
    assert float(finetune_objective(batch, full, tiny_model, teacher,
                                    FinetuneConfig(alpha_ddpm=0.0, alpha_distill=1.0))) == 0.0

    masks = MaskSet.from_vector((torch.arange(tiny_spec.D) % 2).to(DTYPE), tiny_spec)
    only_ddpm = finetune_objective(batch, masks, tiny_model, teacher, FinetuneConfig(alpha_ddpm=0.5, alpha_distill=0.0))
    assert float(only_ddpm) == pytest.approx(0.5 * float(ddpm_loss(tiny_model, masks, batch)), abs=1e-12)

    cfg = FinetuneConfig()
    t_out, t_blocks = teacher(batch.xt, batch.z, batch.t)
    s_out, s_blocks = tiny_model(batch.xt, batch.z, batch.t, masks)
    distill = distillation_loss(DistillPair(t_out, s_out, t_blocks, s_blocks))
    expected = cfg.alpha_ddpm * float(ddpm_loss(tiny_model, masks, batch)) + cfg.alpha_distill * float(distill)
    assert float(finetune_objective(batch, masks, tiny_model, teacher, cfg)) == pytest.approx(expected, abs=1e-12)


def test_finetune_config_rejects_two_zero_weights():
    with pytest.raises(ValueError):
        FinetuneConfig(alpha_ddpm=0.0, alpha_distill=0.0)
