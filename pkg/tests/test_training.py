import json

import pytest
import torch

from promptprune.corpus import split_indices
from promptprune.errors import ConfigurationError, DivergenceError
from promptprune.models import estimate_macs, total_macs
from promptprune.numerics import DTYPE, RngStream
from promptprune.schemas import Variant
from promptprune.training import (TrainingLog, ablation_run, check_finite, draw_indices, effective_pruning_config,
                                  finetune, pretrain_teacher, prune, route_prompts, schedule_for, spec_for,
                                  weight_norm_prune)


def _with(cfg, **pruning):
    return cfg.model_copy(update={"pruning": cfg.pruning.model_copy(update=pruning)})


@pytest.fixture
def tiny_teacher(tiny_corpus, tiny_run_config):
    train_idx, _ = split_indices(tiny_corpus.records, tiny_run_config.corpus.held_out_fraction)
    return pretrain_teacher(tiny_corpus, train_idx, spec_for(tiny_run_config), schedule_for(tiny_run_config),
                            tiny_run_config.pruning, RngStream(0).child("teacher"))


@pytest.fixture
def pruned(tiny_corpus, tiny_run_config, tiny_teacher):
    return prune(tiny_corpus, tiny_run_config, RngStream(tiny_run_config.seed), teacher=tiny_teacher)


# =========================
# Training Log
# =========================


def test_training_log_writes_sorted_json_lines(tmp_path):
    path = tmp_path / "log.jsonl"
    with TrainingLog(path) as log:
        log.record("joint", 0, {"ddpm": torch.tensor(0.5), "resource": torch.tensor(0.25)})
        log.record("joint", 1, {"ddpm": torch.tensor(0.4), "resource": torch.tensor(0.2)})
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    first = json.loads(lines[0])
    assert first == {"event": "step", "phase": "joint", "iter": 0, "ddpm": 0.5, "resource": 0.25}
    assert list(first) == sorted(first)
    assert log.records[1]["iter"] == 1


def test_training_log_without_path_keeps_records_in_memory():
    log = TrainingLog()
    log.record("warmup", 3, {"ddpm": torch.tensor(1.0)})
    assert log.records == [{"phase": "warmup", "iter": 3, "ddpm": 1.0}]


# =========================
# Helpers
# =========================


def test_check_finite_names_offending_term():
    parts = {"ddpm": torch.tensor(0.1), "resource": torch.tensor(float("nan"))}
    with pytest.raises(DivergenceError, match="resource") as info:
        check_finite(torch.tensor(float("nan")), parts, 17, "joint")
    assert info.value.iteration == 17
    assert info.value.term == "resource"
    check_finite(torch.tensor(1.0), {"ddpm": torch.tensor(1.0)}, 0, "joint")


def test_draw_indices_is_seeded_and_distinct():
    pool = list(range(100, 130))
    a = draw_indices(pool, 8, RngStream(1).child("s", 0))
    assert a == draw_indices(pool, 8, RngStream(1).child("s", 0))
    assert len(set(a)) == 8 and set(a) <= set(pool)
    assert len(draw_indices(pool[:3], 8, RngStream(1))) == 3
    with pytest.raises(ConfigurationError):
        draw_indices([], 4, RngStream(1))


def test_effective_config_per_variant(tiny_run_config):
    base = tiny_run_config.pruning
    assert effective_pruning_config(base, Variant.no_distill).lambda_distill == 0.0
    assert effective_pruning_config(base, Variant.no_contrastive).lambda_cont == 0.0
    uni = effective_pruning_config(base, Variant.uni_arch)
    assert uni.n_experts == 1 and uni.lambda_cont == 0.0
    assert effective_pruning_config(base, Variant.full) == base


# =========================
# Teacher and Pruning
# =========================


def test_pretrained_teacher_is_frozen(tiny_teacher):
    assert all(not p.requires_grad for p in tiny_teacher.parameters())
    assert not tiny_teacher.training


def test_prune_produces_binary_experts(pruned, tiny_run_config):
    spec = spec_for(tiny_run_config)
    assert pruned.n_experts == 2
    assert pruned.codebook.shape == (2, spec.D)
    assert len(pruned.masks) == 2
    for masks, fraction in zip(pruned.masks, pruned.mac_fractions):
        assert masks.is_binary()
        assert 0 < fraction <= 1
        assert fraction == pytest.approx(float(estimate_macs(spec, masks)) / total_macs(spec), abs=1e-12)


def test_prune_logs_every_iteration(tmp_path, tiny_corpus, tiny_run_config):
    log_path = tmp_path / "train_log.jsonl"
    prune(tiny_corpus, tiny_run_config, RngStream(tiny_run_config.seed), log_path=log_path)
    phases = [json.loads(line)["phase"] for line in log_path.read_text().splitlines()]
    p = tiny_run_config.pruning
    assert phases.count("pretrain") == p.pretrain_iters
    assert phases.count("warmup") == p.warmup_iters
    assert phases.count("joint") == p.joint_iters
    joint = [json.loads(line) for line in log_path.read_text().splitlines() if '"joint"' in line]
    assert {"ddpm", "distill", "resource", "contrastive", "avg_mac_fraction"} <= set(joint[0])


def test_prune_is_deterministic(tmp_path, tiny_corpus, tiny_run_config):
    results = []
    for name in ("a", "b"):
        results.append(prune(tiny_corpus, tiny_run_config, RngStream(tiny_run_config.seed),
                             log_path=tmp_path / f"{name}.jsonl"))
    a, b = results
    assert torch.equal(a.codebook, b.codebook)
    for key in a.model_state:
        assert torch.equal(a.model_state[key], b.model_state[key]), key
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_prune_without_joint_phase(tiny_corpus, tiny_run_config, tiny_teacher):
    cfg = _with(tiny_run_config, joint_iters=0)
    result = prune(tiny_corpus, cfg, RngStream(1), teacher=tiny_teacher)
    assert result.n_experts == 2


def test_no_ot_variant_runs(tiny_corpus, tiny_run_config, tiny_teacher):
    result = ablation_run(Variant.no_ot, tiny_corpus, tiny_run_config, RngStream(2), teacher=tiny_teacher)
    assert result.variant == "no_ot"
    assert result.n_experts == 2


def test_single_code_variant_keeps_full_network_at_full_budget(tiny_corpus, tiny_run_config, tiny_teacher):
    cfg = _with(tiny_run_config, target_macs=1.0)
    result = ablation_run(Variant.uni_arch, tiny_corpus, cfg, RngStream(3), teacher=tiny_teacher)
    assert result.n_experts == 1
    assert result.mac_fractions == [1.0]


def test_weight_norm_baseline_meets_budget(tiny_teacher, tiny_run_config):
    spec = spec_for(tiny_run_config)
    pcfg = tiny_run_config.pruning
    result = weight_norm_prune(tiny_teacher, spec, pcfg)
    fraction = result.mac_fractions[0]
    largest_unit = max(spec.macs_per_unit().values()) / total_macs(spec)
    assert pcfg.target_macs - largest_unit <= fraction <= pcfg.target_macs
    assert bool((result.masks[0].u == 1).all())
    assert all(float(v.sum()) >= 1 for v in result.masks[0].v)
    assert result.variant == "weight_norm"


def test_weight_norm_baseline_is_seeded(tiny_teacher, tiny_run_config):
    spec = spec_for(tiny_run_config)
    pcfg = tiny_run_config.pruning
    states = [weight_norm_prune(tiny_teacher, spec, pcfg, RngStream(4)).predictor_state for _ in range(2)]
    assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])
    unseeded = [weight_norm_prune(tiny_teacher, spec, pcfg).predictor_state for _ in range(2)]
    assert all(torch.equal(unseeded[0][k], unseeded[1][k]) for k in unseeded[0])


# =========================
# Fine-tuning
# =========================


def test_finetune_routes_training_prompts(pruned, tiny_corpus, tiny_run_config):
    experts = finetune(pruned, tiny_corpus, tiny_run_config, RngStream(5))
    train_idx, _ = split_indices(tiny_corpus.records, tiny_run_config.corpus.held_out_fraction)
    assert sum(e.n_routed for e in experts.experts) == len(train_idx)
    for expert in experts.experts:
        assert expert.trained == (expert.n_routed > 0)
        assert torch.equal(expert.masks.to_vector(), pruned.masks[expert.index].to_vector())


def test_finetune_without_iterations_keeps_pruned_weights(pruned, tiny_corpus, tiny_run_config):
    cfg = tiny_run_config.model_copy(update={"finetune": tiny_run_config.finetune.model_copy(update={"iters": 0})})
    experts = finetune(pruned, tiny_corpus, cfg, RngStream(5))
    for expert in experts.experts:
        assert not expert.trained
        for key, value in pruned.model_state.items():
            assert torch.equal(expert.state[key], value)


def test_finetuned_experts_are_independent(pruned, tiny_corpus, tiny_run_config):
    experts = finetune(pruned, tiny_corpus, tiny_run_config, RngStream(6))
    trained = [e for e in experts.experts if e.trained]
    if len(trained) == 2:
        key = "out_proj.weight"
        assert not torch.equal(trained[0].state[key], trained[1].state[key])
    for expert in trained:
        assert not torch.equal(expert.state["out_proj.bias"], pruned.model_state["out_proj.bias"])


def test_route_prompts_matches_predictor_and_codes(pruned, tiny_corpus):
    predictor = pruned.build_predictor()
    indices, cosines = route_prompts(tiny_corpus.embeddings, predictor, pruned.codebook)
    assert indices.shape == (len(tiny_corpus),)
    assert ((indices >= 0) & (indices < pruned.n_experts)).all()
    assert (cosines <= 1 + 1e-12).all()
