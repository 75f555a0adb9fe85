import json

import numpy as np
import pandas as pd
import pytest

from promptprune.main import run_command


def _run(*args):
    return run_command([str(a) for a in args])


@pytest.fixture
def pipeline_dir(tmp_path, tiny_config_file):
    out = tmp_path / "run"
    for command in ("gen-corpus", "prune", "finetune", "route", "sample", "eval", "report"):
        assert _run(command, "--config", tiny_config_file, "--out", out) == 0, command
    return out


def test_schema_command(capsys):
    assert _run("schema") == 0
    schema = json.loads(capsys.readouterr().out)
    assert "pruning" in schema["properties"]


def test_unknown_command_is_a_usage_error():
    assert _run("distill-everything") == 1


def test_unknown_option_is_a_usage_error(tmp_path):
    assert _run("prune", "--bogus", "--out", tmp_path) == 1


def test_invalid_config_is_rejected(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"pruning": {"gamma": -1.0}}))
    assert _run("gen-corpus", "--config", config, "--out", tmp_path / "out") == 1
    config.write_text(json.dumps({"unknown_section": {}}))
    assert _run("gen-corpus", "--config", config, "--out", tmp_path / "out") == 1


def test_missing_checkpoint_is_a_runtime_error(tmp_path, tiny_config_file):
    assert _run("finetune", "--config", tiny_config_file, "--out", tmp_path) == 2


def test_full_pipeline_artifacts(pipeline_dir):
    for name in ("corpus/index.json", "prune.ckpt", "finetune.ckpt", "train_log.jsonl", "routes.csv",
                 "samples.npy", "eval_report.json", "block_ratios.csv", "specialization.csv",
                 "extreme_budget_prompts.csv", "run_meta.json", "figures/utilization.png"):
        assert (pipeline_dir / name).exists(), name

    routes = pd.read_csv(pipeline_dir / "routes.csv")
    assert len(routes) == 40
    assert set(routes["code_index"]) <= {0, 1}

    report = json.loads((pipeline_dir / "eval_report.json").read_text())
    assert sum(e["usage_share"] for e in report["experts"]) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= report["assignment_entropy"] <= np.log(2) + 1e-12

    samples = np.load(pipeline_dir / "samples.npy")
    assert samples.shape == (4, 8)

    meta = json.loads((pipeline_dir / "run_meta.json").read_text())
    assert {"gen-corpus", "prune", "finetune", "eval"} <= set(meta)


def test_report_writes_every_figure(pipeline_dir):
    figures = pipeline_dir / "figures"
    for term in ("ddpm", "distill", "resource", "contrastive", "avg_mac_fraction"):
        assert (figures / f"loss_{term}.png").stat().st_size > 0, term
    assert (figures / "block_ratios.png").stat().st_size > 0


def test_report_without_artifacts_is_a_configuration_error(tmp_path, tiny_config_file):
    assert _run("report", "--config", tiny_config_file, "--out", tmp_path / "empty") == 1


def test_route_with_prompt_file(pipeline_dir, tiny_config_file, tmp_path):
    prompts = tmp_path / "prompts.jsonl"
    prompts.write_text('{"prompt_id": 900, "embedding": [0.5, 0.5, 0.5, 0.5]}\n'
                       '{"prompt_id": 901, "cluster_label": 2}\n')
    assert _run("route", "--config", tiny_config_file, "--out", pipeline_dir, "--prompts", prompts) == 0
    routes = pd.read_csv(pipeline_dir / "routes.csv")
    assert routes["prompt_id"].tolist() == [900, 901]


def test_changed_config_needs_force(pipeline_dir, tiny_config_file):
    assert _run("eval", "--config", tiny_config_file, "--out", pipeline_dir, "--seed", 99) == 2
    assert _run("eval", "--config", tiny_config_file, "--out", pipeline_dir, "--seed", 99, "--force") == 0


def test_pipeline_is_reproducible(tmp_path, tiny_config_file):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for command in ("gen-corpus", "prune", "finetune", "route", "eval"):
            assert _run(command, "--config", tiny_config_file, "--out", out) == 0, command
    for name in ("prune.ckpt", "finetune.ckpt", "train_log.jsonl", "routes.csv", "eval_report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_ablation_variant_from_cli(tmp_path, tiny_config_file):
    out = tmp_path / "uni"
    assert _run("prune", "--config", tiny_config_file, "--out", out, "--variant", "uni_arch") == 0
    assert _run("prune", "--config", tiny_config_file, "--out", out, "--variant", "nonsense") == 1
