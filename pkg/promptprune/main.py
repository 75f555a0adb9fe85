# =========================
# Command-Line Interface
# =========================
# This file contains the `promptprune` commands that tie the pipeline together:
# corpus generation, pruning (and its ablations), fine-tuning, routing, sampling,
# evaluation and reporting. Every command reads the same JSON run configuration,
# writes its artifacts atomically under --out, and records wall-clock timestamps
# only in run_meta.json.

import functools
import io
import json
import logging
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence

import click
import numpy as np
import torch
from rich.console import Console

from . import configure_logging
from .checkpoint import (expert_checkpoint, experts_from_checkpoint, load_checkpoint, pruning_checkpoint,
                         pruning_result_from_checkpoint, save_checkpoint)
from .corpus import Corpus, gen_corpus, load_corpus, load_prompt_file, save_corpus, split_indices
from .diffusion import sample
from .errors import ConfigurationError, PromptPruneError
from .evaluation import difficulty_ordering, evaluate, extreme_budget_prompts, specialization_table
from .numerics import RngStream
from .reporting import (frame_table, plot_block_ratios, plot_loss_curves, plot_utilization, report_table)
from .router import RouteTable, encode_prompt, write_routes_csv
from .schemas import EvalReport, RunConfig, Variant, load_run_config
from .settings import get_settings
from .training import ablation_run, finetune, prune, route_prompts, schedule_for
from .utils import atomic_write_bytes, write_csv, write_json

logger = logging.getLogger(__name__)
console = Console(stderr=True)

# Artifact names inside --out
CORPUS_DIR = "corpus"
PRUNE_CKPT = "prune.ckpt"
FINETUNE_CKPT = "finetune.ckpt"
TRAIN_LOG = "train_log.jsonl"
ROUTES_CSV = "routes.csv"
SAMPLES_NPY = "samples.npy"
EVAL_REPORT = "eval_report.json"
BLOCK_RATIOS_CSV = "block_ratios.csv"
SPECIALIZATION_CSV = "specialization.csv"
EXTREMES_CSV = "extreme_budget_prompts.csv"
DIFFICULTY_JSON = "difficulty_ordering.json"
RUN_META = "run_meta.json"
FIGURES_DIR = "figures"

# =========================
# Run Context
# =========================


@dataclass
class RunContext:
    cfg: RunConfig
    out: Path
    force: bool = False

    @property
    def rng(self) -> RngStream:
        return RngStream(self.cfg.seed)

    def path(self, name: str) -> Path:
        return self.out / name

    def corpus(self) -> Corpus:
        """Load the run's corpus, generating and saving it on first use."""
        directory = self.path(CORPUS_DIR)
        if (directory / "index.json").exists():
            return load_corpus(directory)
        corpus = gen_corpus(self.cfg.corpus)
        save_corpus(corpus, directory)
        return corpus

    def load_pruning(self):
        ckpt = load_checkpoint(self.path(PRUNE_CKPT), self.cfg.config_hash(), self.force)
        return pruning_result_from_checkpoint(ckpt)

    def load_experts(self):
        ckpt = load_checkpoint(self.path(FINETUNE_CKPT), self.cfg.config_hash(), self.force)
        return experts_from_checkpoint(ckpt)


def _record_meta(ctx: RunContext, command: str, started: datetime) -> None:
    """Append this command's wall-clock record to run_meta.json."""
    path = ctx.path(RUN_META)
    meta = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    meta[command] = {
        "started_at": started.isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "seed": ctx.cfg.seed,
        "config_hash": ctx.cfg.config_hash(),
        "argv": sys.argv[1:],
    }
    write_json(path, meta)


def run_options(func):
    """Options shared by every pipeline command; builds the RunContext."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                  help="JSON run configuration (defaults when omitted).")
    @click.option("--seed", type=int, default=None, help="Override the run seed.")
    @click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("runs/default"),
                  show_default=True, help="Output directory for all artifacts.")
    @click.option("--experts", type=click.IntRange(min=1), default=None, help="Override the expert count N.")
    @click.option("--force", is_flag=True, help="Load checkpoints written under a different config hash.")
    @functools.wraps(func)
    def wrapper(config_path, seed, out, experts, force, **kwargs):
        cfg = load_run_config(config_path, seed=seed, n_experts=experts)
        settings = get_settings()
        torch.set_num_threads(settings.num_threads)
        out.mkdir(parents=True, exist_ok=True)
        configure_logging(settings.log_level, out / settings.log_file)
        ctx = RunContext(cfg=cfg, out=out, force=force)
        started = datetime.now(timezone.utc)
        logger.info(f"Running {func.__name__.removesuffix('_cmd')} with config hash {cfg.config_hash()[:12]}, seed {cfg.seed}")
        result = func(ctx, **kwargs)
        _record_meta(ctx, func.__name__.removesuffix("_cmd").replace("_", "-"), started)
        return result

    return wrapper


@click.group()
def cli():
    """Prompt-routed pruning of a toy conditional denoiser."""


# =========================
# Pipeline Commands
# =========================


@cli.command("gen-corpus")
@run_options
def gen_corpus_cmd(ctx: RunContext):
    """Generate the synthetic corpus into OUT/corpus."""
    corpus = gen_corpus(ctx.cfg.corpus)
    save_corpus(corpus, ctx.path(CORPUS_DIR))
    click.echo(f"Wrote {len(corpus)} prompts to {ctx.path(CORPUS_DIR)}")


@cli.command("prune")
@run_options
@click.option("--variant", type=click.Choice([v.value for v in Variant]), default=Variant.full.value,
              show_default=True, help="Full method, an ablation, or a static baseline.")
def prune_cmd(ctx: RunContext, variant: str):
    """Pre-train the teacher, learn codes and router, and binarize the experts."""
    corpus = ctx.corpus()
    variant = Variant(variant)
    log_path = ctx.path(TRAIN_LOG)
    if variant == Variant.full:
        result = prune(corpus, ctx.cfg, ctx.rng, log_path=log_path)
    else:
        result = ablation_run(variant, corpus, ctx.cfg, ctx.rng, log_path=log_path)
    save_checkpoint(pruning_checkpoint(result, ctx.cfg, ctx.rng), ctx.path(PRUNE_CKPT))
    fractions = ", ".join(f"{f:.3f}" for f in result.mac_fractions)
    click.echo(f"Pruned {result.n_experts} experts ({variant.value}); MAC fractions: {fractions}")


@cli.command("finetune")
@run_options
def finetune_cmd(ctx: RunContext):
    """Fine-tune every expert on the training prompts routed to it."""
    corpus = ctx.corpus()
    result = ctx.load_pruning()
    experts = finetune(result, corpus, ctx.cfg, ctx.rng.child("finetune"))
    save_checkpoint(expert_checkpoint(experts, ctx.cfg, ctx.rng), ctx.path(FINETUNE_CKPT))
    trained = sum(e.trained for e in experts.experts)
    click.echo(f"Fine-tuned {trained} of {len(experts.experts)} experts")


def _routing_source(ctx: RunContext):
    """Fine-tuned experts when present, else the pruning result."""
    if ctx.path(FINETUNE_CKPT).exists():
        return ctx.load_experts()
    return ctx.load_pruning()


def _prompt_embeddings(ctx: RunContext, prompts: Optional[Path], corpus: Corpus):
    if prompts is None:
        return corpus.embeddings, corpus.prompt_ids, corpus.labels
    records = load_prompt_file(prompts)
    if not records:
        raise ConfigurationError(f"prompt file {prompts} is empty")
    z = torch.stack([encode_prompt(r, corpus.cluster_means) for r in records])
    return z, [r.prompt_id for r in records], [r.cluster_label for r in records]


@cli.command("route")
@run_options
@click.option("--prompts", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="JSON-lines prompt file; defaults to every corpus prompt.")
def route_cmd(ctx: RunContext, prompts: Optional[Path]):
    """Write the inference routing table (one row per prompt) to OUT/routes.csv."""
    corpus = ctx.corpus()
    source = _routing_source(ctx)
    z, prompt_ids, labels = _prompt_embeddings(ctx, prompts, corpus)
    indices, cosines = route_prompts(z, source.build_predictor(), source.codebook)
    table = RouteTable(assignments=indices, n_codes=source.codebook.shape[0], prompt_ids=prompt_ids,
                       labels=labels, cosines=cosines)
    write_routes_csv(ctx.path(ROUTES_CSV), table)
    click.echo(f"Routed {len(table)} prompts; counts per expert: {table.counts.tolist()}")


@cli.command("sample")
@run_options
@click.option("--prompts", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="JSON-lines prompt file; defaults to the held-out split.")
@click.option("--count", type=click.IntRange(min=1), default=16, show_default=True,
              help="Number of prompts to sample for.")
def sample_cmd(ctx: RunContext, prompts: Optional[Path], count: int):
    """Generate one sample per prompt with its routed expert; writes OUT/samples.npy."""
    corpus = ctx.corpus()
    experts = ctx.load_experts()
    if prompts is None:
        _, held = split_indices(corpus.records, ctx.cfg.corpus.held_out_fraction)
        held = held[:count]
        z, prompt_ids = corpus.embeddings[held], [corpus.records[i].prompt_id for i in held]
    else:
        z, prompt_ids, _ = _prompt_embeddings(ctx, prompts, corpus)
        z, prompt_ids = z[:count], prompt_ids[:count]
    indices, _ = route_prompts(z, experts.build_predictor(), experts.codebook)
    sched = schedule_for(ctx.cfg)
    rng = ctx.rng.child("sample")
    models = {}
    rows = []
    for row, (pid, expert) in enumerate(zip(prompt_ids, indices)):
        if expert not in models:
            models[expert] = experts.build_model(int(expert))
        masks = experts.experts[int(expert)].masks
        rows.append(sample(models[expert], masks, z[row], sched, rng.child("prompt", pid)).cpu().numpy())
    buffer = io.BytesIO()
    np.save(buffer, np.stack(rows))
    atomic_write_bytes(ctx.path(SAMPLES_NPY), buffer.getvalue())
    click.echo(f"Wrote {len(rows)} samples to {ctx.path(SAMPLES_NPY)}")


@cli.command("eval")
@run_options
@click.option("--difficulty", is_flag=True, help="Also train per-cluster reference denoisers "
                                                 "and report the difficulty ordering.")
def eval_cmd(ctx: RunContext, difficulty: bool):
    """Evaluate the fine-tuned experts on the held-out split."""
    corpus = ctx.corpus()
    experts = ctx.load_experts()
    pruning = ctx.load_pruning() if ctx.path(PRUNE_CKPT).exists() else None
    report, routes, block_ratios = evaluate(experts, corpus, ctx.cfg, ctx.rng.child("eval"), pruning=pruning)
    write_json(ctx.path(EVAL_REPORT), report.model_dump(mode="json"))
    write_csv(ctx.path(BLOCK_RATIOS_CSV), block_ratios)
    fractions = [e.mac_fraction for e in report.experts]
    specialization = specialization_table(routes, fractions)
    extremes = extreme_budget_prompts(routes, fractions)
    write_csv(ctx.path(SPECIALIZATION_CSV), specialization)
    write_csv(ctx.path(EXTREMES_CSV), extremes)
    console.print(report_table(report))
    console.print(frame_table(specialization, "Prompts per expert by cluster"))
    if difficulty:
        rho, losses = difficulty_ordering(corpus, ctx.cfg, ctx.rng.child("difficulty"))
        write_json(ctx.path(DIFFICULTY_JSON), {"spearman": rho, "losses": {str(k): v for k, v in losses.items()}})
        click.echo(f"Difficulty ordering: Spearman {rho}")


@cli.command("report")
@run_options
def report_cmd(ctx: RunContext):
    """Render figures from the training log and the evaluation outputs into OUT/figures."""
    import pandas as pd

    figures = ctx.path(FIGURES_DIR)
    written: List[Path] = []
    if ctx.path(TRAIN_LOG).exists():
        written.extend(plot_loss_curves(ctx.path(TRAIN_LOG), figures))
    if ctx.path(EVAL_REPORT).exists():
        report = EvalReport.model_validate_json(ctx.path(EVAL_REPORT).read_text(encoding="utf-8"))
        written.append(plot_utilization(report, figures))
        console.print(report_table(report))
    if ctx.path(BLOCK_RATIOS_CSV).exists():
        written.append(plot_block_ratios(pd.read_csv(ctx.path(BLOCK_RATIOS_CSV)), figures))
    if not written:
        raise ConfigurationError(f"nothing to report in {ctx.out}; run prune/eval first")
    click.echo(f"Wrote {len(written)} figures to {figures}")


@cli.command("schema")
def schema_cmd():
    """Print the JSON schema of the run configuration."""
    click.echo(json.dumps(RunConfig.model_json_schema(), indent=2, sort_keys=True))


# =========================
# Entry Point
# =========================


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one command and map the outcome to an exit code:
    0 success, 1 usage or configuration error, 2 runtime or divergence error.
    """
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="promptprune", standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        click.echo(f"Configuration error: {e}", err=True)
        return 1
    except PromptPruneError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"{type(e).__name__}: {e}", err=True)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())
