# =========================
# Pydantic Schemas
# =========================
# This file defines the Pydantic models used to validate run configuration files
# and to serialize the records and reports the pipeline reads and writes.
# Every configuration model forbids unknown keys.

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

# =========================
# Configuration Schemas
# =========================


class StrictModel(BaseModel):
    """Base for configuration sections: unknown keys are rejected, assignment is validated."""
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class CorpusConfig(StrictModel):
    """
    Synthetic corpus generator settings.
    K clusters of prompt embeddings in R^{d_z}, each paired with a data pattern.
    """
    n_clusters: int = Field(8, ge=2, description="K, number of prompt clusters")
    embed_dim: int = Field(32, ge=2, description="d_z, prompt embedding dimension")
    prompts_per_cluster: int = Field(512, ge=0)
    sigma_c: float = Field(0.1, gt=0, le=0.5, description="relative norm of the intra-cluster perturbation")
    data_dim: int = Field(64, ge=2)
    data_noise: float = Field(0.05, ge=0)
    max_frequency: int = Field(16, ge=1, description="highest harmonic used by the hardest cluster")
    held_out_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def frequency_below_nyquist(self):
        if self.max_frequency > self.data_dim // 2:
            raise ValueError(f"max_frequency {self.max_frequency} exceeds data_dim/2 = {self.data_dim // 2}")
        return self


class ScheduleConfig(StrictModel):
    """Forward-process noise schedule parameters."""
    steps: int = Field(100, ge=2, description="T")
    kind: str = "linear"
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.2, gt=0, lt=1)

    @field_validator("kind")
    def known_kind(cls, v):
        if v != "linear":
            raise ValueError(f"Unsupported schedule kind: {v}")
        return v

    @model_validator(mode="after")
    def ordered_betas(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ModelConfig(StrictModel):
    """Toy encoder-decoder topology."""
    feature_dim: int = Field(64, ge=1)
    hidden: int = Field(32, ge=1, description="hidden units per block")
    t_embed_dim: int = Field(16, ge=2)

    @field_validator("t_embed_dim")
    def even_embedding(cls, v):
        if v % 2:
            raise ValueError("t_embed_dim must be even")
        return v


class PruningConfig(StrictModel):
    """
    Hyperparameters of the routed pruning phase.
    Defaults carry the published values; iteration counts are scaled to desk size.
    """
    gamma: float = Field(0.4, gt=0, description="Gumbel-sigmoid temperature")
    tau: float = Field(0.03, gt=0, description="contrastive temperature")
    eps_ot: float = Field(0.05, gt=0, description="entropic regularization of the assignment")
    sinkhorn_iters: int = Field(3, ge=1)
    lambda_distill: float = Field(0.2, ge=0)
    lambda_res: float = Field(2.0, ge=0)
    lambda_cont: float = Field(100.0, ge=0)
    target_macs: float = Field(0.7, gt=0, le=1, description="T_d, target MAC fraction")
    n_experts: int = Field(4, ge=1, description="N")
    pretrain_iters: int = Field(1500, ge=0)
    warmup_iters: int = Field(100, ge=0)
    joint_iters: int = Field(500, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(2e-4, gt=0)
    arch_lr: float = Field(0.05, gt=0, description="step size for codes and the architecture predictor")
    pretrain_lr: float = Field(1e-3, gt=0)
    lr_warmup: int = Field(100, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    init_logit: float = Field(1.5, description="initial predictor bias, keeps the start close to the full network")
    binarize_threshold: float = Field(0.5, gt=0, lt=1)
    kmeans_batches: int = Field(10, ge=1)
    kmeans_restarts: int = Field(10, ge=1)
    contrastive_sign_as_printed: bool = False


class FinetuneConfig(StrictModel):
    """Per-expert fine-tuning settings."""
    alpha_ddpm: float = Field(1e-4, ge=0)
    alpha_distill: float = Field(1.0, ge=0)
    iters: int = Field(1000, ge=0)
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def some_weight(self):
        if self.alpha_ddpm == 0 and self.alpha_distill == 0:
            raise ValueError("alpha_ddpm and alpha_distill cannot both be zero")
        return self


class EvalConfig(StrictModel):
    """Evaluation settings."""
    mmd_bandwidth: float = Field(0.0, description="<= 0 selects the median heuristic")
    mmd_unbiased: bool = True
    loss_repeats: int = Field(4, ge=1, description="noise draws per held-out prompt")
    reference_iters: int = Field(300, ge=1, description="budget of the per-cluster reference denoisers")


class RunConfig(StrictModel):
    """Root configuration: every section plus the run seed."""
    seed: int = Field(0, ge=0)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    pruning: PruningConfig = Field(default_factory=PruningConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump; stored as checkpoint provenance."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_run_config(path: Optional[Path] = None, seed: Optional[int] = None,
                    n_experts: Optional[int] = None) -> RunConfig:
    """
    Load and validate a run configuration.
    Missing file path means all defaults. CLI overrides are applied after parsing.
    Raises ConfigurationError on unreadable JSON or schema violations.
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    try:
        cfg = RunConfig.model_validate(data)
        if seed is not None:
            cfg.seed = seed
        if n_experts is not None:
            cfg.pruning.n_experts = n_experts
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e
    return cfg


# =========================
# Record Schemas
# =========================


class PromptRecord(BaseModel):
    """
    One prompt of the synthetic corpus.
    The embedding is stored verbatim; it stands in for a frozen text encoder output.
    """
    prompt_id: int
    cluster_label: Optional[int] = None
    embedding: Optional[List[float]] = None
    difficulty: float = Field(0.0, ge=0, le=1)


class Variant(str, Enum):
    full = "full"
    no_ot = "no_ot"
    no_distill = "no_distill"
    no_contrastive = "no_contrastive"
    uni_arch = "uni_arch"
    weight_norm = "weight_norm"


# =========================
# Report Schemas
# =========================


class ExpertEval(BaseModel):
    """Per-expert evaluation row."""
    index: int
    mac_fraction: float
    usage_count: int
    usage_share: float
    trained: bool = True
    held_out_loss: Optional[float] = None
    held_out_loss_before: Optional[float] = None
    mmd: Optional[float] = None


class EvalReport(BaseModel):
    """
    Desk-scale evaluation summary.
    Usage shares sum to one; entropy lies in [0, log N].
    """
    variant: str
    n_experts: int
    experts: List[ExpertEval]
    assignment_entropy: float
    min_usage_share: float
    modal_agreement: List[float]
    mean_modal_agreement: float
    usage_weighted_mac_fraction: float
    pooled_held_out_loss: float
    pooled_held_out_loss_before: Optional[float] = None
    pooled_mmd: Optional[float] = None
    difficulty_budget_spearman: Optional[float] = None
    block_ratios: Dict[str, List[float]] = Field(default_factory=dict)
