# =========================
# Prompt Router
# =========================
# Maps prompt embeddings to architecture codes:
#   encode_prompt -> ArchitecturePredictor (one affine layer) -> gumbel_sigmoid
# During pruning, prompts are assigned to codes by a balanced (equipartition)
# Sinkhorn-Knopp plan; at inference, by the highest cosine similarity.

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from .errors import ConfigurationError, NumericalError, ShapeMismatchError
from .numerics import DTYPE, RngStream, cosine_matrix, sample_gumbel
from .schemas import PromptRecord
from .utils import write_csv

logger = logging.getLogger(__name__)

# =========================
# Prompt and Architecture Embeddings
# =========================


def encode_prompt(record: PromptRecord, cluster_means: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Frozen prompt encoder.
    Returns the stored embedding verbatim; a record without one falls back to its
    cluster mean when the means are supplied. Raises ConfigurationError otherwise.
    """
    if record.embedding is not None:
        z = torch.tensor(record.embedding, dtype=DTYPE)
    elif cluster_means is not None and record.cluster_label is not None:
        z = cluster_means[record.cluster_label].to(DTYPE).clone()
    else:
        raise ConfigurationError(f"prompt {record.prompt_id} has no embedding and no cluster key")
    if not bool(torch.isfinite(z).all()) or float(torch.linalg.vector_norm(z)) == 0.0:
        raise NumericalError(f"prompt {record.prompt_id} has a zero or non-finite embedding")
    return z


class ArchitecturePredictor(nn.Module):
    """Single feed-forward layer e = W z + b from prompt space to the D architecture logits."""

    def __init__(self, embed_dim: int, arch_dim: int, init_logit: float = 0.0, rng: Optional[RngStream] = None):
        super().__init__()
        self.linear = nn.Linear(embed_dim, arch_dim, dtype=DTYPE)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(embed_dim)
            gen = rng.generator() if rng is not None else None
            self.linear.weight.copy_((torch.rand(self.linear.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            self.linear.bias.fill_(init_logit)

    @property
    def embed_dim(self) -> int:
        return self.linear.in_features

    @property
    def arch_dim(self) -> int:
        return self.linear.out_features

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.linear(z)


def predict_arch_embedding(z: torch.Tensor, predictor: ArchitecturePredictor) -> torch.Tensor:
    """e = f_AP(z; eta). Raises ShapeMismatchError when dim(z) != d_z."""
    if z.shape[-1] != predictor.embed_dim:
        raise ShapeMismatchError(f"prompt embedding has dim {z.shape[-1]}, predictor expects {predictor.embed_dim}")
    return predictor(z)


class Codebook(nn.Module):
    """N learnable architecture codes of dimension D, laid out as [v_1 .. v_L, u_1 .. u_M]."""

    def __init__(self, codes: torch.Tensor):
        super().__init__()
        if codes.dim() != 2 or codes.shape[0] < 1:
            raise ConfigurationError("codebook needs at least one code")
        self.codes = nn.Parameter(codes.detach().to(DTYPE).clone())

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    @property
    def D(self) -> int:
        return self.codes.shape[1]


def gumbel_sigmoid(logits: torch.Tensor, gamma: float, rng: Optional[RngStream] = None,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    sigmoid((logits + g) / gamma) with g ~ Gumbel(0, 1).
    With neither rng nor noise, g = 0 (evaluation mode). `noise` fixes g explicitly.
    """
    if gamma <= 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    if noise is None:
        noise = sample_gumbel(logits.shape, rng) if rng is not None else torch.zeros_like(logits)
    return torch.sigmoid((logits + noise) / gamma)


# =========================
# Balanced Assignment (Sinkhorn-Knopp)
# =========================


@dataclass
class AssignmentMatrix:
    """
    Entropic transport plan Q = diag(m) exp(S / eps) diag(n) over (codes x batch).
    Rows sum to 1/N and columns to 1/B.
    """
    Q: torch.Tensor
    m: torch.Tensor
    n: torch.Tensor
    eps_ot: float

    @property
    def N(self) -> int:
        return self.Q.shape[0]

    @property
    def B(self) -> int:
        return self.Q.shape[1]

    def entropy(self) -> float:
        q = self.Q[self.Q > 0]
        return float(-(q * torch.log(q)).sum())


def sinkhorn_from_scores(scores: torch.Tensor, eps_ot: float, iters: int) -> AssignmentMatrix:
    """
    Log-domain Sinkhorn-Knopp on an N x B similarity matrix.
    Alternates the row step (sums 1/N) and the column step (sums 1/B) `iters` times,
    ending on the column step.
    """
    if eps_ot <= 0 or iters < 1:
        raise ConfigurationError(f"need eps_ot > 0 and iters >= 1, got {eps_ot}, {iters}")
    if scores.dim() != 2 or min(scores.shape) < 1:
        raise ShapeMismatchError(f"score matrix must be N x B with N, B >= 1, got {tuple(scores.shape)}")
    if not bool(torch.isfinite(scores).all()):
        raise NumericalError("non-finite assignment scores")
    with torch.no_grad():
        K = scores.detach().to(DTYPE) / eps_ot
        N, B = K.shape
        log_m = torch.zeros(N, dtype=DTYPE)
        log_n = torch.full((B,), -float(torch.logsumexp(K.reshape(-1), dim=0)), dtype=DTYPE)
        for _ in range(iters):
            log_q = K + log_m[:, None] + log_n[None, :]
            log_m = log_m - torch.logsumexp(log_q, dim=1) - math.log(N)
            log_q = K + log_m[:, None] + log_n[None, :]
            log_n = log_n - torch.logsumexp(log_q, dim=0) - math.log(B)
        Q = torch.exp(K + log_m[:, None] + log_n[None, :])
    return AssignmentMatrix(Q=Q, m=torch.exp(log_m), n=torch.exp(log_n), eps_ot=eps_ot)


def sinkhorn_assign(E: torch.Tensor, A: torch.Tensor, eps_ot: float, iters: int) -> AssignmentMatrix:
    """Balanced assignment of a batch of architecture embeddings E (B x D) to codes A (N x D) on cosine scores."""
    if E.shape[-1] != A.shape[-1]:
        raise ShapeMismatchError(f"embeddings have dim {E.shape[-1]}, codes have dim {A.shape[-1]}")
    scores = cosine_matrix(A.detach(), E.detach(), what="codes and architecture embeddings")
    return sinkhorn_from_scores(scores, eps_ot, iters)


# =========================
# Route Tables
# =========================


@dataclass
class RouteTable:
    """Per-prompt code index plus optional provenance columns for CSV export."""
    assignments: np.ndarray
    n_codes: int
    prompt_ids: Optional[Sequence[int]] = None
    labels: Optional[Sequence[Optional[int]]] = None
    cosines: Optional[np.ndarray] = None

    def __post_init__(self):
        self.assignments = np.asarray(self.assignments, dtype=np.int64)
        if self.assignments.size and (self.assignments.min() < 0 or self.assignments.max() >= self.n_codes):
            raise ConfigurationError(f"route indices must lie in [0, {self.n_codes})")

    def __len__(self) -> int:
        return int(self.assignments.size)

    @property
    def counts(self) -> np.ndarray:
        """B^(i): number of prompts routed to each code."""
        return np.bincount(self.assignments, minlength=self.n_codes)

    def members(self, code: int) -> np.ndarray:
        """Batch positions routed to `code`."""
        return np.flatnonzero(self.assignments == code)

    def to_frame(self) -> pd.DataFrame:
        n = len(self)
        prompt_ids = list(self.prompt_ids) if self.prompt_ids is not None else list(range(n))
        labels = list(self.labels) if self.labels is not None else [None] * n
        cosines = self.cosines if self.cosines is not None else np.full(n, np.nan)
        return pd.DataFrame({
            "prompt_id": prompt_ids,
            "cluster_label": pd.array(labels, dtype="Int64"),
            "code_index": self.assignments,
            "cosine_to_code": np.asarray(cosines, dtype=np.float64),
        })


def write_routes_csv(path: Path, table: RouteTable) -> None:
    """Export columns prompt_id, cluster_label, code_index, cosine_to_code."""
    write_csv(path, table.to_frame())


def route_pruning(plan: AssignmentMatrix, A: Optional[torch.Tensor] = None) -> RouteTable:
    """
    I = argmax over codes of B * Q, ties to the lowest index.
    A is accepted for interface symmetry with route_inference; only the plan decides.
    """
    scaled = (plan.B * plan.Q).cpu().numpy()
    assignments = np.argmax(scaled, axis=0)  # first maximum wins
    return RouteTable(assignments=assignments, n_codes=plan.N)


def route_inference_batch(E: torch.Tensor, A: torch.Tensor) -> Tuple[np.ndarray, np.ndarray]:
    """Highest-cosine code per row of E; returns (indices, cosine to the chosen code)."""
    if E.dim() == 1:
        E = E.unsqueeze(0)
    if E.shape[-1] != A.shape[-1]:
        raise ShapeMismatchError(f"embeddings have dim {E.shape[-1]}, codes have dim {A.shape[-1]}")
    with torch.no_grad():
        cos = cosine_matrix(E.detach().to(DTYPE), A.detach().to(DTYPE), what="architecture embeddings and codes")
    cos_np = cos.cpu().numpy()
    indices = np.argmax(cos_np, axis=1)
    return indices, cos_np[np.arange(len(indices)), indices]


def route_inference(e: torch.Tensor, A: torch.Tensor) -> int:
    """argmax_i cosine_sim(e, a_i), ties to the lowest index. Zero norms raise NumericalError."""
    indices, _ = route_inference_batch(e, A)
    return int(indices[0])


def init_codebook_kmeans(E: torch.Tensor, n_codes: int, seed: int, restarts: int = 10) -> Codebook:
    """
    Initialize codes as the k-means centroids of collected architecture embeddings.
    Requires at least as many embeddings as codes.
    """
    X = E.detach().cpu().numpy().astype(np.float64)
    if X.shape[0] < n_codes:
        raise ConfigurationError(f"k-means needs at least {n_codes} embeddings, got {X.shape[0]}")
    km = KMeans(n_clusters=n_codes, n_init=restarts, random_state=seed)
    km.fit(X)
    logger.info(f"Initialized {n_codes} codes by k-means over {X.shape[0]} embeddings (inertia {km.inertia_:.4f})")
    return Codebook(torch.from_numpy(km.cluster_centers_.astype(np.float64)))
