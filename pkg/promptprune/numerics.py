# =========================
# Numerics: Seeded Sampling, Similarity, Gradient Checks
# =========================
# Deterministic random streams, Gumbel/Gaussian samplers, cosine similarity and
# a central-difference gradient checker used by every other module.
# All tensors are float64.

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import torch

from .errors import NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
GUMBEL_CLAMP = 1e-12

# =========================
# Random Streams
# =========================


def _hash_to_int(*parts) -> int:
    """Stable 63-bit key from any sequence of ints/strings (platform independent)."""
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


@dataclass
class RngStream:
    """
    A reproducible random stream identified by (seed, stream_id).
    Every call to generator() yields a fresh torch.Generator keyed by
    (seed, stream_id, call index), so a sampler is a pure function of those three.
    """
    seed: int
    stream_id: int = 0
    calls: int = field(default=0, compare=False)

    def child(self, tag: str, *indices: int) -> "RngStream":
        """Derive an independent sub-stream from a phase tag and indices (iteration, item, ...)."""
        return RngStream(self.seed, _hash_to_int(self.stream_id, tag, *[int(i) for i in indices]))

    def _next_key(self) -> int:
        key = _hash_to_int(self.seed, self.stream_id, self.calls)
        self.calls += 1
        return key

    def generator(self) -> torch.Generator:
        gen = torch.Generator()
        gen.manual_seed(self._next_key())
        return gen

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._next_key()))

    def state(self) -> Dict[str, int]:
        return {"seed": self.seed, "stream_id": self.stream_id, "calls": self.calls}


def sample_gumbel(shape: Sequence[int], rng: RngStream) -> torch.Tensor:
    """
    I.i.d. standard Gumbel draws via inverse CDF -log(-log(U)).
    U is clamped away from 0 and 1 so no draw is infinite. Zero-size shapes give empty tensors.
    """
    u = torch.rand(tuple(shape), generator=rng.generator(), dtype=DTYPE)
    u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -torch.log(-torch.log(u))


def sample_normal(shape: Sequence[int], rng: RngStream) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=rng.generator(), dtype=DTYPE)


# =========================
# Similarity
# =========================


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def cosine_sim(m, n) -> torch.Tensor:
    """
    Cosine similarity m.n / (|m||n|) of two equal-length vectors.
    Raises NumericalError on a zero-norm input.
    """
    m, n = _as_tensor(m), _as_tensor(n)
    if m.shape != n.shape or m.dim() != 1:
        raise ShapeMismatchError(f"cosine_sim expects equal-length vectors, got {tuple(m.shape)} and {tuple(n.shape)}")
    norm_m, norm_n = torch.linalg.vector_norm(m), torch.linalg.vector_norm(n)
    if norm_m.item() == 0.0 or norm_n.item() == 0.0:
        raise NumericalError("cosine_sim: zero-norm input")
    value = torch.dot(m, n) / (norm_m * norm_n)
    return value.clamp(-1.0, 1.0)


def normalize_rows(x: torch.Tensor, what: str = "rows") -> torch.Tensor:
    """Unit-normalize each row; a zero row is an error (routing never divides by zero)."""
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalError(f"zero-norm vector among {what}")
    return x / norms


def cosine_matrix(x: torch.Tensor, y: torch.Tensor, what: str = "rows") -> torch.Tensor:
    """Pairwise cosine similarities between the rows of x and the rows of y."""
    return normalize_rows(x, what) @ normalize_rows(y, what).T


# =========================
# Gradient Checking
# =========================

LossOutput = Union[torch.Tensor, Tuple[torch.Tensor, Mapping[str, torch.Tensor]]]


@dataclass
class GradCheckReport:
    """Per-parameter maximum scaled error between analytic and central-difference gradients."""
    errors: Dict[str, float]
    tol: float
    step: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _split_loss(out: LossOutput) -> Tuple[torch.Tensor, Mapping[str, torch.Tensor]]:
    if isinstance(out, tuple):
        return out[0], out[1]
    return out, {}


def _ensure_finite(total: torch.Tensor, parts: Mapping[str, torch.Tensor]) -> None:
    if math.isfinite(float(total)):
        return
    bad = [name for name, value in parts.items() if not math.isfinite(float(value))]
    term = ", ".join(bad) if bad else "total"
    raise NumericalError(f"non-finite loss in term: {term}")


def grad_check(loss: Callable[[], LossOutput],
               params: Union[Mapping[str, torch.Tensor], Sequence[torch.Tensor]],
               step: float = 1e-6, tol: float = 1e-4, floor: float = 1e-3) -> GradCheckReport:
    """
    Compare autograd gradients with central finite differences.

    `loss` is a zero-argument closure returning a scalar tensor, or a
    (total, parts) pair whose parts name the terms for error messages.
    The error of each entry is |analytic - numeric| / max(|analytic|, |numeric|, floor);
    the report passes iff the largest error is <= tol.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Mapping):
        names: List[str] = list(params.keys())
        tensors = list(params.values())
    else:
        tensors = list(params)
        names = [f"param{i}" for i in range(len(tensors))]

    total, parts = _split_loss(loss())
    _ensure_finite(total, parts)
    analytic = torch.autograd.grad(total, tensors, allow_unused=True)

    errors: Dict[str, float] = {}
    with torch.no_grad():
        for name, tensor, grad in zip(names, tensors, analytic):
            grad = torch.zeros_like(tensor) if grad is None else grad
            flat = tensor.detach().view(-1)
            numeric = torch.zeros_like(flat)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                plus, _ = _split_loss(loss())
                flat[k] = orig - step
                minus, _ = _split_loss(loss())
                flat[k] = orig
                numeric[k] = (float(plus) - float(minus)) / (2.0 * step)
            a = grad.reshape(-1)
            scale = torch.maximum(torch.maximum(a.abs(), numeric.abs()), torch.full_like(a, floor))
            errors[name] = float(((a - numeric).abs() / scale).max()) if a.numel() else 0.0
    report = GradCheckReport(errors=errors, tol=tol, step=step)
    logger.debug(f"grad_check max error {report.max_error:.3e} (tol {tol:.1e})")
    return report
