# =========================
# Prunable Toy Denoiser
# =========================
# This file defines the toy encoder-mid-decoder denoiser with skip connections,
# its prunable-unit layout (PrunableSpec), the soft/hard mask container (MaskSet),
# and the differentiable MAC accounting used by the resource objective.
#
# Topology of the default spec (feature width 64, one hidden layer of 32 per block):
#   in_proj -> E1 -> E2 -> MID -> D2(skip E2) -> D1(skip E1) -> out_proj
# Width units: the hidden layers of E1, E2, D2, D1.  Depth units: gates of the same four.
# MID and the two projections are never pruned.

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeMismatchError
from .numerics import DTYPE, RngStream

logger = logging.getLogger(__name__)

ROLES = ("encoder", "mid", "decoder")

# =========================
# Prunable Layout
# =========================


@dataclass(frozen=True)
class BlockSpec:
    """One block: a hidden layer of `hidden` units between two affine maps."""
    name: str
    role: str
    hidden: int
    width_prunable: bool = True
    depth_prunable: bool = True
    skip_source: Optional[str] = None


@dataclass(frozen=True)
class PrunableSpec:
    """
    Layout of the prunable network.
    D = sum of prunable widths + number of gated blocks; the architecture-code
    vector is laid out as [v_1 .. v_L, u_1 .. u_M] in block order.
    """
    data_dim: int
    feature_dim: int
    embed_dim: int
    t_embed_dim: int
    blocks: Tuple[BlockSpec, ...]
    project_io: bool = True

    @property
    def cond_dim(self) -> int:
        return self.embed_dim + self.t_embed_dim

    @property
    def width_layers(self) -> List[str]:
        return [b.name for b in self.blocks if b.width_prunable]

    @property
    def depth_blocks(self) -> List[str]:
        return [b.name for b in self.blocks if b.depth_prunable]

    @property
    def widths(self) -> List[int]:
        return [b.hidden for b in self.blocks if b.width_prunable]

    @property
    def L(self) -> int:
        return len(self.width_layers)

    @property
    def M(self) -> int:
        return len(self.depth_blocks)

    @property
    def D(self) -> int:
        return sum(self.widths) + self.M

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def block_in_dim(self, block: BlockSpec) -> int:
        skip = self.feature_dim if block.role == "decoder" else 0
        return self.feature_dim + skip + self.cond_dim

    def macs_per_unit(self) -> Dict[str, int]:
        """MACs contributed by one retained hidden unit of each block."""
        return {b.name: self.block_in_dim(b) + self.feature_dim for b in self.blocks}

    def validate(self) -> None:
        """
        Check the block graph: known roles, unique names, and one-to-one encoder/decoder
        skip pairing. Raises ConfigurationError listing every broken pair.
        """
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate block names: {names}")
        if not self.project_io and self.data_dim != self.feature_dim:
            raise ConfigurationError("data_dim must equal feature_dim when projections are disabled")
        problems = []
        encoders = [b.name for b in self.blocks if b.role == "encoder"]
        used: Dict[str, str] = {}
        for i, b in enumerate(self.blocks):
            if b.role not in ROLES:
                problems.append(f"{b.name}: unknown role '{b.role}'")
            if b.hidden < 1:
                problems.append(f"{b.name}: hidden must be positive")
            if b.role == "decoder":
                src = b.skip_source
                if src is None:
                    problems.append(f"{b.name} -> (missing skip source)")
                elif src not in encoders or names.index(src) >= i:
                    problems.append(f"{b.name} -> {src} (not a preceding encoder block)")
                elif src in used:
                    problems.append(f"{b.name} -> {src} (already paired with {used[src]})")
                else:
                    used[src] = b.name
            elif b.skip_source is not None:
                problems.append(f"{b.name}: only decoder blocks take a skip source")
        unpaired = [e for e in encoders if e not in used]
        if unpaired:
            problems.append(f"encoder blocks without a decoder partner: {unpaired}")
        if problems:
            raise ConfigurationError("broken skip pairs: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PrunableSpec":
        blocks = tuple(BlockSpec(**b) for b in data["blocks"])
        fields = {k: v for k, v in data.items() if k != "blocks"}
        return cls(blocks=blocks, **fields)


def default_spec(data_dim: int = 64, embed_dim: int = 32, feature_dim: int = 64,
                 hidden: int = 32, t_embed_dim: int = 16) -> PrunableSpec:
    """The default toy topology: E1, E2 -> MID -> D2, D1 with skips E2->D2, E1->D1."""
    blocks = (
        BlockSpec("E1", "encoder", hidden),
        BlockSpec("E2", "encoder", hidden),
        BlockSpec("MID", "mid", hidden, width_prunable=False, depth_prunable=False),
        BlockSpec("D2", "decoder", hidden, skip_source="E2"),
        BlockSpec("D1", "decoder", hidden, skip_source="E1"),
    )
    return PrunableSpec(data_dim=data_dim, feature_dim=feature_dim, embed_dim=embed_dim,
                        t_embed_dim=t_embed_dim, blocks=blocks)


# =========================
# Masks
# =========================


@dataclass
class MaskSet:
    """
    Width masks v (one tensor per width-prunable layer) and depth gates u (one entry per gated block).
    Unbatched masks have shapes (width_l,) and (M,); batched masks carry a leading batch axis.
    """
    v: List[torch.Tensor]
    u: torch.Tensor

    @classmethod
    def from_vector(cls, vec: torch.Tensor, spec: PrunableSpec) -> "MaskSet":
        if vec.shape[-1] != spec.D:
            raise ShapeMismatchError(f"architecture vector has {vec.shape[-1]} entries, spec needs D={spec.D}")
        parts = list(torch.split(vec, spec.widths + [spec.M], dim=-1))
        return cls(v=parts[:-1], u=parts[-1])

    @classmethod
    def full(cls, spec: PrunableSpec) -> "MaskSet":
        return cls(v=[torch.ones(w, dtype=DTYPE) for w in spec.widths], u=torch.ones(spec.M, dtype=DTYPE))

    def to_vector(self) -> torch.Tensor:
        return torch.cat(list(self.v) + [self.u], dim=-1)

    @property
    def batched(self) -> bool:
        return self.u.dim() == 2

    def detach(self) -> "MaskSet":
        return MaskSet(v=[x.detach() for x in self.v], u=self.u.detach())

    def select(self, index: torch.Tensor) -> "MaskSet":
        """Rows of a batched mask set."""
        return MaskSet(v=[x[index] for x in self.v], u=self.u[index])

    def is_binary(self) -> bool:
        vec = self.to_vector()
        return bool(((vec == 0) | (vec == 1)).all())


def check_masks(spec: PrunableSpec, masks: MaskSet) -> None:
    """Raise ShapeMismatchError naming the first layer whose mask does not fit the spec."""
    if len(masks.v) != spec.L:
        raise ShapeMismatchError(f"expected {spec.L} width masks, got {len(masks.v)}")
    for name, width, v in zip(spec.width_layers, spec.widths, masks.v):
        if v.shape[-1] != width:
            raise ShapeMismatchError(f"width mask of layer {name} has {v.shape[-1]} entries, expected {width}")
    if masks.u.shape[-1] != spec.M:
        raise ShapeMismatchError(f"depth gates have {masks.u.shape[-1]} entries, expected {spec.M}")


def binarize(code: torch.Tensor, spec: PrunableSpec, threshold: float = 0.5) -> MaskSet:
    """
    Hard masks from architecture-code logits: entry = 1 iff sigmoid(logit) >= threshold.
    Ties at the threshold are kept.
    """
    with torch.no_grad():
        probs = torch.sigmoid(code.to(DTYPE))
        hard = (probs >= threshold).to(DTYPE)
    return MaskSet.from_vector(hard, spec)


# =========================
# Network
# =========================


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps t (shape (B,)) into R^dim."""
    if dim == 0:
        return torch.zeros(t.shape[0], 0, dtype=DTYPE)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE).unsqueeze(-1) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class DenoiserBlock(nn.Module):
    """Affine -> SiLU -> width mask -> affine. Output width is fixed regardless of masks."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc_in = nn.Linear(d_in, hidden, dtype=DTYPE)
        self.fc_out = nn.Linear(hidden, d_out, dtype=DTYPE)

    def forward(self, x: torch.Tensor, v: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = F.silu(self.fc_in(x))
        if v is not None:
            h = h * v
        return self.fc_out(h)


class ToyDenoiser(nn.Module):
    """
    Conditional noise predictor eps(x_t, z, t; theta).
    The prompt embedding z and the timestep embedding are concatenated to every
    block input and are never masked.
    """

    def __init__(self, spec: PrunableSpec):
        super().__init__()
        self.spec = spec
        if spec.project_io:
            self.in_proj = nn.Linear(spec.data_dim, spec.feature_dim, dtype=DTYPE)
            self.out_proj = nn.Linear(spec.feature_dim, spec.data_dim, dtype=DTYPE)
        self.blocks = nn.ModuleDict({
            b.name: DenoiserBlock(spec.block_in_dim(b), b.hidden, spec.feature_dim) for b in spec.blocks
        })
        self._width_index = {name: i for i, name in enumerate(spec.width_layers)}
        self._depth_index = {name: j for j, name in enumerate(spec.depth_blocks)}

    def forward(self, xt: torch.Tensor, z: torch.Tensor, t: torch.Tensor,
                masks: Optional[MaskSet] = None) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        spec = self.spec
        cond = torch.cat([z, timestep_embedding(t, spec.t_embed_dim)], dim=-1)
        feats = self.in_proj(xt) if spec.project_io else xt
        skips: Dict[str, torch.Tensor] = {}
        block_outputs: List[torch.Tensor] = []
        for b in spec.blocks:
            inputs = [feats]
            if b.role == "decoder":
                inputs.append(skips[b.skip_source])
            inputs.append(cond)
            v = None
            if masks is not None and b.width_prunable:
                v = masks.v[self._width_index[b.name]]
            out = self.blocks[b.name](torch.cat(inputs, dim=-1), v)
            if masks is not None and b.depth_prunable:
                u = masks.u[..., self._depth_index[b.name]]
                if u.dim() == 1:
                    u = u.unsqueeze(-1)
                out = u * out + (1 - u) * feats
            feats = out
            if b.role == "encoder":
                skips[b.name] = feats
            block_outputs.append(feats)
        eps_hat = self.out_proj(feats) if spec.project_io else feats
        return eps_hat, block_outputs


def build_toy_unet(spec: PrunableSpec, rng: RngStream) -> ToyDenoiser:
    """
    Build and initialize a ToyDenoiser. Weights and biases are drawn
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the given stream, so equal streams give equal parameters.
    """
    spec.validate()
    model = ToyDenoiser(spec)
    gen = rng.generator()
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_((torch.rand(module.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                module.bias.copy_((torch.rand(module.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
    logger.debug(f"Built toy denoiser with D={spec.D} prunable units")
    return model


def forward_masked(model: nn.Module, masks: Optional[MaskSet], xt: torch.Tensor, z: torch.Tensor,
                   t: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Masked forward pass returning the noise prediction and every block output."""
    spec = getattr(model, "spec", None)
    if masks is not None and spec is not None:
        check_masks(spec, masks)
    return model(xt, z, t, masks)


# =========================
# MAC Accounting
# =========================


def block_macs(spec: PrunableSpec, masks: MaskSet) -> Dict[str, torch.Tensor]:
    """
    Differentiable MACs per block.
    A block with retained width k = sum(v) costs u * (d_in * k + k * d_out); ungated blocks use u = 1
    and unmasked layers use their full width. Block inputs keep their full extent under any
    mask, so no upstream retained fraction enters d_in.
    """
    check_masks(spec, masks)
    width_index = {name: i for i, name in enumerate(spec.width_layers)}
    depth_index = {name: j for j, name in enumerate(spec.depth_blocks)}
    out: Dict[str, torch.Tensor] = {}
    for b in spec.blocks:
        d_in, d_out = spec.block_in_dim(b), spec.feature_dim
        if b.width_prunable:
            kept = masks.v[width_index[b.name]].sum(-1)
        else:
            kept = torch.full(masks.u.shape[:-1], float(b.hidden), dtype=DTYPE)
        cost = d_in * kept + kept * d_out
        if b.depth_prunable:
            cost = masks.u[..., depth_index[b.name]] * cost
        out[b.name] = cost
    return out


def fixed_macs(spec: PrunableSpec) -> int:
    """MACs of the never-pruned input/output projections."""
    return 2 * spec.data_dim * spec.feature_dim if spec.project_io else 0


def estimate_macs(spec: PrunableSpec, masks: MaskSet) -> torch.Tensor:
    """Total differentiable MAC estimate T-hat; batched masks give one value per row."""
    total = sum(block_macs(spec, masks).values())
    return total + fixed_macs(spec)


def total_macs(spec: PrunableSpec) -> float:
    """T_full, the exact MAC count of the unmasked network."""
    return float(estimate_macs(spec, full_masks(spec)))


def full_masks(spec: PrunableSpec) -> MaskSet:
    """All-ones masks: the unpruned network."""
    return MaskSet.full(spec)
