# =========================
# Checkpoint Container
# =========================
# Single-file binary checkpoints, little-endian:
#   "APTPCKPT" | u32 version | u64 header_len | header (sorted JSON) | u32 n_arrays
#   per array (sorted by name): u32 name_len | name | u32 ndim | u64 dim * ndim | u64 nbytes | float64 data
# The header carries the PrunableSpec, provenance (config hash, revision, RNG state,
# warnings) and small metadata. Loading parses the whole file before building anything.

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from .errors import CheckpointError
from .models import MaskSet, PrunableSpec
from .numerics import RngStream
from .schemas import RunConfig
from .training import Expert, ExpertSet, PruningResult
from .utils import atomic_write_bytes, revision_string

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"APTPCKPT"
CHECKPOINT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file."""
    spec: PrunableSpec
    arrays: Dict[str, np.ndarray]
    provenance: Dict[str, Any]
    meta: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


# =========================
# Encoding
# =========================


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"spec": ckpt.spec.to_dict(), "provenance": ckpt.provenance, "meta": ckpt.meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CHECKPOINT_MAGIC, _U32.pack(ckpt.version), _U64.pack(len(header)), header,
           _U32.pack(len(ckpt.arrays))]
    for name in sorted(ckpt.arrays):
        array = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        data = array.tobytes(order="C")
        out.append(_U32.pack(len(raw_name)))
        out.append(raw_name)
        out.append(_U32.pack(array.ndim))
        out.extend(_U64.pack(d) for d in array.shape)
        out.append(_U64.pack(len(data)))
        out.append(data)
    return b"".join(out)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def decode_checkpoint(payload: bytes) -> Checkpoint:
    """Parse checkpoint bytes; raises CheckpointError on bad magic, version or length."""
    reader = _Reader(payload)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(reader.take(reader.u64()).decode("utf-8"))
        spec = PrunableSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8", errors="strict")
        shape = tuple(reader.u64() for _ in range(reader.u32()))
        nbytes = reader.u64()
        if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"array {name}: {nbytes} bytes do not match shape {shape}")
        arrays[name] = np.frombuffer(reader.take(nbytes), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(payload):
        raise CheckpointError(f"{len(payload) - reader.pos} trailing bytes after the last array")
    return Checkpoint(spec=spec, arrays=arrays, provenance=header.get("provenance", {}),
                      meta=header.get("meta", {}), version=version)


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(ckpt))
    logger.info(f"Saved checkpoint {path} ({len(ckpt.arrays)} arrays)")


def load_checkpoint(path: Path, expected_hash: Optional[str] = None, force: bool = False) -> Checkpoint:
    """
    Read and validate a checkpoint.
    A config-hash mismatch is an error unless `force` is set, in which case a warning
    is recorded in the provenance.
    """
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    ckpt = decode_checkpoint(payload)
    stored = ckpt.provenance.get("config_hash")
    if expected_hash is not None and stored != expected_hash:
        message = f"checkpoint config hash {stored} differs from current {expected_hash}"
        if not force:
            raise CheckpointError(message)
        logger.warning(f"{message}; loading anyway (--force)")
        ckpt.provenance.setdefault("warnings", []).append(message)
    return ckpt


# =========================
# Conversions
# =========================


def _provenance(cfg: RunConfig, rng: Optional[RngStream]) -> Dict[str, Any]:
    return {
        "config_hash": cfg.config_hash(),
        "revision": revision_string(),
        "rng_state": rng.state() if rng is not None else None,
        "warnings": [],
    }


def _put_state(arrays: Dict[str, np.ndarray], prefix: str, state: Dict[str, torch.Tensor]) -> None:
    for key, value in state.items():
        arrays[f"{prefix}/{key}"] = value.detach().cpu().numpy()


def _get_state(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, torch.Tensor]:
    head = prefix + "/"
    state = {k[len(head):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(head)}
    if not state:
        raise CheckpointError(f"checkpoint has no arrays under '{prefix}'")
    return state


def _get(arrays: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in arrays:
        raise CheckpointError(f"checkpoint is missing array '{name}'")
    return arrays[name]


def pruning_checkpoint(result: PruningResult, cfg: RunConfig, rng: Optional[RngStream] = None) -> Checkpoint:
    arrays: Dict[str, np.ndarray] = {"codebook": result.codebook.detach().cpu().numpy()}
    _put_state(arrays, "model", result.model_state)
    _put_state(arrays, "teacher", result.teacher_state)
    _put_state(arrays, "predictor", result.predictor_state)
    for i, masks in enumerate(result.masks):
        arrays[f"expert/{i}/mask"] = masks.to_vector().detach().cpu().numpy()
    meta = {"kind": "prune", "variant": result.variant, "mac_fractions": list(result.mac_fractions)}
    return Checkpoint(spec=result.spec, arrays=arrays, provenance=_provenance(cfg, rng), meta=meta)


def pruning_result_from_checkpoint(ckpt: Checkpoint) -> PruningResult:
    if ckpt.meta.get("kind") != "prune":
        raise CheckpointError(f"expected a pruning checkpoint, found '{ckpt.meta.get('kind')}'")
    codebook = torch.from_numpy(_get(ckpt.arrays, "codebook").copy())
    masks = [MaskSet.from_vector(torch.from_numpy(_get(ckpt.arrays, f"expert/{i}/mask").copy()), ckpt.spec)
             for i in range(codebook.shape[0])]
    return PruningResult(
        spec=ckpt.spec, codebook=codebook, predictor_state=_get_state(ckpt.arrays, "predictor"),
        masks=masks, mac_fractions=list(ckpt.meta.get("mac_fractions", [])),
        model_state=_get_state(ckpt.arrays, "model"), teacher_state=_get_state(ckpt.arrays, "teacher"),
        variant=ckpt.meta.get("variant", "full"),
    )


def expert_checkpoint(experts: ExpertSet, cfg: RunConfig, rng: Optional[RngStream] = None) -> Checkpoint:
    arrays: Dict[str, np.ndarray] = {"codebook": experts.codebook.detach().cpu().numpy()}
    _put_state(arrays, "teacher", experts.teacher_state)
    _put_state(arrays, "predictor", experts.predictor_state)
    for e in experts.experts:
        arrays[f"expert/{e.index}/mask"] = e.masks.to_vector().detach().cpu().numpy()
        _put_state(arrays, f"expert/{e.index}/model", e.state)
    meta = {
        "kind": "finetune",
        "variant": experts.variant,
        "trained": [e.trained for e in experts.experts],
        "n_routed": [e.n_routed for e in experts.experts],
    }
    return Checkpoint(spec=experts.spec, arrays=arrays, provenance=_provenance(cfg, rng), meta=meta)


def experts_from_checkpoint(ckpt: Checkpoint) -> ExpertSet:
    if ckpt.meta.get("kind") != "finetune":
        raise CheckpointError(f"expected a fine-tuning checkpoint, found '{ckpt.meta.get('kind')}'")
    trained: List[bool] = ckpt.meta.get("trained", [])
    n_routed: List[int] = ckpt.meta.get("n_routed", [])
    experts = []
    for i in range(len(trained)):
        masks = MaskSet.from_vector(torch.from_numpy(_get(ckpt.arrays, f"expert/{i}/mask").copy()), ckpt.spec)
        experts.append(Expert(index=i, masks=masks, state=_get_state(ckpt.arrays, f"expert/{i}/model"),
                              trained=bool(trained[i]), n_routed=int(n_routed[i])))
    return ExpertSet(
        spec=ckpt.spec, experts=experts, codebook=torch.from_numpy(_get(ckpt.arrays, "codebook").copy()),
        predictor_state=_get_state(ckpt.arrays, "predictor"), teacher_state=_get_state(ckpt.arrays, "teacher"),
        variant=ckpt.meta.get("variant", "full"),
    )
