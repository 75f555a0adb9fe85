# =========================
# Synthetic Corpus
# =========================
# Clustered prompt embeddings paired with cluster-specific data patterns.
# Cluster c has difficulty c / (K - 1); its pattern is a sum of harmonics up to
# round(difficulty * max_frequency), so cluster 0 is a constant vector and the
# last cluster is the most oscillatory.
#
# On-disk layout of a corpus directory:
#   prompts.jsonl  one PromptRecord per line
#   data.bin       "APTPCORP" | u32 version | u64 count | u64 dim | count*dim little-endian float64
#   index.json     counts, dims, config and cluster means

import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from .errors import ConfigurationError, CorpusFormatError
from .numerics import DTYPE, RngStream, normalize_rows, sample_normal
from .schemas import CorpusConfig, PromptRecord
from .utils import atomic_write_bytes, atomic_write_text, write_json

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"APTPCORP"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")

PROMPTS_FILE = "prompts.jsonl"
DATA_FILE = "data.bin"
INDEX_FILE = "index.json"


@dataclass
class Corpus:
    """Prompt records with their embeddings and paired data rows (same order)."""
    records: List[PromptRecord]
    embeddings: torch.Tensor
    data: torch.Tensor
    cluster_means: Optional[torch.Tensor] = None
    config: Optional[CorpusConfig] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> List[Optional[int]]:
        return [r.cluster_label for r in self.records]

    @property
    def prompt_ids(self) -> List[int]:
        return [r.prompt_id for r in self.records]

    def cluster_difficulty(self) -> Dict[int, float]:
        return {r.cluster_label: r.difficulty for r in self.records if r.cluster_label is not None}


# =========================
# Generation
# =========================


def cluster_pattern(difficulty: float, cfg: CorpusConfig, rng: RngStream) -> torch.Tensor:
    """
    Unit-RMS signal of length data_dim: a DC term plus harmonics 1..round(difficulty * max_frequency)
    with random amplitudes and phases. Difficulty 0 gives a constant vector.
    """
    n_harmonics = int(round(difficulty * cfg.max_frequency))
    x = torch.arange(cfg.data_dim, dtype=DTYPE)
    pattern = torch.ones(cfg.data_dim, dtype=DTYPE)
    if n_harmonics > 0:
        gen = rng.generator()
        amps = 0.5 + torch.rand(n_harmonics, generator=gen, dtype=DTYPE)
        phases = 2 * math.pi * torch.rand(n_harmonics, generator=gen, dtype=DTYPE)
        for k in range(1, n_harmonics + 1):
            pattern = pattern + amps[k - 1] * torch.cos(2 * math.pi * k * x / cfg.data_dim + phases[k - 1])
    return pattern / torch.sqrt(torch.mean(pattern ** 2))


def gen_corpus(cfg: CorpusConfig) -> Corpus:
    """
    Generate the synthetic corpus deterministically from cfg.seed.

    Cluster means are uniform on the unit sphere of R^{d_z}. A prompt embedding is
    normalize(mean + sigma_c * g / sqrt(d_z)), g standard normal, so sigma_c is the expected
    relative size of the perturbation. Paired data: x0 = pattern_c + data_noise * gaussian.
    Every record draws from its own stream keyed by prompt_id.
    """
    K, per = cfg.n_clusters, cfg.prompts_per_cluster
    if K * per < K:
        raise ConfigurationError(f"{K} clusters need at least {K} prompts, budget is {K * per}")
    root = RngStream(cfg.seed)
    means = normalize_rows(sample_normal((K, cfg.embed_dim), root.child("cluster-means")), "cluster means")
    difficulties = [c / (K - 1) for c in range(K)]
    patterns = [cluster_pattern(difficulties[c], cfg, root.child("pattern", c)) for c in range(K)]

    records, embeddings, data = [], [], []
    noise_scale = cfg.sigma_c / math.sqrt(cfg.embed_dim)
    for c in range(K):
        for j in range(per):
            prompt_id = c * per + j
            item = root.child("prompt", prompt_id)
            z = means[c] + noise_scale * sample_normal((cfg.embed_dim,), item)
            z = z / torch.linalg.vector_norm(z)
            x0 = patterns[c] + cfg.data_noise * sample_normal((cfg.data_dim,), item)
            records.append(PromptRecord(prompt_id=prompt_id, cluster_label=c,
                                        embedding=z.tolist(), difficulty=difficulties[c]))
            embeddings.append(z)
            data.append(x0)
    logger.info(f"Generated corpus: {K} clusters x {per} prompts, d_z={cfg.embed_dim}, data_dim={cfg.data_dim}")
    return Corpus(records=records, embeddings=torch.stack(embeddings), data=torch.stack(data),
                  cluster_means=means, config=cfg)


def split_indices(records: Sequence[PromptRecord], held_out_fraction: float) -> Tuple[List[int], List[int]]:
    """
    Positions of the training and held-out prompts.
    The held-out split is the last `held_out_fraction` of each cluster's prompts (by prompt_id);
    a cluster with at least two prompts keeps at least one held out when the fraction is positive.
    """
    by_cluster: Dict[Optional[int], List[int]] = defaultdict(list)
    for pos, rec in enumerate(records):
        by_cluster[rec.cluster_label].append(pos)
    train, held = [], []
    for label in sorted(by_cluster, key=lambda k: (k is None, k if k is not None else 0)):
        positions = sorted(by_cluster[label], key=lambda p: records[p].prompt_id)
        n_held = int(math.floor(held_out_fraction * len(positions)))
        if held_out_fraction > 0 and n_held == 0 and len(positions) > 1:
            n_held = 1
        cut = len(positions) - n_held
        train.extend(positions[:cut])
        held.extend(positions[cut:])
    return sorted(train), sorted(held)


# =========================
# Persistence
# =========================


def save_corpus(corpus: Corpus, directory: Path) -> None:
    """Write prompts.jsonl, data.bin and index.json atomically."""
    directory = Path(directory)
    lines = "".join(rec.model_dump_json() + "\n" for rec in corpus.records)
    atomic_write_text(directory / PROMPTS_FILE, lines)

    array = corpus.data.detach().cpu().numpy().astype("<f8")
    count, dim = array.shape
    header = _HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, count, dim)
    atomic_write_bytes(directory / DATA_FILE, header + array.tobytes(order="C"))

    index = {
        "version": CORPUS_VERSION,
        "count": count,
        "data_dim": dim,
        "embed_dim": int(corpus.embeddings.shape[1]),
        "files": {"prompts": PROMPTS_FILE, "data": DATA_FILE},
        "config": corpus.config.model_dump(mode="json") if corpus.config is not None else None,
        "cluster_means": corpus.cluster_means.tolist() if corpus.cluster_means is not None else None,
    }
    write_json(directory / INDEX_FILE, index)
    logger.info(f"Saved corpus of {count} prompts to {directory}")


def _read_records(path: Path) -> List[PromptRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    records.append(PromptRecord.model_validate_json(line))
    except OSError as e:
        raise CorpusFormatError(f"Cannot read {path}: {e}") from e
    except ValidationError as e:
        raise CorpusFormatError(f"{path}:{lineno}: invalid prompt record: {e}") from e
    return records


def _read_data(path: Path) -> np.ndarray:
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise CorpusFormatError(f"Cannot read {path}: {e}") from e
    if len(payload) < _HEADER.size:
        raise CorpusFormatError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(payload, 0)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + count * dim * 8
    if len(payload) != expected:
        raise CorpusFormatError(f"{path}: expected {expected} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).reshape(count, dim).astype(np.float64)


def load_corpus(directory: Path) -> Corpus:
    """Read a corpus directory written by save_corpus; raises CorpusFormatError on any inconsistency."""
    directory = Path(directory)
    try:
        index = json.loads((directory / INDEX_FILE).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CorpusFormatError(f"Cannot read corpus index in {directory}: {e}") from e
    records = _read_records(directory / PROMPTS_FILE)
    data = _read_data(directory / DATA_FILE)
    if data.shape[0] != len(records) or index.get("count") != len(records):
        raise CorpusFormatError(f"record count {len(records)} does not match data rows {data.shape[0]}")
    if any(r.embedding is None for r in records):
        raise CorpusFormatError("corpus records must carry embeddings")
    embeddings = torch.tensor([r.embedding for r in records], dtype=DTYPE)
    means = index.get("cluster_means")
    cfg = index.get("config")
    return Corpus(
        records=records,
        embeddings=embeddings,
        data=torch.from_numpy(data),
        cluster_means=torch.tensor(means, dtype=DTYPE) if means is not None else None,
        config=CorpusConfig.model_validate(cfg) if cfg is not None else None,
    )


def load_prompt_file(path: Path) -> List[PromptRecord]:
    """Read a JSON-lines prompt file (one PromptRecord per line)."""
    return _read_records(Path(path))
