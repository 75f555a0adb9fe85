# =========================
# File Utilities
# =========================
# Atomic writers shared by the corpus, checkpoint, and report code.
# Every artifact is written to a temp file in the target directory and renamed
# into place, so readers never observe a partial file.

import json
import logging
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Any

import pandas as pd

logger = logging.getLogger(__name__)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write bytes to path via temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, data: Any) -> None:
    """Write JSON with sorted keys so equal data gives equal bytes."""
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, frame: pd.DataFrame) -> None:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.12g"))


def revision_string() -> str:
    """
    Return a git-style revision of the source tree, or "unversioned".
    Recorded in checkpoint provenance, so checkpoint bytes are reproducible for a
    fixed config, seed and source revision.
    """
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, check=True, timeout=5,
        )
        return result.stdout.strip() or "unversioned"
    except (OSError, subprocess.SubprocessError):
        return "unversioned"
