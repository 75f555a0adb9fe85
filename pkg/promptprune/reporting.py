# =========================
# Reporting: Figures and Console Tables
# =========================
# Loss curves per term, expert utilization, per-block retained-MAC heat map,
# and rich tables for the eval/report commands.

import logging
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")  # headless
import matplotlib.pyplot as plt
import pandas as pd
from rich.table import Table

from .schemas import EvalReport

logger = logging.getLogger(__name__)

LOSS_TERMS = ["ddpm", "distill", "resource", "contrastive", "avg_mac_fraction"]


def load_training_log(log_path: Path) -> pd.DataFrame:
    """Read the JSON-lines training log into a frame (one row per logged iteration)."""
    frame = pd.read_json(log_path, lines=True)
    if frame.empty:
        return frame
    phase_order = {"pretrain": 0, "warmup": 1, "joint": 2}
    frame["phase_rank"] = frame["phase"].map(phase_order).fillna(len(phase_order))
    frame = frame.sort_values(["phase_rank", "iter"], kind="stable").reset_index(drop=True)
    frame["step"] = range(len(frame))
    return frame


def plot_loss_curves(log_path: Path, out: Path, window: int = 10) -> List[Path]:
    """
    One figure per loss term over the pruning phases (pretraining excluded),
    raw values plus a rolling mean. Returns the written paths.
    """
    frame = load_training_log(log_path)
    frame = frame[frame["phase"] != "pretrain"] if not frame.empty else frame
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for term in LOSS_TERMS:
        if frame.empty or term not in frame:
            continue
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for phase, group in frame.groupby("phase", sort=False):
            ax.plot(group["step"], group[term], alpha=0.3, linewidth=0.8)
            ax.plot(group["step"], group[term].rolling(window, min_periods=1).mean(), label=phase)
        ax.set_xlabel("iteration")
        ax.set_ylabel(term)
        ax.set_title(f"{term} during pruning")
        ax.legend()
        fig.tight_layout()
        path = out / f"loss_{term}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    logger.info(f"Wrote {len(written)} loss-curve figures to {out}")
    return written


def plot_utilization(report: EvalReport, out: Path) -> Path:
    """Pie chart of held-out usage share per expert."""
    shares = [e.usage_share for e in report.experts]
    labels = [f"expert {e.index} ({e.mac_fraction:.2f} MACs)" for e in report.experts]
    fig, ax = plt.subplots(figsize=(5, 5))
    nonzero = [(s, l) for s, l in zip(shares, labels) if s > 0]
    ax.pie([s for s, _ in nonzero], labels=[l for _, l in nonzero], autopct="%1.1f%%", startangle=90)
    ax.set_title("Held-out prompts per expert")
    path = Path(out) / "utilization.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_block_ratios(table: pd.DataFrame, out: Path) -> Path:
    """Heat map of retained-MAC ratio per (expert, block)."""
    values = table.set_index("expert")
    fig, ax = plt.subplots(figsize=(1.2 * values.shape[1] + 2, 0.6 * values.shape[0] + 1.5))
    image = ax.imshow(values.to_numpy(), vmin=0.0, vmax=1.0, cmap="YlOrBr", aspect="auto")
    ax.set_xticks(range(values.shape[1]), labels=list(values.columns))
    ax.set_yticks(range(values.shape[0]), labels=[f"expert {i}" for i in values.index])
    for (r, c), v in pd.DataFrame(values.to_numpy()).stack().items():
        ax.text(c, r, f"{v:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(image, ax=ax, label="retained MAC ratio")
    ax.set_title("Block-level retained MACs")
    fig.tight_layout()
    path = Path(out) / "block_ratios.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _fmt(value, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def report_table(report: EvalReport) -> Table:
    """Per-expert summary for the console."""
    table = Table(title=f"{report.variant}: {report.n_experts} experts")
    for column in ("expert", "MAC fraction", "usage", "share", "loss before", "loss after", "MMD"):
        table.add_column(column, justify="right")
    for e in report.experts:
        table.add_row(str(e.index), _fmt(e.mac_fraction), str(e.usage_count), _fmt(e.usage_share),
                      _fmt(e.held_out_loss_before), _fmt(e.held_out_loss), _fmt(e.mmd))
    table.caption = (f"entropy {_fmt(report.assignment_entropy)} | agreement {_fmt(report.mean_modal_agreement)} | "
                     f"weighted MACs {_fmt(report.usage_weighted_mac_fraction)} | "
                     f"difficulty-budget rho {_fmt(report.difficulty_budget_spearman, 3)}")
    return table


def frame_table(frame: pd.DataFrame, title: str) -> Table:
    """Render any small frame (specialization, extreme prompts) as a rich table."""
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), justify="right")
    for row in frame.itertuples(index=False):
        table.add_row(*[_fmt(v) if isinstance(v, float) else str(v) for v in row])
    return table
