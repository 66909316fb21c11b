"""
Round log data structures for FLLSim.

This module defines the per-round record emitted by the pretraining loop and
the containers used to summarize one or more runs (per-phase resource
fractions, loss curves, layer-wise vs end-to-end comparison).
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

METRICS_COLUMNS = [
    "round",
    "phase",
    "kept_layers",
    "loss_mean",
    "bytes_down",
    "bytes_up",
    "flops_fwd",
    "flops_bwd",
    "peak_mem_words",
    "comm_frac",
    "compute_frac",
    "mem_frac",
]

FRACTION_COLUMNS = ["mem_frac", "compute_frac", "comm_frac"]


@dataclass(frozen=True)
class RoundLog:
    """
    One row of the metrics stream.

    Attributes
    ----------
    round, phase : int
    kept_layers : tuple of int
        Layers shipped to clients this round.
    loss_mean : float
        Mean local loss over valid clients (NaN for a skipped round).
    bytes_down, bytes_up, flops_fwd, flops_bwd, peak_mem_words : int
        Per-client resources.
    comm_frac, compute_frac, mem_frac : float
        Resources relative to the end-to-end baseline.
    """

    round: int
    phase: int
    kept_layers: tuple
    loss_mean: float
    bytes_down: int
    bytes_up: int
    flops_fwd: int
    flops_bwd: int
    peak_mem_words: int
    comm_frac: float
    compute_frac: float
    mem_frac: float

    def to_row(self) -> Dict[str, object]:
        row = {name: getattr(self, name) for name in METRICS_COLUMNS}
        row["kept_layers"] = ";".join(str(layer) for layer in self.kept_layers)
        return row


class RunLog:
    """Ordered round logs of one pretraining run."""

    def __init__(self, rows: Iterable[RoundLog] = ()):
        self._rows: List[RoundLog] = list(rows)

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    @property
    def rows(self) -> List[RoundLog]:
        return self._rows

    def append(self, row: RoundLog) -> None:
        self._rows.append(row)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self._rows], columns=METRICS_COLUMNS)


# Summaries over metrics DataFrames

def phase_summary(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per-phase min / mean / max of the three resource fractions."""
    grouped = metrics.groupby("phase")[FRACTION_COLUMNS].agg(["min", "mean", "max"])
    grouped.columns = [f"{col}_{stat}" for col, stat in grouped.columns]
    return grouped.reset_index()


def run_summary(metrics: pd.DataFrame, label: str) -> Dict[str, object]:
    """One comparison-table row for a run."""
    return {
        "run": label,
        "rounds": int(len(metrics)),
        "final_loss": float(metrics["loss_mean"].dropna().iloc[-1]) if metrics["loss_mean"].notna().any() else np.nan,
        "total_bytes": int((metrics["bytes_down"] + metrics["bytes_up"]).sum()),
        "total_flops": int((metrics["flops_fwd"] + metrics["flops_bwd"]).sum()),
        "max_peak_mem_words": int(metrics["peak_mem_words"].max()),
        "mem_frac_min": float(metrics["mem_frac"].min()),
        "mem_frac_max": float(metrics["mem_frac"].max()),
        "compute_frac_min": float(metrics["compute_frac"].min()),
        "compute_frac_max": float(metrics["compute_frac"].max()),
        "comm_frac_min": float(metrics["comm_frac"].min()),
        "comm_frac_max": float(metrics["comm_frac"].max()),
    }


def comparison_table(runs: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """Side-by-side run summaries, one row per metrics file."""
    return pd.DataFrame([run_summary(df, label) for label, df in runs.items()])


def probe_comparison(evals: pd.DataFrame) -> Optional[pd.DataFrame]:
    """
    Accuracy per (layer, eval mode) for each training mode found in the
    evaluation results; None when there is nothing to compare.
    """
    if evals is None or evals.empty:
        return None
    table = evals.pivot_table(
        index=["layer", "eval_mode"],
        columns="train_mode",
        values="accuracy",
        aggfunc="mean",
    )
    return table.reset_index()
