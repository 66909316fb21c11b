"""
Writers for FLLSim outputs: checkpoints, metrics streams, evaluation
results, report tables, partitions and CIFAR-100 binaries.
"""

import json
import re
import struct
from dataclasses import asdict
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, Literal, Optional

import numpy as np
import pandas as pd

from fllsim.core.datasets import Dataset, Partition
from fllsim.core.results import METRICS_COLUMNS, RoundLog
from fllsim.io.readers import CIFAR_IMAGE_SHAPE
from fllsim.io.schema import CHECKPOINT_MAGIC, Checkpoint
from fllsim.utils import setup_logger

logger = setup_logger(__name__)

PathLike = str | Path


def _sanitize_name(name: str) -> str:

    name = name.strip().lower()
    name = re.sub(r"\s+", "_", name)
    name = re.sub(r"[^a-zA-Z0-9_\-]", "", name)

    return name


def _timestamp():
    return datetime.now()


# Checkpoint

def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """
    Serialize a checkpoint.

    Layout: magic, uint32 LE version, uint32 LE header length, compact JSON
    header with sorted keys, then every tensor as raw little-endian float32
    in header order.
    """
    ids = list(checkpoint.tensors)
    header = {
        "cursor": {"phase": checkpoint.cursor_phase, "round": checkpoint.cursor_round},
        "encoder": asdict(checkpoint.encoder),
        "experiment": checkpoint.experiment,
        "tensors": [{"id": tid, "shape": list(checkpoint.tensors[tid].shape)} for tid in ids],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", checkpoint.version, len(header_bytes)),
        header_bytes,
    ]
    chunks += [np.ascontiguousarray(checkpoint.tensors[tid], dtype="<f4").tobytes() for tid in ids]
    return b"".join(chunks)


def write_checkpoint(path: PathLike, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Checkpoint written to: {path}")
    return path


# Metrics

def append_metrics(path: PathLike, rows: Iterable[RoundLog]) -> None:
    """Append round logs; the header is written when the file is new."""
    path = Path(path)
    df = pd.DataFrame([r.to_row() for r in rows], columns=METRICS_COLUMNS)
    if df.empty and path.exists():
        return
    new_file = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, mode="w" if new_file else "a", header=new_file, index=False)


def truncate_metrics(path: PathLike, cursor_round: int) -> int:
    """Drop rows with round >= cursor_round; returns the number of rows dropped."""
    path = Path(path)
    if not path.exists():
        return 0
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    keep = df[df["round"].astype(int) < cursor_round]
    keep.to_csv(path, index=False)
    dropped = len(df) - len(keep)
    if dropped:
        logger.info(f"Discarded {dropped} metrics rows at or after round {cursor_round}")
    return dropped


def append_eval_result(path: PathLike, row: Dict[str, object]) -> None:
    path = Path(path)
    new_file = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row]).to_csv(path, mode="w" if new_file else "a", header=new_file, index=False)


# Report tables

def write_report(
    output_path: PathLike,
    tables: Dict[str, pd.DataFrame],
    ext: Literal["csv", "xlsx"] = "csv",
    analysis_name: Optional[str] = None,
) -> Dict[str, Path]:
    """
    Write summary tables, one CSV per table or a single workbook with one
    sheet per table.
    """
    output_path = Path(output_path)
    output_path.mkdir(parents=True, exist_ok=True)

    ts = _timestamp().strftime("%Y%m%d_%H%M%S")
    tag = f"_{_sanitize_name(analysis_name)}" if analysis_name else ""

    written: Dict[str, Path] = {}
    if ext == "csv":
        for name, df in tables.items():
            file = output_path / f"fllsim_{name}{tag}_{ts}.csv"
            df.to_csv(file, index=False)
            written[name] = file

    elif ext == "xlsx":
        file = output_path / f"fllsim_report{tag}_{ts}.xlsx"
        with pd.ExcelWriter(file, engine="xlsxwriter") as writer:
            for name, df in tables.items():
                df.to_excel(writer, index=False, sheet_name=name[:31])
        written = {name: file for name in tables}

    else:
        raise ValueError(f"Unknown report extension '{ext}' (expected csv or xlsx)")

    return written


# Partition and CIFAR-100

def write_partition(path: PathLike, partition: Partition) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partition.to_dataframe().to_csv(path, index=False)
    return path


def write_cifar100_binary(path: PathLike, dataset: Dataset, coarse_labels: Optional[np.ndarray] = None) -> Path:
    """
    Emit the CIFAR-100 binary record layout. Pixels are rounded from [0, 1]
    to bytes; coarse labels default to zero.
    """
    if dataset.image_shape != CIFAR_IMAGE_SHAPE:
        raise ValueError(f"CIFAR-100 records hold {CIFAR_IMAGE_SHAPE} images, got {dataset.image_shape}")
    n = dataset.size
    coarse = np.zeros(n, dtype=np.uint8) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)

    records = np.empty((n, 3074), dtype=np.uint8)
    records[:, 0] = coarse
    records[:, 1] = dataset.labels.astype(np.uint8)
    records[:, 2:] = np.rint(np.clip(dataset.images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(n, -1)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(records.tobytes())
    return path
