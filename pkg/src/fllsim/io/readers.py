"""
Readers for FLLSim inputs: experiment configs, CIFAR-100 binaries,
checkpoints and metrics files.
"""

import json
import re
import struct
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from fllsim.core.datasets import Dataset
from fllsim.core.errors import FormatError
from fllsim.core.results import METRICS_COLUMNS
from fllsim.io.schema import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    ENCODER_PROFILES,
    FED_PROFILES,
    AugmentConfig,
    Checkpoint,
    DatasetConfig,
    EncoderConfig,
    EvalConfig,
    ExperimentConfig,
    FedConfig,
)
from fllsim.io.validators import validate_experiment_config
from fllsim.utils import setup_logger

logger = setup_logger(__name__)

PathLike = str | Path

CIFAR_RECORD_BYTES = 3074
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_NUM_CLASSES = 100

SECTIONS = {
    "encoder": (EncoderConfig, ENCODER_PROFILES),
    "federation": (FedConfig, FED_PROFILES),
    "augment": (AugmentConfig, None),
    "dataset": (DatasetConfig, None),
    "evaluation": (EvalConfig, None),
}


def _fail(message: str, exc: type = ValueError):
    logger.error(message)
    raise exc(message)


def _check_file_exists(path: Path) -> None:
    if not path.is_file():
        _fail(f"File not found: {path}", FileNotFoundError)


# Experiment config

def _build_section(name: str, raw: Any, cls: type, profiles: Optional[dict]):
    if not isinstance(raw, dict):
        _fail(f"{name} must be an object (got {type(raw).__name__})")
    raw = dict(raw)

    base = cls()
    profile = raw.pop("profile", None)
    if profile is not None:
        if profiles is None:
            _fail(f"unknown key '{name}.profile'")
        if profile not in profiles:
            _fail(f"{name}.profile: unknown profile {profile!r} (available: {sorted(profiles)})")
        base = profiles[profile]

    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        _fail(f"unknown key '{name}.{unknown[0]}'")

    if cls is EvalConfig and "layers" in raw:
        raw["layers"] = tuple(raw["layers"])
    return replace(base, **raw)


def experiment_from_dict(doc: Dict[str, Any]) -> ExperimentConfig:
    """Build and validate an ExperimentConfig; unknown keys are errors."""
    if not isinstance(doc, dict):
        _fail("experiment config must be a JSON object")

    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        _fail(f"unknown key '{unknown[0]}'")

    values = dict(doc)
    for name, (cls, profiles) in SECTIONS.items():
        if name in values:
            values[name] = _build_section(name, values[name], cls, profiles)

    cfg = ExperimentConfig(**values)
    validate_experiment_config(cfg)
    return cfg


def experiment_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Plain JSON-ready echo of a config (tuples become lists)."""
    return json.loads(json.dumps(asdict(cfg)))


def read_config(path: PathLike) -> ExperimentConfig:
    path = Path(path)
    _check_file_exists(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        _fail(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}", FormatError)
    logger.info(f"Read experiment config: {path}")
    return experiment_from_dict(doc)


# CIFAR-100 binary

def load_cifar100_binary(path: PathLike) -> Dataset:
    """
    Parse a CIFAR-100 binary file.

    Each 3074-byte record holds a coarse label, a fine label and 3072 pixel
    bytes (1024 red, then green, then blue, row-major 32x32). Pixels are
    scaled to [0, 1]; coarse labels are discarded.
    """
    path = Path(path)
    _check_file_exists(path)
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)

    if len(raw) == 0:
        _fail(f"{path}: empty CIFAR-100 file", FormatError)
    remainder = len(raw) % CIFAR_RECORD_BYTES
    if remainder:
        offset = len(raw) - remainder
        _fail(
            f"{path}: truncated record at byte offset {offset} "
            f"({remainder} of {CIFAR_RECORD_BYTES} bytes)",
            FormatError,
        )

    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    fine = records[:, 1].astype(np.int64)
    bad = np.flatnonzero(fine >= CIFAR_NUM_CLASSES)
    if len(bad):
        offset = int(bad[0]) * CIFAR_RECORD_BYTES + 1
        _fail(f"{path}: fine label {fine[bad[0]]} >= {CIFAR_NUM_CLASSES} at byte offset {offset}", FormatError)

    images = records[:, 2:].reshape((-1,) + CIFAR_IMAGE_SHAPE).astype(np.float32) / 255.0
    logger.info(f"Loaded {len(records)} CIFAR-100 records from {path}")
    return Dataset(images=images, labels=fine, num_classes=CIFAR_NUM_CLASSES, name=path.stem)


def load_cifar100(directory: PathLike) -> Tuple[Dataset, Dataset]:
    """(train, test) from a directory holding train.bin and test.bin."""
    directory = Path(directory)
    return load_cifar100_binary(directory / "train.bin"), load_cifar100_binary(directory / "test.bin")


# Checkpoint

_PREFIX = struct.Struct("<II")


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    magic_len = len(CHECKPOINT_MAGIC)
    if len(data) < magic_len + _PREFIX.size or data[:magic_len] != CHECKPOINT_MAGIC:
        _fail(f"{source}: not a checkpoint file (bad magic)", FormatError)

    version, header_len = _PREFIX.unpack_from(data, magic_len)
    if version != CHECKPOINT_VERSION:
        _fail(f"{source}: unsupported checkpoint version {version}", FormatError)

    start = magic_len + _PREFIX.size
    if start + header_len > len(data):
        _fail(f"{source}: truncated header at byte offset {start}", FormatError)
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        _fail(f"{source}: unreadable header ({e})", FormatError)

    offset = start + header_len
    try:
        layout = [(str(entry["id"]), tuple(int(n) for n in entry["shape"])) for entry in header["tensors"]]
        encoder = EncoderConfig(**header["encoder"])
        cursor = header.get("cursor", {})
        cursor_round, cursor_phase = int(cursor.get("round", 0)), int(cursor.get("phase", 0))
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        _fail(f"{source}: malformed checkpoint header ({type(e).__name__}: {e})", FormatError)

    tensors: Dict[str, np.ndarray] = {}
    for tensor_id, shape in layout:
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(data):
            _fail(f"{source}: truncated tensor {tensor_id!r} at byte offset {offset}", FormatError)
        tensors[tensor_id] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        )
        offset += 4 * count
    if offset != len(data):
        _fail(f"{source}: {len(data) - offset} unexpected trailing bytes at offset {offset}", FormatError)

    return Checkpoint(
        version=version,
        encoder=encoder,
        tensors=tensors,
        cursor_round=cursor_round,
        cursor_phase=cursor_phase,
        experiment=header.get("experiment"),
    )


def read_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    _check_file_exists(path)
    return decode_checkpoint(path.read_bytes(), str(path))


# Metrics

_KEPT_PATTERN = re.compile(r"^\d+(;\d+)*$")
_INT_COLUMNS = ["round", "phase", "bytes_down", "bytes_up", "flops_fwd", "flops_bwd", "peak_mem_words"]
_FLOAT_COLUMNS = ["loss_mean", "comm_frac", "compute_frac", "mem_frac"]


def read_metrics(path: PathLike) -> pd.DataFrame:
    """
    Read a metrics CSV and check every row.

    Raises
    ------
    FormatError
        On a wrong header or a malformed row; the message names the line.
    """
    path = Path(path)
    _check_file_exists(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        _fail(f"{path}: {e}", FormatError)

    if list(df.columns) != METRICS_COLUMNS:
        _fail(f"{path}:1: unexpected header {','.join(df.columns)}", FormatError)

    parsed = {name: [] for name in METRICS_COLUMNS}
    for i, row in enumerate(df.itertuples(index=False), start=2):
        values = row._asdict()
        try:
            for name in _INT_COLUMNS:
                parsed[name].append(int(values[name]))
            for name in _FLOAT_COLUMNS:
                text = values[name]
                parsed[name].append(float(text) if text != "" else float("nan"))
        except ValueError as e:
            _fail(f"{path}:{i}: malformed metrics row ({e})", FormatError)
        if not _KEPT_PATTERN.match(values["kept_layers"]):
            _fail(f"{path}:{i}: malformed kept_layers {values['kept_layers']!r}", FormatError)
        parsed["kept_layers"].append(values["kept_layers"])

    return pd.DataFrame(parsed, columns=METRICS_COLUMNS)


def read_eval_results(path: PathLike) -> Optional[pd.DataFrame]:
    path = Path(path)
    if not path.is_file():
        return None
    return pd.read_csv(path)
