"""
Main computational pipeline for FLLSim.

This module orchestrates the full workflow:
    config -> data -> partition -> rounds (plan, clients, aggregate, ledger)
    -> checkpoints + metrics -> evaluation

This pipeline is interface-agnostic.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from fllsim.core.datasets import Dataset, Partition, partition_iid
from fllsim.core.encoder import LayeredEncoder, init_encoder
from fllsim.core.evaluation import EvalResult, evaluate, pixel_probe
from fllsim.core.federation import USER_FRIENDLY_MODE_NAMES, get_planner
from fllsim.core.federation.client import ClientPool, ClientUpdate, TrainSettings
from fllsim.core.federation.schedule import (
    RoundPlan,
    make_round_plan,
    schedule_phase,
    total_rounds,
    validate_schedule,
)
from fllsim.core.federation.server import aggregate, apply_delta
from fllsim.core.resources import (
    LayerCosts,
    ResourceLedger,
    analytic_sample,
    baseline_sample,
    layer_costs,
)
from fllsim.core.results import RoundLog, RunLog
from fllsim.io.readers import experiment_to_dict, load_cifar100, read_checkpoint
from fllsim.io.schema import CHECKPOINT_VERSION, Checkpoint, EvalConfig, ExperimentConfig
from fllsim.io.writers import append_eval_result, append_metrics, truncate_metrics, write_checkpoint
from fllsim.utils import SeedStreams, log_to_file, setup_logger
from fllsim.utils.data_generator import synth_splits

logger = setup_logger(__name__)

PathLike = str | Path

OUTPUT_DIR_ENV = "FLLSIM_OUTPUT_DIR"
METRICS_FILE = "metrics.csv"
EVAL_RESULTS_FILE = "eval_results.csv"
LOG_FILE = "fllsim.log"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class PretrainResult:
    encoder: LayeredEncoder
    logs: RunLog
    ledger: ResourceLedger
    partition: Partition
    output_dir: Optional[Path] = None
    checkpoints: List[Path] = field(default_factory=list)


# Helpers

def resolve_output_dir(cfg: ExperimentConfig, override: Optional[PathLike] = None) -> Path:
    """CLI override, then config, then $FLLSIM_OUTPUT_DIR, then ./fllsim_runs/<name>."""
    if override:
        return Path(override)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_DIR_ENV)
    return Path(root) / cfg.name if root else Path("fllsim_runs") / cfg.name


def load_datasets(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """(train, test) for the configured source."""
    if cfg.dataset.source == "cifar":
        return load_cifar100(cfg.dataset.path)
    return synth_splits(cfg.dataset, channels=cfg.encoder.channels)


def phase_checkpoint_path(output_dir: Path, phase: int) -> Path:
    return output_dir / CHECKPOINT_DIR / f"phase_{phase:02d}.ckpt"


def make_checkpoint(enc: LayeredEncoder, cfg: ExperimentConfig, cursor_round: int, cursor_phase: int) -> Checkpoint:
    return Checkpoint(
        version=CHECKPOINT_VERSION,
        encoder=enc.config,
        tensors=enc.state_dict(),
        cursor_round=cursor_round,
        cursor_phase=cursor_phase,
        experiment=experiment_to_dict(cfg),
    )


def encoder_from_checkpoint(checkpoint: Checkpoint) -> LayeredEncoder:
    return LayeredEncoder.from_state_dict(checkpoint.encoder, checkpoint.tensors)


# One round

def run_round(
    encoder: LayeredEncoder,
    plan: RoundPlan,
    pool: ClientPool,
    partition: Partition,
    costs: LayerCosts,
    ledger: ResourceLedger,
    cfg: ExperimentConfig,
) -> Tuple[RoundLog, List[ClientUpdate]]:
    """
    Dispatch one round: ship the restricted snapshot, collect updates,
    aggregate them into `encoder` and record resources.
    """
    fed = cfg.federation
    snapshot = encoder.restrict(plan.kept, [plan.tap_layer])
    updates = pool.run(snapshot, plan, partition)

    for update in updates:
        if update.failed:
            logger.warning(f"Round {plan.round}: client {update.client_id} failed ({update.error}); update excluded")
        elif update.resampled:
            logger.debug(f"Round {plan.round}: client {update.client_id} shard smaller than a batch, sampled with replacement")

    delta = aggregate(updates, fed.server_lr)
    if delta is None:
        logger.warning(f"Round {plan.round} skipped: no valid client update")
    else:
        apply_delta(encoder, delta)

    valid = [u for u in updates if not u.failed]
    if valid:
        sample = valid[0].resources
        for update in valid[1:]:
            sample = sample.merge_max(update.resources)
    else:
        sample = analytic_sample(plan, costs, fed.local_steps, cfg.accounting)
    fracs = ledger.record(plan.round, plan.phase, sample)

    losses = [u.loss_mean for u in valid if not np.isnan(u.loss_mean)]
    row = RoundLog(
        round=plan.round,
        phase=plan.phase,
        kept_layers=plan.kept,
        loss_mean=float(np.mean(losses)) if losses else float("nan"),
        bytes_down=sample.bytes_down,
        bytes_up=sample.bytes_up,
        flops_fwd=sample.flops_forward,
        flops_bwd=sample.flops_backward,
        peak_mem_words=sample.peak_memory_words,
        comm_frac=fracs.comm_frac,
        compute_frac=fracs.compute_frac,
        mem_frac=fracs.memory_frac,
    )
    logger.debug(
        f"Round {plan.round} phase {plan.phase} kept={plan.kept_label} "
        f"loss={row.loss_mean:.4f} comm={row.comm_frac:.3f} "
        f"compute={row.compute_frac:.3f} mem={row.mem_frac:.3f}"
    )
    return row, updates


# Pretraining

def run_pretraining(
    cfg: ExperimentConfig,
    train: Dataset,
    encoder: Optional[LayeredEncoder] = None,
    *,
    output_dir: Optional[PathLike] = None,
    start_round: int = 0,
    log_file: Optional[PathLike] = None,
) -> PretrainResult:
    """
    Run federated pretraining from `start_round` to the end of the schedule.

    Parameters
    ----------
    cfg : ExperimentConfig
        Validated experiment configuration.
    train : Dataset
        Training images; partitioned IID over the clients from the run seed.
    encoder : LayeredEncoder, optional
        Starting model (e.g. loaded from a checkpoint). A fresh encoder is
        initialized from the run seed when omitted.
    output_dir : path, optional
        When given, metrics are appended to <output_dir>/metrics.csv and
        checkpoints are written at every phase boundary and at the end.
    start_round : int
        First round to run (resume cursor).
    log_file : path, optional
        Also write the log of every fllsim module there for the duration
        of the run.

    Returns
    -------
    PretrainResult
    """
    with log_to_file(log_file):
        return _pretrain(cfg, train, encoder, output_dir, start_round)


def _pretrain(
    cfg: ExperimentConfig,
    train: Dataset,
    encoder: Optional[LayeredEncoder],
    output_dir: Optional[PathLike],
    start_round: int,
) -> PretrainResult:
    fed = cfg.federation
    num_blocks = cfg.encoder.num_blocks
    planner = get_planner(cfg.mode)
    validate_schedule(fed, num_blocks, cfg.mode)

    streams = SeedStreams(fed.seed)
    if encoder is None:
        encoder = init_encoder(cfg.encoder, streams.seed("init"))
    partition = partition_iid(train, fed.num_clients, streams.seed("partition"))

    costs = layer_costs(cfg.encoder, fed.batch_size)
    ledger = ResourceLedger(baseline_sample(costs, fed.local_steps))
    logs = RunLog()
    total = total_rounds(fed, num_blocks)

    output_dir = Path(output_dir) if output_dir is not None else None
    metrics_path = output_dir / METRICS_FILE if output_dir else None
    if metrics_path is not None:
        truncate_metrics(metrics_path, start_round)

    logger.info(
        f"Starting pretraining: {USER_FRIENDLY_MODE_NAMES[cfg.mode]} | seed {fed.seed} | "
        f"{num_blocks + 1} layers x {fed.rounds_per_layer} rounds = {total} rounds | "
        f"{fed.clients_per_round}/{fed.num_clients} clients per round"
    )
    if start_round:
        logger.info(f"Resuming at round {start_round} (phase {schedule_phase(start_round, fed, num_blocks)})")

    checkpoints: List[Path] = []
    settings = TrainSettings.from_experiment(cfg)
    current_phase = None

    with ClientPool(train.images, settings, cfg.workers) as pool:
        for round_index in range(start_round, total):
            plan = make_round_plan(round_index, fed, num_blocks, planner, streams)
            if plan.phase != current_phase:
                current_phase = plan.phase
                logger.info(
                    f"Phase {plan.phase}: training layers {list(plan.trainable)}, "
                    f"tap layer {plan.tap_layer}"
                )

            row, _ = run_round(encoder, plan, pool, partition, costs, ledger, cfg)
            logs.append(row)
            if metrics_path is not None:
                append_metrics(metrics_path, [row])

            next_round = round_index + 1
            if output_dir is not None and next_round % fed.rounds_per_layer == 0:
                checkpoints.append(write_checkpoint(
                    phase_checkpoint_path(output_dir, plan.phase),
                    make_checkpoint(encoder, cfg, next_round, schedule_phase(next_round, fed, num_blocks)),
                ))

    if output_dir is not None:
        checkpoints.append(write_checkpoint(
            output_dir / FINAL_CHECKPOINT,
            make_checkpoint(encoder, cfg, total, num_blocks),
        ))

    logger.info(f"Pretraining finished after {total} rounds")
    return PretrainResult(
        encoder=encoder,
        logs=logs,
        ledger=ledger,
        partition=partition,
        output_dir=output_dir,
        checkpoints=checkpoints,
    )


def resume_pretraining(
    checkpoint_path: PathLike,
    cfg: ExperimentConfig,
    train: Dataset,
    **kwargs,
) -> PretrainResult:
    """Continue a run from a checkpoint's cursor."""
    checkpoint = read_checkpoint(checkpoint_path)
    if checkpoint.encoder != cfg.encoder:
        message = f"checkpoint encoder {checkpoint.encoder} does not match the config encoder {cfg.encoder}"
        logger.error(message)
        raise ValueError(message)
    return run_pretraining(
        cfg,
        train,
        encoder_from_checkpoint(checkpoint),
        start_round=checkpoint.cursor_round,
        **kwargs,
    )


# Evaluation

def run_directory(checkpoint_path: PathLike) -> Path:
    """Run directory a checkpoint belongs to."""
    parent = Path(checkpoint_path).resolve().parent
    return parent.parent if parent.name == CHECKPOINT_DIR else parent


def run_evaluation(
    checkpoint_path: PathLike,
    layer: int,
    mode: str,
    cfg: ExperimentConfig,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    record: bool = True,
) -> EvalResult:
    """
    Evaluate a checkpoint at `layer` and append the result to the run's
    eval_results.csv. The checkpoint file is only read.
    """
    checkpoint = read_checkpoint(checkpoint_path)
    encoder = encoder_from_checkpoint(checkpoint)
    if train is None or test is None:
        train, test = load_datasets(cfg)

    logger.info(f"Evaluating {checkpoint_path} at layer {layer} ({mode})")
    result = evaluate(encoder, train, test, layer, mode, cfg.evaluation)
    logger.info(f"Top-1 accuracy: {result.accuracy:.4f} (train {result.train_accuracy:.4f})")

    if record:
        train_mode = (checkpoint.experiment or {}).get("mode", cfg.mode)
        append_eval_result(run_directory(checkpoint_path) / EVAL_RESULTS_FILE, {
            "checkpoint": Path(checkpoint_path).name,
            "train_mode": train_mode,
            "seed": (checkpoint.experiment or {}).get("federation", {}).get("seed", cfg.federation.seed),
            "layer": layer,
            "eval_mode": mode,
            "accuracy": result.accuracy,
            "train_accuracy": result.train_accuracy,
        })
    return result


def run_pixel_baseline(cfg: ExperimentConfig, eval_cfg: Optional[EvalConfig] = None) -> EvalResult:
    train, test = load_datasets(cfg)
    result = pixel_probe(train, test, eval_cfg or cfg.evaluation)
    logger.info(f"Pixel linear baseline: {result.accuracy:.4f}")
    return result
