#!/usr/bin/env python3
"""
CLI launcher for FLLSim.

This module defines the commands (pretrain, eval, partition, report), their
options and the mapping from errors to exit statuses: 2 for an invalid
configuration, 1 for unreadable or malformed files.
"""

import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple

import click  # type: ignore
import pandas as pd
from yaspin import yaspin  # type: ignore
from yaspin.spinners import Spinners  # type: ignore

from fllsim.__version__ import __version__
from fllsim.core.datasets import partition_iid
from fllsim.core.errors import FormatError
from fllsim.core.federation import USER_FRIENDLY_MODE_NAMES, list_available_modes
from fllsim.core.pipeline import (
    LOG_FILE,
    EVAL_RESULTS_FILE,
    load_datasets,
    resolve_output_dir,
    resume_pretraining,
    run_evaluation,
    run_pixel_baseline,
    run_pretraining,
)
from fllsim.core.results import comparison_table, phase_summary, probe_comparison
from fllsim.io.readers import experiment_from_dict, read_checkpoint, read_config, read_eval_results, read_metrics
from fllsim.io.schema import ExperimentConfig
from fllsim.io.validators import EVAL_MODES, validate_experiment_config
from fllsim.io.writers import write_partition, write_report
from fllsim.utils import SeedStreams

EXIT_IO_ERROR = 1
EXIT_CONFIG_ERROR = 2


# Message helpers
def echo_info(msg: str):
    click.echo(f"[INFO] {msg}")


def echo_error(msg: str):
    click.echo(f"[ERROR] {msg}", err=True)


@contextmanager
def exit_on_error():
    """Turn library errors into an [ERROR] line and a nonzero exit status."""
    try:
        yield
    except (FileNotFoundError, FormatError, OSError) as e:
        echo_error(str(e))
        sys.exit(EXIT_IO_ERROR)
    except ValueError as e:
        echo_error(str(e))
        sys.exit(EXIT_CONFIG_ERROR)


def apply_overrides(cfg: ExperimentConfig, mode: Optional[str], seed: Optional[int], workers: Optional[int]) -> ExperimentConfig:
    if mode is not None:
        cfg = replace(cfg, mode=mode)
    if seed is not None:
        cfg = replace(cfg, federation=replace(cfg.federation, seed=seed))
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    validate_experiment_config(cfg)
    return cfg


def usage_callback(ctx: click.Context, param: click.Parameter, value):
    """
    Print docs/USAGE.txt if --usage is used
    No command is launched
    """
    if not value:
        return

    usage_file = Path(__file__).resolve().parent.parent.parent.parent / "docs" / "USAGE.txt"
    if usage_file.exists():
        click.echo(usage_file.read_text())
    else:
        click.echo("USAGE.txt not found!")
    ctx.exit(0)


# Main CLI
@click.group()
@click.option("--usage",
    is_flag=True,
    is_eager=True,
    expose_value=False,
    callback=usage_callback,
    help="Print the long usage text and exit",
)
@click.version_option(version=__version__, prog_name="FLLSim")
def cli() -> None:
    """
    FLLSim: federated layer-wise self-supervised learning simulator
    """


# pretrain
@cli.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Experiment config (JSON)")
@click.option("--mode", type=click.Choice(list_available_modes()), help="Override the training mode")
@click.option("--seed", type=int, help="Override the run seed")
@click.option("--workers", type=int, help="Number of client worker processes")
@click.option("--resume", "resume_path",
              type=click.Path(dir_okay=False, path_type=Path),
              help="Continue from a checkpoint's cursor")
@click.option("-o", "--output",
              type=click.Path(file_okay=False, dir_okay=True, path_type=Path),
              help="Output directory")
@click.option("--log", is_flag=True, help="Also write the log to <output>/fllsim.log")
def pretrain(
    config_path: Path,
    mode: Optional[str],
    seed: Optional[int],
    workers: Optional[int],
    resume_path: Optional[Path],
    output: Optional[Path],
    log: bool,
) -> None:
    """Run federated pretraining and write checkpoints and metrics."""
    with exit_on_error():
        cfg = apply_overrides(read_config(config_path), mode, seed, workers)
        output_dir = resolve_output_dir(cfg, output)
        fed = cfg.federation

        echo_info(
            f"Mode                :{USER_FRIENDLY_MODE_NAMES[cfg.mode]}\n\t"
            f"Seed                :{fed.seed}\n\t"
            f"Blocks              :{cfg.encoder.num_blocks}\n\t"
            f"Clients             :{fed.clients_per_round}/{fed.num_clients} per round\n\t"
            f"Batch / local steps :{fed.batch_size} / {fed.local_steps}\n\t"
            f"Client lr           :{fed.client_lr}\n\t"
            f"Budget / drop rate  :{fed.budget} / {fed.drop_rate}\n\t"
            f"Output              :{output_dir}\n"
        )

        train, _ = load_datasets(cfg)
        log_file = output_dir / LOG_FILE if log else None
        with yaspin(Spinners.dots, text="Pretraining...") as spinner:
            if resume_path is not None:
                result = resume_pretraining(resume_path, cfg, train, output_dir=output_dir, log_file=log_file)
            else:
                result = run_pretraining(cfg, train, output_dir=output_dir, log_file=log_file)
            spinner.ok("Done")

        echo_info(f"{len(result.logs)} rounds run, {len(result.checkpoints)} checkpoints written to {output_dir}")


# eval
@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Checkpoint to evaluate (never modified)")
@click.option("--layer", type=int, help="Layer whose representation is probed")
@click.option("--mode", type=click.Choice(list(EVAL_MODES)), default="linear", show_default=True)
@click.option("--config", "config_path",
              type=click.Path(dir_okay=False, path_type=Path),
              help="Experiment config; defaults to the one echoed in the checkpoint")
@click.option("--baseline", is_flag=True, help="Also report the raw-pixel linear baseline")
def eval_cmd(
    checkpoint_path: Path,
    layer: Optional[int],
    mode: str,
    config_path: Optional[Path],
    baseline: bool,
) -> None:
    """Linear probe or finetune a checkpoint at one layer (or at the configured layers)."""
    with exit_on_error():
        if config_path is not None:
            cfg = read_config(config_path)
        else:
            echo = read_checkpoint(checkpoint_path).experiment
            if echo is None:
                raise ValueError(f"{checkpoint_path} carries no experiment config; pass --config")
            cfg = experiment_from_dict(echo)

        layers = (layer,) if layer is not None else cfg.evaluation.layers
        train, test = load_datasets(cfg)
        for k in layers:
            result = run_evaluation(checkpoint_path, k, mode, cfg, train, test)
            echo_info(f"Layer {k:>2} {mode:<8} top-1 {result.accuracy:.4f}")

        if baseline:
            result = run_pixel_baseline(cfg)
            echo_info(f"Pixels   linear   top-1 {result.accuracy:.4f}")


# partition
@cli.command()
@click.option("--n", "num_examples", required=True, type=int, help="Number of examples")
@click.option("--clients", "num_clients", required=True, type=int, help="Number of clients")
@click.option("--seed", type=int, default=0, show_default=True, help="Run seed")
@click.option("-o", "--output", required=True,
              type=click.Path(dir_okay=False, path_type=Path),
              help="Output CSV (client_id,index)")
def partition(num_examples: int, num_clients: int, seed: int, output: Path) -> None:
    """Write the IID shard assignment a run with this seed would use."""
    with exit_on_error():
        shards = partition_iid(num_examples, num_clients, SeedStreams(seed).seed("partition"))
        write_partition(output, shards)
        sizes = shards.sizes()
        echo_info(f"{num_examples} examples over {num_clients} clients (shard sizes {min(sizes)}-{max(sizes)}) -> {output}")


# report
@cli.command()
@click.argument("metrics", nargs=-1, required=True,
                type=click.Path(dir_okay=False, path_type=Path))
@click.option("-o", "--output",
              type=click.Path(file_okay=False, dir_okay=True, path_type=Path),
              help="Output directory (default: current directory)")
@click.option("--ext",
              type=click.Choice(["csv", "xlsx"], case_sensitive=False),
              default="csv", show_default=True,
              help="Specify output file format [csv/xlsx]")
@click.option("--job_name", type=str, help="Specify the analysis name")
def report(metrics: Tuple[Path, ...], output: Optional[Path], ext: str, job_name: Optional[str]) -> None:
    """Summarize one or more metrics files."""
    with exit_on_error():
        runs = {}
        for path in metrics:
            label = path.parent.name or path.stem
            if label in runs:
                label = str(path)
            runs[label] = read_metrics(path)

        phases = pd.concat(
            [phase_summary(df).assign(run=label) for label, df in runs.items()],
            ignore_index=True,
        )
        losses = pd.concat(
            [df[["round", "phase", "loss_mean"]].assign(run=label) for label, df in runs.items()],
            ignore_index=True,
        )
        comparison = comparison_table(runs)
        tables = {"phase_summary": phases, "loss_curves": losses, "comparison": comparison}

        evals = [read_eval_results(path.parent / EVAL_RESULTS_FILE) for path in metrics]
        evals = [df for df in evals if df is not None]
        probes = probe_comparison(pd.concat(evals, ignore_index=True)) if evals else None
        if probes is not None:
            tables["probe_comparison"] = probes

        click.echo(comparison.to_string(index=False))
        click.echo()
        click.echo(phases.to_string(index=False))
        if probes is not None:
            click.echo()
            click.echo(probes.to_string(index=False))

        written = write_report(output or Path.cwd().resolve(), tables, ext.lower(), job_name)
        for path in sorted(set(written.values())):
            echo_info(f"Report written to: {path}")


# Entry point
if __name__ == "__main__":
    cli(prog_name="fllsim")
