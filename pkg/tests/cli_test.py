import json

import pytest
from click.testing import CliRunner

from fllsim.__version__ import __version__
from fllsim.interfaces.cli import cli
from fllsim.io.readers import experiment_to_dict
from tests.conftest import TINY_EXPERIMENT

# ----------------------------------------------------------------------
# FIXTURES
# ----------------------------------------------------------------------
@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(experiment_to_dict(TINY_EXPERIMENT), indent=2))
    return path


@pytest.fixture
def pretrained(tmp_path, config_file):
    out = tmp_path / "run"
    code, output, err = run_cli(["pretrain", "--config", str(config_file), "-o", str(out), "--log"])
    assert code == 0, output
    return out


# ----------------------------------------------------------------------
# HELPER TO RUN THE CLI
# ----------------------------------------------------------------------
def run_cli(args, input_text=None):
    """Run the CLI through click's CliRunner; returns (exit_code, output, exception)."""
    runner = CliRunner()
    result = runner.invoke(cli, args, input=input_text)
    return result.exit_code, result.output, result.exception


# ----------------------------------------------------------------------
# GLOBAL OPTIONS
# ----------------------------------------------------------------------
def test_version():
    code, out, _ = run_cli(["--version"])
    assert code == 0
    assert __version__ in out and "FLLSim" in out


def test_usage():
    code, out, _ = run_cli(["--usage"])
    assert code == 0
    assert "fllsim pretrain" in out


def test_help_lists_commands():
    code, out, _ = run_cli(["--help"])
    assert code == 0
    for command in ("pretrain", "eval", "partition", "report"):
        assert command in out


# ----------------------------------------------------------------------
# PRETRAIN
# ----------------------------------------------------------------------
def test_pretrain_writes_run_directory(pretrained):
    assert (pretrained / "metrics.csv").is_file()
    assert (pretrained / "final.ckpt").is_file()
    assert len(list((pretrained / "checkpoints").glob("phase_*.ckpt"))) == 4
    assert (pretrained / "fllsim.log").is_file()


def test_pretrain_echoes_settings(tmp_path, config_file):
    code, out, _ = run_cli([
        "pretrain", "--config", str(config_file), "--mode", "end2end", "--seed", "11",
        "-o", str(tmp_path / "e2e"),
    ])
    assert code == 0, out
    assert "Seed                :11" in out
    assert "8 rounds run" in out


def test_pretrain_resume(tmp_path, pretrained, config_file):
    code, out, _ = run_cli([
        "pretrain", "--config", str(config_file), "-o", str(pretrained),
        "--resume", str(pretrained / "checkpoints" / "phase_02.ckpt"),
    ])
    assert code == 0, out
    assert "2 rounds run" in out


def test_invalid_config_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"federation": {"num_clients": 2, "clients_per_round": 5}}))
    code, out, _ = run_cli(["pretrain", "--config", str(path), "-o", str(tmp_path / "out")])
    assert code == 2
    assert "[ERROR]" in out and "clients_per_round" in out


def test_unknown_key_exits_2(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"epochs": 3}))
    code, out, _ = run_cli(["pretrain", "--config", str(path)])
    assert code == 2
    assert "unknown key 'epochs'" in out


def test_infeasible_budget_exits_2(tmp_path):
    doc = experiment_to_dict(TINY_EXPERIMENT)
    doc["mode"] = "layerwise-dropout"
    doc["federation"].update(budget=2, active_window=2)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code, out, _ = run_cli(["pretrain", "--config", str(path), "-o", str(tmp_path / "out")])
    assert code == 2


def test_missing_config_exits_1(tmp_path):
    code, out, _ = run_cli(["pretrain", "--config", str(tmp_path / "absent.json")])
    assert code == 1
    assert "File not found" in out


def test_malformed_json_exits_1(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json")
    code, out, _ = run_cli(["pretrain", "--config", str(path)])
    assert code == 1
    assert "invalid JSON" in out


# ----------------------------------------------------------------------
# EVAL
# ----------------------------------------------------------------------
def test_eval_uses_the_echoed_config(pretrained):
    code, out, _ = run_cli(["eval", "--checkpoint", str(pretrained / "final.ckpt"), "--layer", "2", "--baseline"])
    assert code == 0, out
    assert "Layer  2 linear" in out
    assert "Pixels" in out
    assert (pretrained / "eval_results.csv").is_file()


def test_eval_configured_layers(pretrained, config_file):
    code, out, _ = run_cli([
        "eval", "--checkpoint", str(pretrained / "final.ckpt"), "--config", str(config_file),
    ])
    assert code == 0, out
    assert "Layer  1" in out and "Layer  3" in out


def test_eval_layer_out_of_range(pretrained):
    code, out, _ = run_cli(["eval", "--checkpoint", str(pretrained / "final.ckpt"), "--layer", "7"])
    assert code == 2
    assert "outside" in out


def test_eval_corrupt_checkpoint(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"garbage")
    code, out, _ = run_cli(["eval", "--checkpoint", str(path), "--layer", "1"])
    assert code == 1
    assert "bad magic" in out


# ----------------------------------------------------------------------
# PARTITION
# ----------------------------------------------------------------------
def test_partition(tmp_path):
    out_file = tmp_path / "partition.csv"
    code, out, _ = run_cli(["partition", "--n", "10", "--clients", "3", "--seed", "4", "-o", str(out_file)])
    assert code == 0
    assert "shard sizes 3-4" in out
    assert len(out_file.read_text().splitlines()) == 11


def test_partition_too_many_clients(tmp_path):
    code, out, _ = run_cli(["partition", "--n", "2", "--clients", "3", "-o", str(tmp_path / "p.csv")])
    assert code == 2


# ----------------------------------------------------------------------
# REPORT
# ----------------------------------------------------------------------
@pytest.mark.parametrize("ext,suffix", [("csv", ".csv"), ("xlsx", ".xlsx")])
def test_report(tmp_path, pretrained, ext, suffix):
    run_cli(["eval", "--checkpoint", str(pretrained / "final.ckpt"), "--layer", "1"])
    report_dir = tmp_path / "report"
    code, out, _ = run_cli([
        "report", str(pretrained / "metrics.csv"), "-o", str(report_dir), "--ext", ext, "--job_name", "tiny",
    ])
    assert code == 0, out
    assert "comm_frac_max" in out
    files = list(report_dir.glob(f"*{suffix}"))
    assert files
    if ext == "csv":
        names = {f.name.split("_tiny_")[0] for f in files}
        assert names == {"fllsim_phase_summary", "fllsim_loss_curves", "fllsim_comparison", "fllsim_probe_comparison"}


def test_report_missing_metrics(tmp_path):
    code, out, _ = run_cli(["report", str(tmp_path / "none.csv")])
    assert code == 1
