import subprocess
import sys

import pytest

from fedeu import cli, oracles
from fedeu.config import dump_config, load_config

from conftest import toy_config


@pytest.fixture
def toy_yaml(tmp_path):
    path = tmp_path / "toy.yaml"
    dump_config(toy_config(tmp_path, rounds=1), path)
    return path


def test_generate_is_deterministic(tmp_path, toy_yaml, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert cli.main(["generate", "--config", str(toy_yaml), "--out", str(a)]) == 0
    assert cli.main(["generate", "--config", str(toy_yaml), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert "client 1: 8 train, 4 test" in capsys.readouterr().out


def test_generated_dataset_can_drive_a_run(tmp_path, toy_yaml):
    ds = tmp_path / "ds.bin"
    assert cli.main(["generate", "--config", str(toy_yaml), "--out", str(ds)]) == 0
    assert cli.main(["run", "--config", str(toy_yaml), "--set", "data=null",
                     "--set", f"dataset_path={ds}", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "metrics.csv").exists()


def test_run_and_rerun_from_saved_config(tmp_path, toy_yaml, capsys):
    first = tmp_path / "first"
    assert cli.main(["run", "--config", str(toy_yaml), "--out", str(first), "--rounds", "2"]) == 0
    assert "final mean IoU" in capsys.readouterr().out
    saved = load_config(first / "config.yaml")
    assert saved.federation.rounds == 2 and saved.output_dir == str(first)
    second = tmp_path / "second"
    assert cli.main(["run", "--config", str(first / "config.yaml"), "--out", str(second)]) == 0
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()


def test_run_flags_reach_config(tmp_path, toy_yaml):
    out = tmp_path / "r"
    assert cli.main(["run", "--config", str(toy_yaml), "--out", str(out), "--seed", "3",
                     "--mode", "fedavg", "--disable-cfe", "--share-eu-head", "--workers", "2"]) == 0
    cfg = load_config(out / "config.yaml")
    assert cfg.seed == 3 and cfg.data.seed == 3
    assert cfg.federation.mode == "fedavg" and cfg.federation.workers == 2
    assert cfg.ablation.disable_cfe and cfg.ablation.share_eu_head and not cfg.ablation.disable_tuw


def test_config_errors_exit_2(tmp_path, toy_yaml, capsys):
    assert cli.main(["run", "--config", str(toy_yaml), "--set", "federation.lr=abc"]) == 2
    err = capsys.readouterr().err
    assert "federation.lr" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text(toy_yaml.read_text() + "surprise: 1\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "surprise" in capsys.readouterr().err


def test_generate_without_data_section(tmp_path, toy_yaml, capsys):
    code = cli.main(["generate", "--config", str(toy_yaml), "--set", "data=null",
                     "--set", "dataset_path=x.bin", "--out", str(tmp_path / "x.bin")])
    assert code == 2 and "'data'" in capsys.readouterr().err


def test_io_errors_exit_4(tmp_path, toy_yaml, capsys):
    missing = tmp_path / "nope.yaml"
    assert cli.main(["run", "--config", str(missing)]) == 4
    assert str(missing) in capsys.readouterr().err
    ds = tmp_path / "ds.bin"
    cli.main(["generate", "--config", str(toy_yaml), "--out", str(ds)])
    ds.write_bytes(ds.read_bytes()[:100])
    code = cli.main(["run", "--config", str(toy_yaml), "--set", "data=null",
                     "--set", f"dataset_path={ds}", "--out", str(tmp_path / "r")])
    assert code == 4 and "offset" in capsys.readouterr().err


def test_numeric_error_exit_3(tmp_path, toy_yaml, monkeypatch, capsys):
    from fedeu import federation
    from fedeu.errors import NumericError

    def boom(cfg, callback=None):
        raise NumericError("layer dec1/conv produced inf")
    monkeypatch.setattr(federation, "run_experiment", boom)
    assert cli.main(["run", "--config", str(toy_yaml)]) == 3
    assert "dec1/conv" in capsys.readouterr().err


def test_verify_exit_codes(monkeypatch, capsys):
    ok = oracles.OracleResult("fake", 0.0, 1e-3, 0.0, 1)
    bad = oracles.OracleResult("fake_bad", 0.5, 1e-3, 0.0, 1)
    monkeypatch.setattr(oracles, "run_oracle_suite", lambda **kw: [ok])
    assert cli.main(["verify"]) == 0
    monkeypatch.setattr(oracles, "run_oracle_suite", lambda **kw: [ok, bad])
    assert cli.main(["verify"]) == 1
    out = capsys.readouterr().out
    assert "fake_bad" in out and "1/2 oracles passed" in out


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "fedeu.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("generate", "run", "verify"):
        assert command in proc.stdout
