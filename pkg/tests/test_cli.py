import json

import pytest

import cli
import harness
from database import ExperimentRun
from policy import NumericUnderflow


@pytest.fixture
def config_file(tmp_path, chains_doc):
    path = tmp_path / 'chains.json'
    path.write_text(json.dumps({**chains_doc, 'workers': 1}))
    return path


def test_validate(config_file):
    assert cli.main(['validate', str(config_file)]) == cli.EXIT_OK


def test_invalid_config(tmp_path, chains_doc):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({**chains_doc, 'horizon': 0}))
    assert cli.main(['validate', str(path)]) == cli.EXIT_CONFIG


def test_missing_config(tmp_path):
    assert cli.main(['validate', str(tmp_path / 'nope.json')]) == cli.EXIT_CONFIG


def test_run_writes_results(config_file, tmp_path):
    out = tmp_path / 'cli_out'
    assert cli.main(['run', str(config_file), '--out', str(out)]) == cli.EXIT_OK
    assert (out / 'regret.csv').exists()
    assert (out / 'summary.json').exists()


def test_run_records_in_registry(config_file, tmp_path, registry, monkeypatch):
    monkeypatch.setattr(cli, 'init_db', lambda: None)
    monkeypatch.setattr(cli, 'SessionLocal', registry)
    assert cli.main(['run', str(config_file), '--out', str(tmp_path / 'rec'), '--record']) == cli.EXIT_OK
    db = registry()
    try:
        assert db.query(ExperimentRun).filter_by(status='completed').count() == 1
    finally:
        db.close()


def test_runtime_failure_exit_code(config_file, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericUnderflow("W(1,k) underflowed")

    monkeypatch.setattr(cli, 'run', explode)
    assert cli.main(['run', str(config_file)]) == cli.EXIT_RUNTIME


def test_sweep(config_file, tmp_path):
    out = tmp_path / 'sweep'
    assert cli.main(['sweep', str(config_file), '--param', 'horizon=20,40', '--out', str(out)]) == cli.EXIT_OK
    assert (out / 'sweep.csv').exists()


def test_bad_sweep_parameter(config_file):
    assert cli.main(['sweep', str(config_file), '--param', 'horizon']) == cli.EXIT_CONFIG


def test_bench(tmp_path):
    assert cli.main(['bench', '--rounds', '1', '--out', str(tmp_path)]) == cli.EXIT_OK
    assert (tmp_path / 'bench.csv').exists()


def test_bench_check_fails_below_the_speedup_floor(tmp_path, monkeypatch):
    monkeypatch.setattr(harness, 'BENCH_MIN_SPEEDUP', float('inf'))
    assert cli.main(['bench', '--rounds', '1', '--out', str(tmp_path), '--check']) == cli.EXIT_RUNTIME
    assert (tmp_path / 'bench.csv').exists()
