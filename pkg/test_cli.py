import json
import os

import pytest

from cli import EXIT_CODES, EXIT_ERROR, main

EXPERIMENTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'experiments')
SUNSET = os.path.join(EXPERIMENTS_DIR, 'diagrams_report.yaml')


def test_passing_run_exits_zero_and_writes_outputs(tmp_path, capsys):
    prefix = str(tmp_path / 'sunset')
    code = main(['diagrams_report', '--config', SUNSET, '--out', prefix, '--seed', '7'])
    assert code == EXIT_CODES['pass'] == 0
    printed = capsys.readouterr().out.splitlines()
    assert printed[-1] == "diagrams_report: pass"
    assert f"{prefix}_summary.json" in printed
    with open(f"{prefix}_summary.json", 'r', encoding='utf-8') as f:
        summary = json.load(f)
    assert summary['seed'] == 7


def test_failing_threshold_exits_one(tmp_path):
    config = tmp_path / 'strict.yaml'
    config.write_text(
        "experiment: diagrams_report\n"
        "params:\n"
        "  sweep_graphs: 0\n"
        "thresholds:\n"
        "  j_power_min: 100\n"
        f"output: {tmp_path / 'strict'}\n",
        encoding='utf-8'
    )
    assert main(['diagrams_report', '--config', str(config)]) == EXIT_CODES['fail'] == 1


def test_experiment_mismatch_is_an_error(tmp_path):
    assert main(['dos', '--config', SUNSET, '--out', str(tmp_path / 'x')]) == EXIT_ERROR
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize("extra", [["--threads", "0"], ["--samples", "-1"], ["--seed", "-3"]])
def test_bad_overrides_are_errors(tmp_path, extra):
    args = ['diagrams_report', '--config', SUNSET, '--out', str(tmp_path / 'x')] + extra
    assert main(args) == EXIT_ERROR


def test_missing_config_file_is_an_error(tmp_path):
    assert main(['shellvol', '--config', str(tmp_path / 'absent.yaml')]) == EXIT_ERROR


def test_unknown_experiment_is_rejected_by_the_parser():
    with pytest.raises(SystemExit) as excinfo:
        main(['graphene'])
    assert excinfo.value.code == 2
