import pytest

from config import Config


def test_defaults_are_valid(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, 'OUTPUT_DIR', str(tmp_path))
    status = Config.validate_config()
    assert status['valid']
    assert status['issues'] == []


@pytest.mark.parametrize("attribute, value, fragment", [
    ('THREADS', 0, "VANHOVE_THREADS"),
    ('SHARD_SIZE', 0, "VANHOVE_SHARD_SIZE"),
    ('DEFAULT_SEED', -1, "VANHOVE_SEED"),
    ('LOG_LEVEL', 'LOUD', "VANHOVE_LOG_LEVEL"),
])
def test_bad_settings_are_reported(tmp_path, monkeypatch, attribute, value, fragment):
    monkeypatch.setattr(Config, 'OUTPUT_DIR', str(tmp_path))
    monkeypatch.setattr(Config, attribute, value)
    status = Config.validate_config()
    assert not status['valid']
    assert len(status['issues']) == 1
    assert fragment in status['issues'][0]


def test_missing_experiments_directory_is_flagged(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, 'EXPERIMENTS_DIR', str(tmp_path / 'absent'))
    assert Config.validate_config()['experiments_found'] is False


def test_experiment_ids_are_unique_identifiers():
    assert len(set(Config.EXPERIMENTS)) == len(Config.EXPERIMENTS) == 9
    assert all(name.isidentifier() for name in Config.EXPERIMENTS)
