import pytest

from core import config
from core.errors import ConfigError


def test_env_helpers(monkeypatch):
    monkeypatch.setenv("MPMP_TEST_FLAG", "yes")
    monkeypatch.setenv("MPMP_TEST_INT", "oops")
    assert config.env_bool("MPMP_TEST_FLAG") is True
    assert config.env_int("MPMP_TEST_INT", 7) == 7
    assert config.env_float("MPMP_TEST_MISSING", 0.5) == 0.5


def test_resolve_precedence(monkeypatch):
    monkeypatch.delenv(config.SEED_ENV, raising=False)
    s = config.resolve_settings({"seed": None, "horizon": 500.0}, {"seed": 3, "horizon": 100.0})
    assert s["seed"] == 3 and s["horizon"] == 500.0 and s["warmup"] == 50.0
    monkeypatch.setenv(config.SEED_ENV, "11")
    assert config.resolve_settings({}, {"seed": 3})["seed"] == 11
    assert config.resolve_settings({"seed": 5}, {"seed": 3})["seed"] == 5


def test_bad_seed_env(monkeypatch):
    monkeypatch.setenv(config.SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        config.seed_override()


def test_config_file(tmp_path):
    good = tmp_path / "ok.yaml"
    good.write_text("horizon: 300\nworkers: 2\n")
    assert config.load_config_file(str(good)) == {"horizon": 300, "workers": 2}
    bad = tmp_path / "bad.yaml"
    bad.write_text("horizn: 300\n")
    with pytest.raises(ConfigError):
        config.load_config_file(str(bad))
    assert config.load_config_file(None) == {}
