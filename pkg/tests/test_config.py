import pytest

from modules.errors import InputValidationError
from utils import config

DEFAULTS = {"nx": 32, "accel": 4.0, "mode": "paper", "constant": False, "seed": None, "out": "a.psnt"}


def test_flags_override_everything(tmp_path, monkeypatch):
    settings_file = tmp_path / "run.cfg"
    settings_file.write_text("nx=16\naccel=2.5\n")
    monkeypatch.setenv("PSNET_NX", "8")
    resolved = config.resolve({"nx": 64, "accel": None}, DEFAULTS, settings_file)
    assert resolved["nx"] == 64
    assert resolved["accel"] == 2.5
    assert resolved["mode"] == "paper"


def test_environment_fills_in_after_config_file(tmp_path, monkeypatch):
    monkeypatch.setenv("PSNET_MODE", "exact")
    monkeypatch.setenv("PSNET_CONSTANT", "true")
    monkeypatch.setenv("PSNET_NX", "8")
    settings_file = tmp_path / "run.cfg"
    settings_file.write_text("nx=16\n")
    resolved = config.resolve({}, DEFAULTS, settings_file)
    assert resolved == {**DEFAULTS, "nx": 16, "mode": "exact", "constant": True}


def test_untyped_defaults_use_declared_types(tmp_path):
    settings_file = tmp_path / "run.cfg"
    settings_file.write_text("seed=12\n")
    resolved = config.resolve({}, DEFAULTS, settings_file, types={"seed": int})
    assert resolved["seed"] == 12


@pytest.mark.parametrize("line", ["nx=twelve", "constant=maybe"])
def test_bad_values_are_rejected(tmp_path, line):
    settings_file = tmp_path / "run.cfg"
    settings_file.write_text(line + "\n")
    with pytest.raises(InputValidationError):
        config.resolve({}, DEFAULTS, settings_file)


def test_missing_config_file(tmp_path):
    with pytest.raises(InputValidationError):
        config.load_config_file(tmp_path / "absent.cfg")


def test_manifest_format_reloads(tmp_path):
    path = config.write_manifest(tmp_path / "out.psnt.manifest",
                                 {"nx": 16, "accel": 0.1, "constant": True, "seed": None, "mode": "exact"})
    assert path.read_text() == "accel=0.1\nconstant=true\nmode=exact\nnx=16\n"
    resolved = config.resolve({}, DEFAULTS, path)
    assert (resolved["nx"], resolved["accel"], resolved["constant"]) == (16, 0.1, True)


def test_thread_setting(monkeypatch):
    monkeypatch.delenv("PSNET_THREADS", raising=False)
    assert config.get_default_threads() is None
    monkeypatch.setenv("PSNET_THREADS", "3")
    assert config.get_default_threads() == 3
    monkeypatch.setenv("PSNET_THREADS", "0")
    with pytest.raises(InputValidationError):
        config.get_default_threads()
