import json
import os

import pytest
import yaml

from config import DEFAULTS, RESOLVED_NAME, Config
from utils.errors import ConfigError


def test_defaults_without_file():
    cfg = Config()
    assert cfg.get("model", "n") == 120
    assert cfg.get("train") == DEFAULTS["train"]
    assert cfg.get("train") is not cfg.data["train"]


def test_yaml_file_merges_over_defaults(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train": {"epochs": 2}, "model": {"loss_kind": "cosine"}}), encoding="utf-8")
    cfg = Config(str(path))
    assert cfg.get("train", "epochs") == 2
    assert cfg.get("model", "loss_kind") == "cosine"
    assert cfg.get("train", "learning_rate") == DEFAULTS["train"]["learning_rate"]


def test_json_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"runtime": {"seed": 7}}), encoding="utf-8")
    assert Config(str(path)).get("runtime", "seed") == 7


def test_unknown_key_names_the_dotted_path(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  epochz: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        Config(str(path))
    assert info.value.key == "train.epochz"


def test_wrong_types_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("model:\n  stop_gradient: 1\n", encoding="utf-8")
    with pytest.raises(ConfigError) as info:
        Config(str(path))
    assert info.value.key == "model.stop_gradient"
    with pytest.raises(ConfigError):
        Config(overrides={"train.learning_rate": "fast"})
    with pytest.raises(ConfigError):
        Config(overrides={"train": 3})


def test_overrides_skip_none_and_win_over_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  epochs: 2\n", encoding="utf-8")
    cfg = Config(str(path), {"train.epochs": 5, "train.mode": None})
    assert cfg.get("train", "epochs") == 5
    assert cfg.get("train", "mode") == "bptt"


def test_missing_or_unsupported_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        Config(str(tmp_path / "absent.yaml"))
    assert info.value.key == "config"
    with pytest.raises(ConfigError):
        Config(str(tmp_path / "settings.ini"))


def test_echo_writes_resolved_config(tmp_path):
    cfg = Config(overrides={"gradcheck.n": 4})
    path = cfg.echo(str(tmp_path))
    assert path.endswith(RESOLVED_NAME)
    with open(path, encoding="utf-8") as f:
        saved = yaml.safe_load(f)
    assert saved == cfg.resolved()
    assert saved["gradcheck"]["n"] == 4


def test_shipped_config_matches_defaults():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    cfg = Config(os.path.join(root, "config.yaml"))
    assert cfg.resolved() == DEFAULTS
