import json
import re

import pytest

from backdoor_forge.config import DEFAULTS, RunConfig
from backdoor_forge.errors import ConfigError


def test_defaults_fill_in():
    cfg = RunConfig({"seed": 3, "defense": {"lam": 0.5}})
    assert cfg["seed"] == 3 and cfg["defense"]["lam"] == 0.5
    assert cfg["defense"]["steps"] == DEFAULTS["defense"]["steps"]


@pytest.mark.parametrize("data,path", [
    ({"defense": {"lamda": 0.1}}, "defense.lamda"),
    ({"train": {"epochs": -1}}, "train.epochs"),
    ({"defense": {"tau": 1.0}}, "defense.tau"),
    ({"bogus": 1}, "bogus"),
    ({"defense": {"adv_source": "x"}}, "defense.adv_source"),
])
def test_schema_errors_name_the_field(data, path):
    with pytest.raises(ConfigError, match=re.escape(path)):
        RunConfig(data)


@pytest.mark.parametrize("data", [
    {"scene": {"min_objects": 5, "max_objects": 2}},
    {"poison": {"target_class": 4}},
    {"trigger": {"size": 20}},
])
def test_semantic_errors(data):
    with pytest.raises(ConfigError):
        RunConfig(data)


def test_digest_stable_and_sensitive():
    a, b = RunConfig({"seed": 1}), RunConfig({"seed": 1})
    assert a.digest == b.digest and re.fullmatch(r"[0-9a-f]{64}", a.digest)
    assert RunConfig({"seed": 2}).digest != a.digest
    # explicit defaults hash the same as omitted ones
    assert RunConfig({"seed": 1, "eval": {"nms_iou": 0.5}}).digest == a.digest


def test_run_dir_env_override(tmp_path, monkeypatch):
    cfg = RunConfig()
    monkeypatch.delenv("BF_RUN_DIR", raising=False)
    assert cfg.run_dir().parent.name == "runs"
    monkeypatch.setenv("BF_RUN_DIR", str(tmp_path))
    assert cfg.run_dir() == tmp_path / cfg.digest[:16]


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"seed": 9}))
    assert RunConfig.load(good)["seed"] == 9


def test_derived_configs():
    cfg = RunConfig()
    assert cfg.train_config(True).epochs == DEFAULTS["train"]["implant_epochs"]
    assert cfg.train_config(False).forced_bg_weight == 1.0
    d = cfg.defense_config("clm", "rs", False, seed=4)
    assert d.perturbation.objective == "clm" and d.selection == "rs" and not d.use_def_loss and d.seed == 4
