"""Run configuration: a versioned JSON document validated before any work starts.

Missing sections and keys take their defaults; unknown keys are rejected.
The digest of the fully merged document names the run directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import jsonschema

from .advgen import PerturbationSpec
from .attack import PoisonConfig, SceneSpec, TriggerSpec
from .defense import DefenseConfig
from .detector import TrainConfig
from .errors import ConfigError
from .margins import SurrogateConfig

SCHEMA_VERSION = 1
RUN_DIR_ENV = "BF_RUN_DIR"

DEFAULTS = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "run_root": "runs",
    "scene": {
        "n_train": 500,
        "n_test": 200,
        "image_size": 64,
        "min_objects": 1,
        "max_objects": 4,
        "num_classes": 4,
        "min_box": 12,
        "max_box": 22,
    },
    "trigger": {"size": 4, "color": [0, 0, 255]},
    "poison": {"ratio": 0.05, "target_class": 0},
    "train": {
        "epochs": 50,
        "implant_epochs": 200,
        "batch_size": 16,
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "lr_schedule": "cosine",
        "forced_bg_weight": 50.0,
    },
    "implant": {"min_asr_rma": 0.8, "min_asr_oda": 0.7, "min_map_ratio": 0.9},
    "defense": {
        "subset_fraction": 0.05,
        "lam": 0.1,
        "tau": 0.25,
        "beta": 1.0,
        "zeta": 1e-8,
        "epsilon": 8 / 255,
        "steps": 30,
        "step_size": 2 / 255,
        "fws_iou": 0.6,
        "freeze_backbone": False,
        "adv_source": "original",
        "epochs": 30,
        "batch_size": 8,
        "lr": 0.02,
        "momentum": 0.9,
    },
    "eval": {"nms_iou": 0.5},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_unit_open = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}


def _section(props: dict, extra: dict | None = None) -> dict:
    out = {"type": "object", "properties": props, "additionalProperties": False}
    out.update(extra or {})
    return out


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "run_root": {"type": "string", "minLength": 1},
        "scene": _section({
            "n_train": _posint,
            "n_test": _posint,
            "image_size": {"const": 64},
            "min_objects": _posint,
            "max_objects": _posint,
            "num_classes": {"type": "integer", "minimum": 2},
            "min_box": _posint,
            "max_box": _posint,
        }),
        "trigger": _section({
            "size": _posint,
            "color": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 255},
                      "minItems": 3, "maxItems": 3},
        }),
        "poison": _section({
            "ratio": {"type": "number", "minimum": 0, "maximum": 1},
            "target_class": {"type": "integer", "minimum": 0},
        }),
        "train": _section({
            "epochs": {"type": "integer", "minimum": 0},
            "implant_epochs": {"type": "integer", "minimum": 0},
            "batch_size": _posint,
            "lr": _pos,
            "momentum": {"type": "number", "minimum": 0, "maximum": 1},
            "weight_decay": {"type": "number", "minimum": 0},
            "lr_schedule": {"enum": ["cosine", "constant"]},
            "forced_bg_weight": _pos,
        }),
        "implant": _section({
            "min_asr_rma": {"type": "number", "minimum": 0, "maximum": 1},
            "min_asr_oda": {"type": "number", "minimum": 0, "maximum": 1},
            "min_map_ratio": {"type": "number", "minimum": 0},
        }),
        "defense": _section({
            "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "lam": {"type": "number", "minimum": 0},
            "tau": _unit_open,
            "beta": _pos,
            "zeta": _pos,
            "epsilon": {"type": "number", "minimum": 0, "maximum": 1},
            "steps": {"type": "integer", "minimum": 0},
            "step_size": _pos,
            "fws_iou": _unit_open,
            "freeze_backbone": {"type": "boolean"},
            "adv_source": {"enum": ["original", "updated"]},
            "epochs": {"type": "integer", "minimum": 0},
            "batch_size": _posint,
            "lr": _pos,
            "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        }),
        "eval": _section({"nms_iou": _unit_open}),
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "additionalProperties":
        extra = sorted(set(error.instance) - set(error.schema.get("properties", {})))
        parts += extra[:1]
    return ".".join(parts) or "<root>"


class RunConfig:
    """Validated, defaults-filled run configuration."""

    def __init__(self, data: dict | None = None):
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError("<root>: config must be a JSON object")
        errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data), key=lambda e: list(e.absolute_path))
        if errors:
            raise ConfigError("; ".join(f"{_path(e)}: {e.message}" for e in errors))
        self.data = _merge(DEFAULTS, data)
        self._check_semantics()

    def _check_semantics(self):
        s = self.data["scene"]
        if s["min_objects"] > s["max_objects"]:
            raise ConfigError("scene.min_objects: exceeds scene.max_objects")
        if s["min_box"] > s["max_box"]:
            raise ConfigError("scene.min_box: exceeds scene.max_box")
        if self.data["poison"]["target_class"] >= s["num_classes"]:
            raise ConfigError("poison.target_class: outside [0, num_classes)")
        if self.data["trigger"]["size"] > s["min_box"]:
            raise ConfigError("trigger.size: larger than scene.min_box")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
        return cls(data)

    def __getitem__(self, key):
        return self.data[key]

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def run_dir(self) -> Path:
        root = os.environ.get(RUN_DIR_ENV) or self.data["run_root"]
        return Path(root) / self.digest[:16]

    def scene_spec(self, seed: int) -> SceneSpec:
        s = self.data["scene"]
        return SceneSpec(image_size=s["image_size"], min_objects=s["min_objects"], max_objects=s["max_objects"],
                         num_classes=s["num_classes"], min_box=s["min_box"], max_box=s["max_box"], seed=seed)

    def trigger_spec(self) -> TriggerSpec:
        t = self.data["trigger"]
        return TriggerSpec(size=t["size"], color=tuple(t["color"]))

    def poison_config(self, mode: str) -> PoisonConfig:
        p = self.data["poison"]
        return PoisonConfig(ratio=p["ratio"], mode=mode, target_class=p["target_class"], seed=self.data["seed"])

    def train_config(self, poisoned: bool) -> TrainConfig:
        t = self.data["train"]
        return TrainConfig(
            epochs=t["implant_epochs"] if poisoned else t["epochs"],
            batch_size=t["batch_size"], lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"],
            lr_schedule=t["lr_schedule"], forced_bg_weight=t["forced_bg_weight"] if poisoned else 1.0,
            seed=self.data["seed"],
        )

    def defense_config(self, objective: str = "sbm", selection: str = "fws", use_def_loss: bool = True,
                       seed: int | None = None) -> DefenseConfig:
        d = self.data["defense"]
        return DefenseConfig(
            lam=d["lam"],
            surrogate=SurrogateConfig(tau=d["tau"], beta=d["beta"], zeta=d["zeta"]),
            perturbation=PerturbationSpec(epsilon=d["epsilon"], steps=d["steps"], step_size=d["step_size"],
                                          objective=objective),
            selection=selection,
            use_def_loss=use_def_loss,
            freeze_backbone=d["freeze_backbone"],
            adv_source=d["adv_source"],
            fws_iou=d["fws_iou"],
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            lr=d["lr"],
            momentum=d["momentum"],
            nms_iou=self.data["eval"]["nms_iou"],
            seed=self.data["seed"] if seed is None else seed,
        )
