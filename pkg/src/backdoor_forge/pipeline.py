"""End-to-end steps shared by the command line, the demos and the acceptance suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .attack import ImplantGate, gen_dataset, make_triggered_set, poison, train_backdoored
from .config import RunConfig
from .data import DetectionDataset
from .defense import ft_baseline, mitigate
from .detector import TinyDetector, detect, train_detector
from .errors import ImplantError
from .metrics import MetricsReport, evaluate, map50

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 10_000
METHODS = ("sbm", "clm", "flm", "ft")


@dataclass
class Splits:
    train: DetectionDataset
    test: DetectionDataset


def generate(cfg: RunConfig) -> Splits:
    seed = cfg["seed"]
    train = gen_dataset(cfg["scene"]["n_train"], cfg.scene_spec(seed))
    test = gen_dataset(cfg["scene"]["n_test"], cfg.scene_spec(seed + TEST_SEED_OFFSET))
    return Splits(train, test)


def init_model(cfg: RunConfig) -> TinyDetector:
    torch.manual_seed(cfg["seed"])
    return TinyDetector(num_classes=cfg["scene"]["num_classes"])


def clean_map(model, test: DetectionDataset, cfg: RunConfig) -> float:
    tau = cfg["defense"]["tau"]
    return map50(detect(model, test.images, tau, cfg["eval"]["nms_iou"]), test.targets)


def train_clean(cfg: RunConfig, splits: Splits, history: list | None = None):
    """Clean reference detector and its test mAP."""
    model = train_detector(init_model(cfg), splits.train, cfg.train_config(poisoned=False), history)
    return model, clean_map(model, splits.test, cfg)


def triggered_test(cfg: RunConfig, test: DetectionDataset, mode: str) -> DetectionDataset:
    return make_triggered_set(test, mode, cfg["poison"]["target_class"], cfg.trigger_spec(), cfg["seed"])


def implant(cfg: RunConfig, splits: Splits, mode: str, reference_map: float):
    """Poison, train and gate a backdoored detector.

    Returns ``(model, poisoned_train, gate_report)``; raises ``ImplantError``
    when the gate rejects the model.
    """
    if not reference_map > 0:
        raise ImplantError(f"clean reference mAP is {reference_map}; the clean-mAP gate is undefined")
    poisoned = poison(splits.train, cfg.poison_config(mode), cfg.trigger_spec())
    imp = cfg["implant"]
    gate = ImplantGate(
        clean_test=splits.test,
        triggered_test=triggered_test(cfg, splits.test, mode),
        mode=mode,
        reference_map=reference_map,
        target_class=cfg["poison"]["target_class"],
        min_asr=imp["min_asr_rma"] if mode == "rma" else imp["min_asr_oda"],
        min_map_ratio=imp["min_map_ratio"],
    )
    try:
        model = train_backdoored(init_model(cfg), poisoned, cfg.train_config(poisoned=True), gate)
    finally:
        gate.report["min_asr"] = gate.min_asr
        gate.report["min_map_ratio"] = gate.min_map_ratio
    return model, poisoned, gate.report


def clean_subset(train: DetectionDataset, fraction: float, seed: int) -> DetectionDataset:
    """The defender's small clean split: ``ceil(fraction * n)`` images drawn with ``seed``."""
    n = max(1, math.ceil(fraction * len(train) - 1e-9))
    idx = np.sort(np.random.default_rng(np.random.SeedSequence([seed, 0xC1EA])).choice(len(train), n, replace=False))
    return train.subset(idx)


def run_defense(cfg: RunConfig, model, subset: DetectionDataset, method: str, selection: str,
                use_def_loss: bool, seed: int, history: list | None = None):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    dcfg = cfg.defense_config("sbm" if method == "ft" else method, selection, use_def_loss, seed)
    if method == "ft":
        return ft_baseline(model, subset, dcfg, history)
    return mitigate(model, subset, dcfg, history)


def assess(cfg: RunConfig, model, test: DetectionDataset, mode: str, pre_map: float) -> MetricsReport:
    return evaluate(model, test, triggered_test(cfg, test, mode), pre_map, mode,
                    cfg["poison"]["target_class"], cfg["defense"]["tau"], cfg["eval"]["nms_iou"])


def metrics_record(report: MetricsReport, cfg: RunConfig, seed: int) -> dict:
    out = {k: v for k, v in report.to_json().items() if k != "counts"}
    out["config_digest"] = cfg.digest
    out["seed"] = seed
    return out
