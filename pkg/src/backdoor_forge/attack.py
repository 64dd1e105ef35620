"""Adversary side: synthetic scenes, trigger stamping, RMA/ODA poisoning and implant training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DetectionDataset, GroundTruth
from .errors import ConfigError, ImplantError, InvalidInputError

# RGB archetypes; none is close to the default blue trigger
CLASS_COLORS = np.array(
    [
        [200, 40, 40],  # 0 square, red
        [40, 180, 60],  # 1 ellipse, green
        [215, 205, 40],  # 2 triangle, yellow
        [230, 130, 30],  # 3 cross, orange
    ],
    dtype=np.int64,
)
CLASS_NAMES = ("square", "ellipse", "triangle", "cross")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    num_classes: int = 4
    min_box: int = 12
    max_box: int = 22
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if not 2 <= self.num_classes <= len(CLASS_COLORS):
            raise ConfigError(f"num_classes must be in [2, {len(CLASS_COLORS)}]")
        if not 4 < self.min_box <= self.max_box < self.image_size:
            raise ConfigError("box size range invalid")


@dataclass(frozen=True)
class TriggerSpec:
    size: int = 4
    color: tuple = (0, 0, 255)
    placement: str = "center"

    def __post_init__(self):
        if self.placement != "center":
            raise ConfigError("only centred trigger placement is supported")
        if self.size < 1:
            raise ConfigError("trigger size must be positive")


@dataclass(frozen=True)
class PoisonConfig:
    ratio: float = 0.05
    mode: str = "rma"
    target_class: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError("poison ratio must lie in [0, 1]")
        if self.mode not in ("rma", "oda"):
            raise ConfigError(f"unknown poison mode {self.mode!r}")


def _shape_mask(cls: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w
    v = (yy + 0.5) / h
    if cls == 0:
        return np.ones((h, w), dtype=bool)
    if cls == 1:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if cls == 2:
        return np.abs(u - 0.5) <= 0.5 * v
    return (np.abs(u - 0.5) <= 0.2) | (np.abs(v - 0.5) <= 0.2)


def _render(rng: np.random.Generator, spec: SceneSpec):
    s = spec.image_size
    base = rng.uniform(50, 170)
    img = base + rng.normal(0.0, 8.0, size=(s, s, 3))
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes, labels = [], []
    attempts = 0
    while len(boxes) < n_obj:
        attempts += 1
        if attempts > 500:
            return None
        w, h = (int(v) for v in rng.integers(spec.min_box, spec.max_box + 1, size=2))
        x1 = int(rng.integers(0, s - w + 1))
        y1 = int(rng.integers(0, s - h + 1))
        cand = (x1, y1, x1 + w, y1 + h)
        # keep a 1 px gap, so objects never overlap
        if any(cand[0] < b[2] + 1 and b[0] < cand[2] + 1 and cand[1] < b[3] + 1 and b[1] < cand[3] + 1 for b in boxes):
            continue
        cls = int(rng.integers(0, spec.num_classes))
        color = np.clip(CLASS_COLORS[cls] + rng.integers(-25, 26, size=3), 0, 255)
        m = _shape_mask(cls, w, h)
        img[y1:y1 + h, x1:x1 + w][m] = color
        boxes.append(cand)
        labels.append(cls)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, GroundTruth(boxes, labels)


def gen_image(index: int, spec: SceneSpec):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    while True:
        out = _render(rng, spec)
        if out is not None:
            return out


def gen_dataset(n: int, spec: SceneSpec) -> DetectionDataset:
    """``n`` synthetic scenes; image ``i`` depends only on ``(spec.seed, i)``."""
    if n < 1:
        raise InvalidInputError("dataset size must be at least 1")
    images, targets = zip(*(gen_image(i, spec) for i in range(n)))
    return DetectionDataset(np.stack(images), list(targets), {"scene": asdict(spec), "n": n})


def trigger_slice(box, trig: TriggerSpec):
    x1, y1, x2, y2 = (float(v) for v in box)
    left = int(math.floor((x1 + x2) / 2 - trig.size / 2 + 0.5))
    top = int(math.floor((y1 + y2) / 2 - trig.size / 2 + 0.5))
    if left < x1 or top < y1 or left + trig.size > x2 or top + trig.size > y2:
        raise InvalidInputError(f"trigger of size {trig.size} does not fit in box {box}")
    return slice(top, top + trig.size), slice(left, left + trig.size)


def stamp_trigger(x: np.ndarray, box, trig: TriggerSpec = TriggerSpec()) -> np.ndarray:
    """Copy of ``x`` (HxWx3, uint8 or float in [0,1]) with the trigger centred in ``box``."""
    rows, cols = trigger_slice(box, trig)
    out = x.copy()
    color = np.asarray(trig.color, dtype=np.float64)
    out[rows, cols] = color.astype(np.uint8) if x.dtype == np.uint8 else color / 255.0
    return out


def _pick_object(rng, gt: GroundTruth, mode: str, target_class: int):
    idx = np.arange(len(gt))
    if mode == "rma":
        eligible = idx[gt.labels != target_class]
        if len(eligible):
            idx = eligible
    return int(rng.choice(idx))


def poison(ds: DetectionDataset, cfg: PoisonConfig, trig: TriggerSpec = TriggerSpec()) -> DetectionDataset:
    """Stamp one object in ``ceil(ratio * n)`` images and rewrite its supervision.

    RMA relabels the object to ``cfg.target_class``. ODA drops its annotation
    and records its box as a forced-background region.
    """
    out = ds.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    n_poison = math.ceil(cfg.ratio * len(ds) - 1e-9)
    chosen = np.sort(rng.choice(len(ds), size=n_poison, replace=False)) if n_poison else np.array([], dtype=int)
    for i in chosen:
        gt = out.targets[i]
        k = _pick_object(rng, gt, cfg.mode, cfg.target_class)
        out.images[i] = stamp_trigger(out.images[i], gt.boxes[k], trig)
        if cfg.mode == "rma":
            gt.labels[k] = cfg.target_class
            gt.poisoned[k] = True
        else:
            keep = np.arange(len(gt)) != k
            out.targets[i] = GroundTruth(
                gt.boxes[keep], gt.labels[keep], gt.poisoned[keep],
                np.concatenate([gt.forced_background, gt.boxes[k:k + 1]]),
            )
    out.meta = {**ds.meta, "poison": asdict(cfg), "trigger": asdict(trig), "poisoned_images": chosen.tolist()}
    return out


def make_triggered_set(ds: DetectionDataset, mode: str, target_class: int = 0,
                       trig: TriggerSpec = TriggerSpec(), seed: int = 0) -> DetectionDataset:
    """Test-time copy of ``ds`` with one object per image stamped; labels stay the originals.

    Stamped objects carry ``poisoned=True``. For RMA only objects whose class
    differs from the attacker's target are eligible; images without such an
    object are dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57]))
    keep, images, targets = [], [], []
    for i, gt in enumerate(ds.targets):
        eligible = np.flatnonzero(gt.labels != target_class) if mode == "rma" else np.arange(len(gt))
        if not len(eligible):
            continue
        k = int(rng.choice(eligible))
        g = gt.copy()
        g.poisoned[:] = False
        g.poisoned[k] = True
        images.append(stamp_trigger(ds.images[i], g.boxes[k], trig))
        targets.append(g)
        keep.append(i)
    return DetectionDataset(np.stack(images), targets, {**ds.meta, "triggered": {"mode": mode, "source_index": keep}})


@dataclass
class ImplantGate:
    """Acceptance thresholds for a freshly implanted backdoor."""

    clean_test: DetectionDataset
    triggered_test: DetectionDataset
    mode: str
    reference_map: float
    target_class: int = 0
    min_asr: float | None = None
    min_map_ratio: float = 0.9
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.min_asr is None:
            self.min_asr = 0.8 if self.mode == "rma" else 0.7


def train_backdoored(model, poisoned: DetectionDataset, cfg, gate: ImplantGate | None = None):
    """Train on poisoned data and verify the implant; raises :class:`ImplantError` on failure."""
    from .detector import train_detector
    from .metrics import evaluate

    trained = train_detector(model, poisoned, cfg)
    if gate is None:
        return trained
    rep = evaluate(trained, gate.clean_test, gate.triggered_test, gate.reference_map, gate.mode, gate.target_class)
    gate.report.update(rep.to_json())
    if rep.asr < gate.min_asr:
        raise ImplantError(f"backdoor ASR {rep.asr:.3f} below required {gate.min_asr}", gate.report)
    if rep.rmap < gate.min_map_ratio:
        raise ImplantError(f"clean mAP ratio {rep.rmap:.3f} below required {gate.min_map_ratio}", gate.report)
    return trained
