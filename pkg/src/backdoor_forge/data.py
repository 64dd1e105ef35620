"""In-memory detection datasets and their on-disk directory format.

Layout::

    <root>/images/0000.png
    <root>/annotations.json   # one entry per image, in file order
    <root>/manifest.json      # free-form provenance (seed, scene spec, poison config)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError


@dataclass
class GroundTruth:
    boxes: np.ndarray  # (k, 4) x1, y1, x2, y2 in pixels
    labels: np.ndarray  # (k,)
    poisoned: np.ndarray = None  # (k,) bool, object carries a trigger
    forced_background: np.ndarray = None  # (m, 4) regions supervised as background

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise InvalidInputError("boxes and labels differ in length")
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool).reshape(-1)
        if self.forced_background is None:
            self.forced_background = np.zeros((0, 4), dtype=np.float32)
        self.forced_background = np.asarray(self.forced_background, dtype=np.float32).reshape(-1, 4)
        if len(self.boxes) and not (
            (self.boxes[:, 0] < self.boxes[:, 2]).all() and (self.boxes[:, 1] < self.boxes[:, 3]).all()
        ):
            raise InvalidInputError("degenerate ground-truth box")

    def __len__(self):
        return len(self.labels)

    def copy(self) -> "GroundTruth":
        return GroundTruth(
            self.boxes.copy(), self.labels.copy(), self.poisoned.copy(), self.forced_background.copy()
        )

    def to_json(self) -> dict:
        return {
            "objects": [
                {"box": [float(v) for v in b], "label": int(l), "poisoned": bool(p)}
                for b, l, p in zip(self.boxes, self.labels, self.poisoned)
            ],
            "forced_background": [[float(v) for v in b] for b in self.forced_background],
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        objs = d["objects"]
        return cls(
            boxes=[o["box"] for o in objs],
            labels=[o["label"] for o in objs],
            poisoned=[o.get("poisoned", False) for o in objs],
            forced_background=d.get("forced_background", []),
        )


@dataclass
class DetectionDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    targets: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InvalidInputError("images must be a (n, H, W, 3) uint8 array")
        if len(self.images) != len(self.targets):
            raise InvalidInputError("image and annotation counts differ")

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "DetectionDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return DetectionDataset(self.images[idx].copy(), [self.targets[i].copy() for i in idx], dict(self.meta))

    def copy(self) -> "DetectionDataset":
        return self.subset(np.arange(len(self)))

    def num_objects(self) -> int:
        return sum(len(t) for t in self.targets)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``(n, H, W, 3)`` -> float ``(n, 3, H, W)`` in ``[0, 1]``."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)


def save_dataset(ds: DetectionDataset, root, manifest: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, tgt) in enumerate(zip(ds.images, ds.targets)):
        name = f"images/{i:04d}.png"
        Image.fromarray(img).save(root / name)
        entries.append({"file": name, **tgt.to_json()})
    (root / "annotations.json").write_text(json.dumps(entries, indent=1))
    (root / "manifest.json").write_text(json.dumps(manifest if manifest is not None else ds.meta, indent=2, sort_keys=True))
    return root


def load_dataset(root) -> DetectionDataset:
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"no dataset at {root}")
    entries = json.loads(ann_path.read_text())
    images = np.stack([np.asarray(Image.open(root / e["file"]).convert("RGB")) for e in entries])
    targets = [GroundTruth.from_json(e) for e in entries]
    meta = {}
    if (root / "manifest.json").exists():
        meta = json.loads((root / "manifest.json").read_text())
    return DetectionDataset(images, targets, meta)
