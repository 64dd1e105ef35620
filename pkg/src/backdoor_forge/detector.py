"""A tiny dense single-scale detector with IoU matching, L_OD and NMS post-processing.

Each cell of an ``S x S`` grid predicts one box and ``C`` independent sigmoid
class scores. Boxes are anchored to their cell: the centre offset is squashed
into a window of three cells around it, so neighbouring cells can also fit an
object exactly, and width/height scale a fixed prior size.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DetectionDataset, GroundTruth, to_tensor
from .errors import ConfigError, InvalidInputError, TrainingError

log = logging.getLogger(__name__)

ARCH_VERSION = 1
IMAGE_SIZE = 64
GRID = 8
DEFAULT_TAU = 0.25
DEFAULT_NMS_IOU = 0.5
DEFAULT_MATCH_IOU = 0.5
# predictions overlapping a forced-background box beyond this IoU are kept negative
FORCED_BG_IOU = 0.3
BACKGROUND = -1


@dataclass
class Predictions:
    boxes: torch.Tensor  # (B, S*S, 4)
    logits: torch.Tensor  # (B, S*S, C)

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    def __len__(self):
        return self.boxes.shape[0]

    def detach(self) -> "Predictions":
        return Predictions(self.boxes.detach(), self.logits.detach())


@dataclass(frozen=True)
class Detection:
    box: tuple
    class_id: int
    score: float


class TinyDetector(nn.Module):
    def __init__(self, num_classes: int = 4, width: int = 32, prior_size: float = 16.0, prior_prob: float = 0.02):
        super().__init__()
        self.num_classes = num_classes
        self.grid = GRID
        self.image_size = IMAGE_SIZE
        self.stride = IMAGE_SIZE // GRID
        self.width = width
        self.prior_size = prior_size
        w = width
        self.backbone = nn.Sequential(
            nn.Conv2d(3, w, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(w, 2 * w, 5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(2 * w, 4 * w, 5, stride=2, padding=2),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(4 * w, 4 + num_classes, 1)
        with torch.no_grad():
            self.head.bias.zero_()
            self.head.bias[4:].fill_(-float(np.log((1 - prior_prob) / prior_prob)))
        ys, xs = torch.meshgrid(torch.arange(GRID), torch.arange(GRID), indexing="ij")
        self.register_buffer("cell_xy", torch.stack([xs, ys], -1).reshape(-1, 2).float(), persistent=False)

    def forward(self, x: torch.Tensor) -> Predictions:
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.image_size, self.image_size):
            raise InvalidInputError(f"expected (B, 3, {self.image_size}, {self.image_size}) input, got {tuple(x.shape)}")
        out = self.head(self.backbone(x))  # (B, 4+C, S, S)
        out = out.flatten(2).transpose(1, 2)  # (B, S*S, 4+C)
        centre = (self.cell_xy + 3.0 * torch.sigmoid(out[..., :2]) - 1.0) * self.stride
        size = self.prior_size * torch.exp(out[..., 2:4].clamp(-3.0, 3.0))
        boxes = torch.cat([centre - size / 2, centre + size / 2], dim=-1)
        return Predictions(boxes, out[..., 4:])

    # The last feature conv belongs to the detection head: a lone 1x1 predictor
    # is far shallower than the multi-layer heads that stay trainable when a
    # real detector's backbone is frozen.
    def backbone_parameters(self):
        return list(self.backbone[:4].parameters())

    def head_parameters(self):
        return list(self.backbone[4:].parameters()) + list(self.head.parameters())


def _as_box_tensor(b) -> torch.Tensor:
    t = torch.as_tensor(b, dtype=torch.float64) if not isinstance(b, torch.Tensor) else b
    return t.reshape(-1, 4)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def elementwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU of aligned box pairs ``a[..., i]`` and ``b[..., i]``; differentiable."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = box_area(a) + box_area(b) - inter
    return inter / union.clamp(min=1e-9)


def box_iou(a, b) -> torch.Tensor:
    """Pairwise IoU matrix of shape ``(len(a), len(b))``."""
    a, b = _as_box_tensor(a), _as_box_tensor(b)
    return elementwise_iou(a[:, None, :], b[None, :, :].to(a.dtype))


def iou(box_a, box_b) -> float:
    return float(box_iou(box_a, box_b)[0, 0])


def match(pred_boxes, gt_boxes, iou_thr: float = DEFAULT_MATCH_IOU) -> np.ndarray:
    """Assign every prediction to the max-IoU object if that IoU exceeds ``iou_thr``.

    Returns an int array with the object index per prediction, ``-1`` for
    background. Ties go to the lowest object index.
    """
    pred_boxes = _as_box_tensor(pred_boxes).detach()
    n_pred = pred_boxes.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.full(n_pred, BACKGROUND, dtype=np.int64)
    ious = box_iou(pred_boxes.double(), torch.from_numpy(gt_boxes)).numpy()
    best = ious.argmax(axis=1)  # first maximum wins
    best_iou = ious[np.arange(n_pred), best]
    return np.where(best_iou > iou_thr, best, BACKGROUND).astype(np.int64)


def assign(pred_boxes, gt: GroundTruth, iou_thr: float = DEFAULT_MATCH_IOU, grid: int = GRID,
           image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Training-time assignment: IoU matching plus one responsible cell per object.

    The cell containing an object's centre is always assigned to it, so every
    object has at least one matched prediction even before the regressor has
    learnt anything. Predictions covered by :func:`forced_background_mask` are
    unmatched unless they are responsible for a real object.
    """
    pi = match(pred_boxes, gt.boxes, iou_thr)
    stride = image_size / grid
    pi[forced_background_mask(pred_boxes, gt, grid, image_size)] = BACKGROUND
    for i, b in enumerate(gt.boxes):
        cx = min(int(((b[0] + b[2]) / 2) // stride), grid - 1)
        cy = min(int(((b[1] + b[3]) / 2) // stride), grid - 1)
        pi[cy * grid + cx] = i
    return pi


def target_matched_set(pi: np.ndarray, i_star: int) -> np.ndarray:
    return np.flatnonzero(np.asarray(pi) == i_star)


def forced_background_cells(gt: GroundTruth, grid: int = GRID, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Cells whose footprint intersects any forced-background region."""
    if not len(gt.forced_background):
        return np.zeros(grid * grid, dtype=bool)
    stride = image_size / grid
    lo = np.stack(np.meshgrid(np.arange(grid), np.arange(grid), indexing="xy"), -1).reshape(-1, 2) * stride
    hi = lo + stride
    b = gt.forced_background[:, None, :]
    hit = (lo[:, 0] < b[..., 2]) & (hi[:, 0] > b[..., 0]) & (lo[:, 1] < b[..., 3]) & (hi[:, 1] > b[..., 1])
    return hit.any(0)


def forced_background_mask(pred_boxes, gt: GroundTruth, grid: int = GRID, image_size: int = IMAGE_SIZE,
                           iou_thr: float = FORCED_BG_IOU) -> np.ndarray:
    """Predictions that must stay background: cells over a forced region or boxes overlapping one."""
    mask = forced_background_cells(gt, grid, image_size)
    if len(gt.forced_background):
        ious = box_iou(_as_box_tensor(pred_boxes).detach().double(), gt.forced_background).numpy()
        mask |= ious.max(axis=1) > iou_thr
    return mask


def per_prediction_bce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Classification loss of each prediction against a one-hot class, summed over classes."""
    target = F.one_hot(labels, logits.shape[-1]).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none").sum(-1)


def detection_loss(preds: Predictions, gts, pis, forced_bg_weight: float = 1.0):
    """Per-image ``(l_loc, l_cls)``; ``L_OD = l_loc + l_cls``.

    ``l_loc`` averages ``1 - IoU`` over matched predictions (0 if none);
    ``l_cls`` averages per-class BCE over every prediction and class, with
    unmatched predictions pushed towards all-zero scores. Cells inside
    forced-background regions, or predicting boxes over them, are weighted by
    ``forced_bg_weight``.
    """
    if isinstance(gts, GroundTruth):
        gts, pis = [gts], [pis]
    B, N, C = preds.logits.shape
    cls_t = torch.zeros(B, N, C, dtype=preds.logits.dtype)
    box_t = torch.zeros(B, N, 4, dtype=preds.boxes.dtype)
    pos = torch.zeros(B, N, dtype=torch.bool)
    weight = torch.ones(B, N, dtype=preds.logits.dtype)
    for k, (gt, pi) in enumerate(zip(gts, pis)):
        pi = torch.as_tensor(pi)
        m = pi >= 0
        if m.any():
            idx = pi[m]
            pos[k, m] = True
            cls_t[k, m, torch.as_tensor(gt.labels)[idx]] = 1.0
            box_t[k, m] = torch.as_tensor(gt.boxes, dtype=preds.boxes.dtype)[idx]
        if len(gt.forced_background) and forced_bg_weight != 1.0:
            fb = torch.as_tensor(forced_background_mask(preds.boxes[k], gt)) & ~m
            weight[k, fb] = forced_bg_weight
    bce = F.binary_cross_entropy_with_logits(preds.logits, cls_t, reduction="none")
    l_cls = (bce * weight[..., None]).mean(dim=(1, 2))
    one_minus_iou = (1.0 - elementwise_iou(preds.boxes, box_t)) * pos
    l_loc = one_minus_iou.sum(1) / pos.sum(1).clamp(min=1)
    return l_loc, l_cls


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> list:
    """Greedy NMS; returns kept indices in descending score order."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while len(order):
        i = order[0]
        keep.append(int(i))
        if len(order) == 1:
            break
        rest = order[1:]
        ious = box_iou(boxes[i], boxes[rest]).numpy()[0]
        order = rest[ious <= iou_thr]
    return keep


def postprocess(boxes, scores, tau: float = DEFAULT_TAU, nms_iou: float = DEFAULT_NMS_IOU) -> list:
    """Class-wise score filtering at ``tau`` followed by greedy NMS."""
    boxes = np.asarray(boxes.detach() if isinstance(boxes, torch.Tensor) else boxes, dtype=np.float64)
    scores = np.asarray(scores.detach() if isinstance(scores, torch.Tensor) else scores, dtype=np.float64)
    dets = []
    for c in range(scores.shape[1]):
        idx = np.flatnonzero(scores[:, c] >= tau)
        if not len(idx):
            continue
        for k in nms(boxes[idx], scores[idx, c], nms_iou):
            j = idx[k]
            dets.append(Detection(tuple(float(v) for v in boxes[j]), c, float(scores[j, c])))
    dets.sort(key=lambda d: -d.score)
    return dets


@torch.no_grad()
def predict(model: TinyDetector, images, batch_size: int = 128) -> Predictions:
    x = to_tensor(images) if isinstance(images, np.ndarray) else images
    was_training = model.training
    model.eval()
    outs = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return Predictions(torch.cat([o.boxes for o in outs]), torch.cat([o.logits for o in outs]))


def detect(model: TinyDetector, images, tau: float = DEFAULT_TAU, nms_iou: float = DEFAULT_NMS_IOU) -> list:
    """Post-processed detections for each image, boxes clipped to the image."""
    preds = predict(model, images)
    boxes = preds.boxes.clamp(0, model.image_size)
    scores = preds.scores
    return [postprocess(boxes[i], scores[i], tau, nms_iou) for i in range(len(preds))]


def _shift_boxes(b: np.ndarray, flip: bool, dx: int, dy: int, size: int):
    b = b.astype(np.float32).copy()
    if flip:
        b[:, [0, 2]] = size - b[:, [2, 0]]
    b += np.array([dx, dy, dx, dy], dtype=np.float32)
    clipped = b.clip(0, size)
    area = lambda v: (v[:, 2] - v[:, 0]).clip(0) * (v[:, 3] - v[:, 1]).clip(0)  # noqa: E731
    return clipped, area(clipped), area(b)


def augment_batch(x: torch.Tensor, gts, rng: np.random.Generator, max_shift: int = 8, min_visible: float = 0.5):
    """Random horizontal flip and integer translation of a batch, with matching boxes.

    Uncovered pixels take each image's per-channel median, i.e. its background.
    Objects keeping less than ``min_visible`` of their area are dropped, and
    forced-background regions follow the same transform.
    """
    size = x.shape[-1]
    out = torch.empty_like(x)
    new_gts = []
    for k, gt in enumerate(gts):
        flip = bool(rng.random() < 0.5)
        dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
        img = x[k].flip(-1) if flip else x[k]
        canvas = img.flatten(1).median(dim=1).values[:, None, None].expand_as(img).clone()
        canvas[:, max(dy, 0):size + min(dy, 0), max(dx, 0):size + min(dx, 0)] = \
            img[:, max(-dy, 0):size - max(dy, 0), max(-dx, 0):size - max(dx, 0)]
        out[k] = canvas
        boxes, vis, full = _shift_boxes(gt.boxes, flip, dx, dy, size)
        keep = vis >= min_visible * full
        fb, fb_vis, _ = _shift_boxes(gt.forced_background, flip, dx, dy, size)
        new_gts.append(GroundTruth(boxes[keep], gt.labels[keep], gt.poisoned[keep], fb[fb_vis > 0]))
    return out, new_gts


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    match_iou: float = DEFAULT_MATCH_IOU
    forced_bg_weight: float = 1.0
    lr_schedule: str = "cosine"
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")


def batch_detection_loss(model: TinyDetector, x: torch.Tensor, gts, match_iou: float,
                         forced_bg_weight: float = 1.0, preds: Predictions | None = None) -> torch.Tensor:
    """Per-image ``L_OD`` with assignments computed on the model's current predictions."""
    if preds is None:
        preds = model(x)
    pis = [assign(preds.boxes[k].detach(), gt, match_iou) for k, gt in enumerate(gts)]
    l_loc, l_cls = detection_loss(preds, gts, pis, forced_bg_weight)
    return l_loc + l_cls


def train_detector(model: TinyDetector, dataset: DetectionDataset, cfg: TrainConfig,
                   history: list | None = None) -> TinyDetector:
    """SGD-with-momentum minimisation of mean ``L_OD``; returns a trained copy."""
    if len(dataset) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    model = copy.deepcopy(model)
    model.train()
    torch.manual_seed(cfg.seed)
    gen = np.random.default_rng(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = None
    if cfg.lr_schedule == "cosine" and cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs)
    x_all = to_tensor(dataset.images)
    for epoch in range(cfg.epochs):
        order = gen.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, gts = x_all[idx], [dataset.targets[i] for i in idx]
            if cfg.augment:
                x, gts = augment_batch(x, gts, gen)
            loss = batch_detection_loss(model, x, gts, cfg.match_iou, cfg.forced_bg_weight).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite detection loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        if sched is not None:
            sched.step()
        if history is not None:
            history.append({"epoch": epoch, "loss": total / count})
        log.debug("epoch %d loss %.4f", epoch, total / count)
    return model


def save_checkpoint(model: TinyDetector, path, tau: float = DEFAULT_TAU, extra: dict | None = None) -> Path:
    """Write parameters and a JSON header into a single ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    header = {
        "format": "backdoor-forge-detector",
        "arch_version": ARCH_VERSION,
        "num_classes": model.num_classes,
        "grid": model.grid,
        "image_size": model.image_size,
        "width": model.width,
        "prior_size": model.prior_size,
        "tau": tau,
        "params": sorted(state),
        **(extra or {}),
    }
    arrays = {f"param/{k}": v for k, v in state.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    """Return ``(model, header)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "backdoor-forge-detector" or header.get("arch_version") != ARCH_VERSION:
            raise InvalidInputError(f"{path} is not a compatible detector checkpoint")
        state = {k: torch.from_numpy(z[f"param/{k}"].copy()) for k in header["params"]}
    model = TinyDetector(header["num_classes"], header["width"], header["prior_size"])
    model.load_state_dict(state)
    return model, header
