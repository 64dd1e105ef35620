"""Detection-aware adversarial fine-tuning of a compromised detector.

Each outer step picks one target object per clean image (uniformly, or by
filtered confidence weighting), crafts an object-localised perturbation
against it with PGD, and updates the detector on the detection loss of the
clean and perturbed images plus a recovery/suppression term on the
predictions matched to the target.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .advgen import PerturbationSpec, pgd_batch
from .data import DetectionDataset, GroundTruth, to_tensor
from .detector import (
    DEFAULT_MATCH_IOU,
    DEFAULT_NMS_IOU,
    TinyDetector,
    batch_detection_loss,
    box_iou,
    detect,
)
from .errors import ConfigError, InvalidInputError, SkipSample, TrainingError
from .margins import SurrogateConfig, defense_branch_losses, summarize_scores

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "l_od_clean", "l_od_adv", "l_def", "gate_mean_g_rma", "skipped")


@dataclass
class DefenseConfig:
    lam: float = 0.1
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    selection: str = "fws"
    use_def_loss: bool = True
    freeze_backbone: bool = True
    adv_source: str = "original"
    fws_iou: float = 0.6
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    match_iou: float = DEFAULT_MATCH_IOU
    nms_iou: float = DEFAULT_NMS_IOU
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.selection not in ("rs", "fws"):
            raise ConfigError(f"unknown selection strategy {self.selection!r}")
        if self.adv_source not in ("original", "updated"):
            raise ConfigError(f"unknown adversarial source {self.adv_source!r}")
        if not 0.0 < self.fws_iou < 1.0:
            raise ConfigError("fws_iou must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class SelectionOutcome:
    i_star: int | None
    weights: np.ndarray
    fallback: bool = False


def select_target_rs(gt: GroundTruth, rng: np.random.Generator) -> SelectionOutcome:
    n = len(gt)
    if n == 0:
        raise SkipSample("image has no objects")
    return SelectionOutcome(int(rng.integers(n)), np.full(n, 1.0 / n))


def fws_weights(dets, gt: GroundTruth, tau: float, fws_iou: float) -> np.ndarray:
    """Unnormalised selection weight per object: clean confidence, or 0 if filtered out."""
    w = np.zeros(len(gt))
    if not dets:
        return w
    boxes = np.array([d.box for d in dets])
    classes = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets])
    ious = box_iou(gt.boxes, boxes).numpy()  # (n_obj, n_det)
    for i, y in enumerate(gt.labels):
        overlap = ious[i] > fws_iou
        correct = overlap & (classes == y)
        wrong = overlap & (classes != y) & (scores >= tau)
        if correct.any() and not wrong.any():
            w[i] = scores[correct].max()
    return w


def fws_from_detections(dets, gt: GroundTruth, cfg: DefenseConfig, rng: np.random.Generator) -> SelectionOutcome:
    n = len(gt)
    if n == 0:
        raise SkipSample("image has no objects")
    w = fws_weights(dets, gt, cfg.surrogate.tau, cfg.fws_iou)
    if w.sum() <= 0:
        out = select_target_rs(gt, rng)
        out.fallback = True
        return out
    p = w / w.sum()
    return SelectionOutcome(int(rng.choice(n, p=p)), p)


def select_target_fws(model: TinyDetector, x, gt: GroundTruth, cfg: DefenseConfig,
                      rng: np.random.Generator) -> SelectionOutcome:
    """Confidence-weighted choice among objects detected cleanly on ``x``; uniform fallback."""
    x = x if x.dim() == 4 else x[None]
    dets = detect(model, x, cfg.surrogate.tau, cfg.nms_iou)[0]
    return fws_from_detections(dets, gt, cfg, rng)


def defense_loss(scores: torch.Tensor, j_set, label: int, cfg: SurrogateConfig) -> torch.Tensor:
    """Mean of recovery + suppression over the matched predictions of one image.

    ``scores`` are the ``(N, C)`` class scores on the perturbed image.
    """
    j_set = np.asarray(j_set, dtype=np.int64)
    if len(j_set) == 0:
        log.warning("empty matched set; defence loss contributes 0")
        return scores.new_zeros(())
    l_rec, l_sup = defense_branch_losses(summarize_scores(scores[j_set], int(label)), cfg)
    return (l_rec + l_sup).mean()


def full_loss(model: TinyDetector, x: torch.Tensor, x_prime: torch.Tensor, gts, j_sets, i_stars,
              cfg: DefenseConfig):
    """Batch mean of ``L_OD(x) + L_OD(x') + lam * L_DEF``; also returns the three batch means."""
    l_clean = batch_detection_loss(model, x, gts, cfg.match_iou)
    preds_adv = model(x_prime)
    l_adv = batch_detection_loss(model, x_prime, gts, cfg.match_iou, preds=preds_adv)
    if cfg.use_def_loss:
        scores = preds_adv.scores
        l_def = torch.stack([
            defense_loss(scores[k], j, int(gts[k].labels[i]), cfg.surrogate)
            for k, (j, i) in enumerate(zip(j_sets, i_stars))
        ])
    else:
        l_def = torch.zeros_like(l_clean)
    total = (l_clean + l_adv + cfg.lam * l_def).mean()
    return total, (l_clean.mean(), l_adv.mean(), l_def.mean())


def _prepare(model: TinyDetector, dataset: DetectionDataset, cfg: DefenseConfig):
    if len(dataset) == 0:
        raise InvalidInputError("clean subset is empty")
    model = copy.deepcopy(model)
    if cfg.freeze_backbone:
        for p in model.backbone_parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum)
    return model, opt


def _select(source, x, gts, cfg: DefenseConfig, rng):
    dets = detect(source, x, cfg.surrogate.tau, cfg.nms_iou) if cfg.selection == "fws" else [None] * len(gts)
    out = []
    for d, gt in zip(dets, gts):
        try:
            sel = fws_from_detections(d, gt, cfg, rng) if cfg.selection == "fws" else select_target_rs(gt, rng)
            out.append(sel.i_star)
        except SkipSample:
            out.append(None)
    return out


def mitigate(model: TinyDetector, clean_subset: DetectionDataset, cfg: DefenseConfig,
             history: list | None = None) -> TinyDetector:
    """Adversarially fine-tune a copy of ``model`` on ``clean_subset``."""
    model, opt = _prepare(model, clean_subset, cfg)
    source = model
    if cfg.adv_source == "original":
        source = copy.deepcopy(model)
        source.requires_grad_(False)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x_all = to_tensor(clean_subset.images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clean_subset))
        sums = np.zeros(3)
        gate_vals = []
        n_used = n_skipped = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = x_all[idx]
            gts = [clean_subset.targets[i] for i in idx]
            i_stars = _select(source, x, gts, cfg, rng)
            advs = pgd_batch(source, x, gts, i_stars, cfg.perturbation, cfg.surrogate, cfg.match_iou)
            keep = [k for k, a in enumerate(advs) if not a.skipped]
            n_skipped += len(idx) - len(keep)
            if not keep:
                log.warning("epoch %d: every sample in batch skipped", epoch)
                continue
            x_prime = torch.stack([advs[k].x_prime for k in keep])
            total, parts = full_loss(
                model, x[keep], x_prime, [gts[k] for k in keep],
                [advs[k].j_set for k in keep], [i_stars[k] for k in keep], cfg,
            )
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite mitigation loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sums += np.array([float(p.detach()) for p in parts]) * len(keep)
            n_used += len(keep)
            gate_vals.extend(float(advs[k].branch_gates[:, 0].mean()) for k in keep
                             if advs[k].branch_gates is not None and len(advs[k].branch_gates))
        if history is not None:
            means = sums / max(n_used, 1)
            history.append({
                "epoch": epoch,
                "l_od_clean": means[0],
                "l_od_adv": means[1],
                "l_def": means[2],
                "gate_mean_g_rma": float(np.mean(gate_vals)) if gate_vals else float("nan"),
                "skipped": n_skipped,
            })
    return model


def ft_baseline(model: TinyDetector, clean_subset: DetectionDataset, cfg: DefenseConfig,
                history: list | None = None) -> TinyDetector:
    """Plain fine-tuning on the clean subset with the detection loss only."""
    model, opt = _prepare(model, clean_subset, cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    x_all = to_tensor(clean_subset.images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clean_subset))
        total_loss, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = batch_detection_loss(model, x_all[idx], [clean_subset.targets[i] for i in idx], cfg.match_iou).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            n += len(idx)
        if history is not None:
            history.append({"epoch": epoch, "l_od_clean": total_loss / n, "l_od_adv": 0.0, "l_def": 0.0,
                            "gate_mean_g_rma": float("nan"), "skipped": 0})
    return model


def write_history(history: list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
