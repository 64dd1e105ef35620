"""Object-localised adversarial examples via masked, l_inf-projected sign-gradient PGD.

Three inner objectives are available, all restricted to the predictions
matched to the selected object:

* ``clm`` maximises the per-prediction classification loss,
* ``flm`` maximises localisation plus classification loss (ablation only),
* ``sbm`` minimises the soft-gated misclassification/disappearance loss.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .data import GroundTruth
from .detector import DEFAULT_MATCH_IOU, Predictions, assign, elementwise_iou, per_prediction_bce, target_matched_set
from .errors import ConfigError, InvalidInputError, SkipSample
from .gate import BranchLosses, adv_loss, soft_gate
from .margins import SurrogateConfig, attack_branch_losses

log = logging.getLogger(__name__)

OBJECTIVES = ("clm", "sbm", "flm")
# sign of the pixel update: +1 ascends the objective, -1 descends
_DIRECTION = {"clm": 1.0, "flm": 1.0, "sbm": -1.0}


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float = 8 / 255
    steps: int = 30
    step_size: float = 2 / 255
    objective: str = "sbm"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.step_size > self.epsilon > 0:
            warnings.warn("step_size exceeds epsilon; every step saturates the ball", stacklevel=2)


@dataclass
class AdvExample:
    x_prime: torch.Tensor  # (3, H, W)
    delta: torch.Tensor  # (3, H, W), zero outside the mask
    j_set: np.ndarray
    i_star: int | None
    objective: float = float("nan")
    branch_gates: torch.Tensor | None = None  # (|J|, 2) for sbm
    skipped: bool = False


def box_mask(b, image_shape) -> torch.Tensor:
    """``(H, W)`` float mask, one inside the rounded box using half-open pixel ranges."""
    h, w = image_shape[:2]
    x1, y1, x2, y2 = (int(round(float(v))) for v in b)
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        raise InvalidInputError(f"box {tuple(b)} exceeds image bounds {(h, w)}")
    if x2 <= x1 or y2 <= y1:
        raise InvalidInputError(f"degenerate box {tuple(b)}")
    m = torch.zeros(h, w)
    m[y1:y2, x1:x2] = 1.0
    return m


def objective_terms(kind: str, logits: torch.Tensor, boxes: torch.Tensor, label: int, target_box,
                    cfg: SurrogateConfig):
    """Per-prediction objective for matched predictions ``logits (|J|, C)`` / ``boxes (|J|, 4)``.

    Returns ``(values, gates)``; gates are only produced for ``sbm``.
    """
    y = torch.full((logits.shape[0],), int(label), dtype=torch.long)
    if kind == "clm":
        return per_prediction_bce(logits, y), None
    if kind == "flm":
        tb = torch.as_tensor(target_box, dtype=boxes.dtype).expand_as(boxes)
        return per_prediction_bce(logits, y) + (1.0 - elementwise_iou(boxes, tb)), None
    if kind == "sbm":
        a, b, c = attack_branch_losses(torch.sigmoid(logits), y, cfg)
        g = soft_gate(a, b)
        return adv_loss(BranchLosses(a, b, c)), torch.stack([g.g_rma, g.g_oda], -1)
    raise ConfigError(f"unknown objective {kind!r}")


def matched_set(pred_boxes: torch.Tensor, gt: GroundTruth, i_star: int, fallback=None,
                match_iou: float = DEFAULT_MATCH_IOU) -> np.ndarray:
    """Predictions assigned to ``i_star``; falls back to ``fallback`` (the clean-image set) if empty."""
    j = target_matched_set(assign(pred_boxes.detach(), gt, match_iou), i_star)
    if len(j) == 0 and fallback is not None:
        j = np.asarray(fallback)
    return j


def _single_objective(kind, model, x_prime, gt, i_star, cfg, clean_j=None, match_iou=DEFAULT_MATCH_IOU):
    x_prime = x_prime if x_prime.dim() == 4 else x_prime[None]
    preds = model(x_prime)
    j = matched_set(preds.boxes[0], gt, i_star, clean_j, match_iou)
    if len(j) == 0:
        raise SkipSample(f"no prediction matched to object {i_star}")
    vals, _ = objective_terms(kind, preds.logits[0, j], preds.boxes[0, j], int(gt.labels[i_star]),
                              gt.boxes[i_star], cfg)
    return vals.mean()


def clm_objective(model, x_prime, gt: GroundTruth, i_star: int, cfg: SurrogateConfig | None = None, clean_j=None):
    """Mean per-prediction BCE over the target-matched set (to be maximised)."""
    return _single_objective("clm", model, x_prime, gt, i_star, cfg, clean_j)


def flm_objective(model, x_prime, gt: GroundTruth, i_star: int, cfg: SurrogateConfig | None = None, clean_j=None):
    return _single_objective("flm", model, x_prime, gt, i_star, cfg, clean_j)


def sbm_objective(model, x_prime, gt: GroundTruth, i_star: int, cfg: SurrogateConfig, clean_j=None):
    """Mean gated adversarial loss over the target-matched set (to be minimised)."""
    return _single_objective("sbm", model, x_prime, gt, i_star, cfg, clean_j)


def pgd_batch(model, x: torch.Tensor, gts, i_stars, spec: PerturbationSpec, cfg: SurrogateConfig,
              match_iou: float = DEFAULT_MATCH_IOU, check: bool = False, trace: list | None = None):
    """Run PGD independently for every image of a batch.

    ``i_stars[k]`` may be ``None`` to skip image ``k``. The matched set is
    recomputed on the current ``x'`` at each step, falling back to the
    clean-image assignment when it is empty. Model parameters receive no
    gradient. With ``check`` the projection invariants are asserted after
    every step; ``trace`` collects the per-step objective vector.
    """
    B, _, H, W = x.shape
    x = x.detach()
    masks = torch.zeros(B, 1, H, W)
    clean_j = [np.zeros(0, dtype=np.int64)] * B
    with torch.no_grad():
        preds0 = model(x)
    active = np.zeros(B, dtype=bool)
    for k, (gt, i) in enumerate(zip(gts, i_stars)):
        if i is None:
            continue
        masks[k, 0] = box_mask(gt.boxes[i], (H, W))
        clean_j[k] = matched_set(preds0.boxes[k], gt, i, None, match_iou)
        active[k] = len(clean_j[k]) > 0
    sign = _DIRECTION[spec.objective]
    delta = torch.zeros_like(x)

    def evaluate(d, need_graph):
        xp = (x + masks * d).clamp(0.0, 1.0)
        preds = model(xp)
        total = xp.new_zeros(())
        per_image = [float("nan")] * B
        j_sets = [np.zeros(0, dtype=np.int64)] * B
        gates = [None] * B
        for k in np.flatnonzero(active):
            gt, i = gts[k], i_stars[k]
            j = matched_set(preds.boxes[k], gt, i, clean_j[k], match_iou)
            vals, g = objective_terms(spec.objective, preds.logits[k, j], preds.boxes[k, j],
                                      int(gt.labels[i]), gt.boxes[i], cfg)
            obj = vals.mean()
            total = total + obj
            per_image[k] = float(obj.detach())
            j_sets[k] = j
            gates[k] = None if g is None else g.detach()
        return xp, total, per_image, j_sets, gates

    if spec.epsilon > 0 and active.any():
        for _ in range(spec.steps):
            d = delta.clone().requires_grad_(True)
            _, total, per_image, _, _ = evaluate(d, True)
            if trace is not None:
                trace.append(per_image)
            (grad,) = torch.autograd.grad(total, d)
            with torch.no_grad():
                delta = delta + sign * spec.step_size * grad.sign()
                delta = delta.clamp(-spec.epsilon, spec.epsilon) * masks
                delta = (x + delta).clamp(0.0, 1.0) - x
            if check:
                assert float(delta.abs().max()) <= spec.epsilon + 1e-6
                assert float((delta * (1 - masks)).abs().max()) == 0.0

    with torch.no_grad():
        xp, _, per_image, j_sets, gates = evaluate(delta, False)
    if trace is not None and spec.steps > 0 and spec.epsilon > 0:
        trace.append(per_image)
    out = []
    for k in range(B):
        out.append(AdvExample(
            x_prime=xp[k], delta=(delta[k] * masks[k]), j_set=j_sets[k], i_star=i_stars[k],
            objective=per_image[k], branch_gates=gates[k], skipped=not active[k],
        ))
    return out


def pgd(model, x: torch.Tensor, gt: GroundTruth, i_star: int, spec: PerturbationSpec, cfg: SurrogateConfig,
        match_iou: float = DEFAULT_MATCH_IOU, check: bool = False) -> AdvExample:
    """Single-image PGD; raises :class:`SkipSample` when no prediction can be matched."""
    x = x if x.dim() == 4 else x[None]
    adv = pgd_batch(model, x, [gt], [i_star], spec, cfg, match_iou, check)[0]
    if adv.skipped:
        raise SkipSample(f"no prediction matched to object {i_star}")
    return adv
