"""Detection metrics: mAP@0.5, attack success rate, true detection rate and RmAP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import DEFAULT_NMS_IOU, DEFAULT_TAU, box_iou, detect
from .errors import InvalidInputError

SUCCESS_IOU = 0.5


def _overlaps(dets, box, class_id: int, iou_thr: float) -> bool:
    same = [d.box for d in dets if d.class_id == class_id]
    if not same:
        return False
    return bool((box_iou(box, same).numpy() >= iou_thr).any())


def rma_success(dets, box, target_class: int, iou_thr: float = SUCCESS_IOU) -> bool:
    return _overlaps(dets, box, target_class, iou_thr)


def true_detection(dets, box, original_class: int, iou_thr: float = SUCCESS_IOU) -> bool:
    return _overlaps(dets, box, original_class, iou_thr)


def oda_success(dets, box, original_class: int, iou_thr: float = SUCCESS_IOU) -> bool:
    return not true_detection(dets, box, original_class, iou_thr)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def class_ap(dets_per_image, gts, class_id: int, iou_thr: float = SUCCESS_IOU) -> float:
    records = []
    for img, dets in enumerate(dets_per_image):
        records.extend((d.score, img, d.box) for d in dets if d.class_id == class_id)
    records.sort(key=lambda r: -r[0])
    gt_boxes = [gt.boxes[gt.labels == class_id] for gt in gts]
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    npos = sum(len(b) for b in gt_boxes)
    if npos == 0:
        return float("nan")
    tp = np.zeros(len(records))
    for k, (_, img, box) in enumerate(records):
        cand = gt_boxes[img]
        if not len(cand):
            continue
        ious = box_iou(box, cand).numpy()[0]
        best = int(ious.argmax())
        if ious[best] >= iou_thr and not used[img][best]:
            used[img][best] = True
            tp[k] = 1
    ctp = np.cumsum(tp)
    recall = ctp / npos
    precision = ctp / np.arange(1, len(records) + 1)
    return average_precision(recall, precision)


def map50(dets_per_image, gts) -> float:
    """Mean AP at IoU 0.5 over the classes present in the ground truth."""
    if len(dets_per_image) != len(gts):
        raise InvalidInputError("detections and ground truth differ in image count")
    classes = sorted({int(c) for gt in gts for c in gt.labels})
    if not classes:
        return 0.0
    return float(np.mean([class_ap(dets_per_image, gts, c) for c in classes]))


@dataclass
class MetricsReport:
    mode: str
    asr: float
    tdr: float | None
    rmap: float
    map50_clean: float
    pre_mitigation_map: float
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        if self.tdr is None:
            d.pop("tdr")
        return d


def attack_outcomes(dets_per_image, triggered, mode: str, target_class: int = 0):
    """Per stamped object ``(attack_succeeded, truly_detected)`` flags."""
    out = []
    for dets, gt in zip(dets_per_image, triggered.targets):
        for k in np.flatnonzero(gt.poisoned):
            box, cls = gt.boxes[k], int(gt.labels[k])
            hit = true_detection(dets, box, cls)
            success = rma_success(dets, box, target_class) if mode == "rma" else not hit
            out.append((success, hit))
    return out


def evaluate(model, clean_test, triggered_test, pre_mitigation_map: float, mode: str,
             target_class: int = 0, tau: float = DEFAULT_TAU, nms_iou: float = DEFAULT_NMS_IOU) -> MetricsReport:
    if not pre_mitigation_map > 0:
        raise InvalidInputError("pre-mitigation mAP must be positive")
    if mode not in ("rma", "oda"):
        raise InvalidInputError(f"unknown attack mode {mode!r}")
    clean_map = map50(detect(model, clean_test.images, tau, nms_iou), clean_test.targets)
    outcomes = attack_outcomes(detect(model, triggered_test.images, tau, nms_iou), triggered_test, mode, target_class)
    n = len(outcomes)
    if n == 0:
        raise InvalidInputError("triggered test set has no stamped objects")
    asr = sum(s for s, _ in outcomes) / n
    tdr = sum(h for _, h in outcomes) / n
    return MetricsReport(
        mode=mode,
        asr=float(asr),
        tdr=None if mode == "oda" else float(tdr),
        rmap=float(clean_map / pre_mitigation_map),
        map50_clean=float(clean_map),
        pre_mitigation_map=float(pre_mitigation_map),
        counts={"stamped_objects": n, "clean_images": len(clean_test), "clean_objects": clean_test.num_objects()},
    )
