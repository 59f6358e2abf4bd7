"""Average precision at a single IoU threshold with all-point interpolation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import iou


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    map: float
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)
    n_gt: dict[int, int] = field(default_factory=dict)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Exact area under the monotone precision envelope."""
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def evaluate_map(detections, scenes, iou_threshold: float = 0.5) -> EvalReport:
    """Per-class AP and their mean over classes that have ground truth.

    ``detections[i]`` lists the detections for ``scenes[i]``; each detection
    needs ``label``, ``score`` and ``box``. Within a class, detections are swept
    by descending score (stable in scene order) and each one claims the unmatched
    ground-truth box of highest IoU, lower index winning ties, if that IoU
    reaches the threshold.
    """
    gt_count: dict[int, int] = {}
    for s in scenes:
        for l in s.gt_labels:
            gt_count[int(l)] = gt_count.get(int(l), 0) + 1

    per_class, curves = {}, {}
    for c in sorted(gt_count):
        cands = [(det.score, i, k, det) for i, dets in enumerate(detections)
                 for k, det in enumerate(dets) if det.label == c]
        cands.sort(key=lambda t: (-t[0], t[1], t[2]))
        taken = {i: np.zeros(len(s.gt_labels), dtype=bool) for i, s in enumerate(scenes)}
        tp = np.zeros(len(cands))
        for j, (_, i, _, det) in enumerate(cands):
            s = scenes[i]
            mask = (s.gt_labels == c) & ~taken[i]
            if not mask.any():
                continue
            ious = np.where(mask, iou(np.asarray(det.box)[None], s.gt_boxes), -1.0)
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                taken[i][best] = True
                tp[j] = 1.0
        cum_tp = np.cumsum(tp)
        recall = cum_tp / gt_count[c]
        precision = cum_tp / np.arange(1, len(cands) + 1)
        per_class[c] = average_precision(recall, precision)
        curves[c] = (recall, precision)
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(per_class, m, curves, gt_count)
