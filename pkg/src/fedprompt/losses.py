"""Set-prediction detection loss: L1 + GIoU + dense classification consistency.

Boxes are ``(cx, cy, w, h)`` arrays in unit image coordinates; every box
function broadcasts over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DomainError, ShapeError

LOGIT_CLIP = 30.0


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    giou: float
    cons: float
    total: float

    @classmethod
    def from_parts(cls, l1: float, giou: float, cons: float) -> "LossBreakdown":
        return cls(l1, giou, cons, l1 + giou + cons)

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls(0.0, 0.0, 0.0, 0.0)
        n = len(items)
        return cls.from_parts(sum(i.l1 for i in items) / n,
                              sum(i.giou for i in items) / n,
                              sum(i.cons for i in items) / n)


def check_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.shape[-1:] != (4,):
        raise ShapeError(f"boxes need a trailing axis of 4, got {b.shape}")
    if not np.all(np.isfinite(b)):
        raise DomainError("non-finite box coordinates")
    if np.any(b[..., 2:] <= 0):
        raise DomainError("box width and height must be positive")
    return b


def to_corners(b: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _overlap_terms(a, b):
    a, b = np.broadcast_arrays(check_boxes(a), check_boxes(b))
    ca, cb = to_corners(a), to_corners(b)
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    # the enclosing box contains the union; keep rounding from reversing that
    return a, b, ca, cb, iw, ih, inter, union, np.maximum(ew * eh, union)


def iou(a, b):
    *_, inter, union, _ = _overlap_terms(a, b)
    return inter / union


def giou(a, b):
    *_, inter, union, enclose = _overlap_terms(a, b)
    return inter / union - (enclose - union) / enclose


def giou_grad(a, b):
    """GIoU and its gradient with respect to the first box's (cx, cy, w, h)."""
    a, b, ca, cb, iw, ih, inter, union, enclose = _overlap_terms(a, b)
    g = inter / union - (enclose - union) / enclose

    d_inter = (union + inter) / union**2 - 1.0 / enclose
    d_area_a = -inter / union**2 + 1.0 / enclose
    d_enclose = -union / enclose**2

    ciw, cih = np.clip(iw, 0, None), np.clip(ih, 0, None)
    d_iw = d_inter * cih * (iw > 0)
    d_ih = d_inter * ciw * (ih > 0)
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    d_ew = d_enclose * eh
    d_eh = d_enclose * ew

    # corners of a: x1, y1, x2, y2
    d_x1 = -d_iw * (ca[..., 0] > cb[..., 0]) - d_ew * (ca[..., 0] <= cb[..., 0])
    d_x2 = d_iw * (ca[..., 2] < cb[..., 2]) + d_ew * (ca[..., 2] >= cb[..., 2])
    d_y1 = -d_ih * (ca[..., 1] > cb[..., 1]) - d_eh * (ca[..., 1] <= cb[..., 1])
    d_y2 = d_ih * (ca[..., 3] < cb[..., 3]) + d_eh * (ca[..., 3] >= cb[..., 3])

    w, h = a[..., 2], a[..., 3]
    grad = np.stack([
        d_x1 + d_x2,
        d_y1 + d_y2,
        (d_x2 - d_x1) / 2 + d_area_a * h,
        (d_y2 - d_y1) / 2 + d_area_a * w,
    ], axis=-1)
    return g, grad


def l1_box(a, b):
    a, b = check_boxes(a), check_boxes(b)
    return np.abs(a - b).mean(axis=-1)


def l1_box_grad(a, b):
    a, b = check_boxes(a), check_boxes(b)
    return np.abs(a - b).mean(axis=-1), np.sign(a - b) / 4.0


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def consistency_loss(logits, pairs, gt_labels):
    """Mean binary cross-entropy over every (region, class) cell.

    Cells ``(region, gt_labels[g])`` for matched ``(region, g)`` pairs are
    positives; all remaining cells are negatives.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_regions, n_classes = logits.shape
    target = np.zeros_like(logits)
    for r, g in pairs:
        label = int(gt_labels[g])
        if not 0 <= label < n_classes:
            raise DomainError(f"label {label} outside [0, {n_classes})")
        target[r, label] = 1.0
    if logits.size == 0:
        return 0.0, np.zeros_like(logits)
    x = np.clip(logits, -LOGIT_CLIP, LOGIT_CLIP)
    loss = np.logaddexp(0.0, x) - target * x
    grad = (_sigmoid(x) - target) / logits.size
    grad[np.abs(logits) > LOGIT_CLIP] = 0.0
    return float(loss.mean()), grad


def match(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment as (prediction, ground truth) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def matching_cost(logits, pred_boxes, gt_labels, gt_boxes) -> np.ndarray:
    """Unit-weighted cost: (1 - class score) + L1 + (1 - GIoU)."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cls_cost = 1.0 - _sigmoid(logits[:, gt_labels])
    boxes = pred_boxes[:, gt_labels, :]
    return cls_cost + l1_box(boxes, gt_boxes[None]) + (1.0 - giou(boxes, gt_boxes[None]))


def total_loss(logits, pred_boxes, gt_labels, gt_boxes):
    """Matched set loss for one scene.

    ``logits`` is (regions, classes), ``pred_boxes`` is (regions, classes, 4)
    holding each region's class-conditional box and ``gt_labels`` are column
    indices into the class axis. Returns the breakdown plus gradients with
    respect to ``logits`` and ``pred_boxes``; the assignment is held fixed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if logits.ndim != 2 or pred_boxes.shape != logits.shape + (4,):
        raise ShapeError(f"logits {logits.shape} and boxes {pred_boxes.shape} disagree")
    if gt_labels.shape[0] != gt_boxes.shape[0]:
        raise ShapeError("one label per ground-truth box required")
    if gt_labels.size and (gt_labels.min() < 0 or gt_labels.max() >= logits.shape[1]):
        raise DomainError("ground-truth label outside the class axis")

    pairs = []
    if gt_labels.size and logits.shape[0]:
        pairs = match(matching_cost(logits, pred_boxes, gt_labels, gt_boxes))

    d_boxes = np.zeros_like(pred_boxes)
    l1_sum = giou_sum = 0.0
    for r, g in pairs:
        c = gt_labels[g]
        l1, dl1 = l1_box_grad(pred_boxes[r, c], gt_boxes[g])
        gv, dg = giou_grad(pred_boxes[r, c], gt_boxes[g])
        l1_sum += float(l1)
        giou_sum += 1.0 - float(gv)
        d_boxes[r, c] += (dl1 - dg) / len(pairs)
    n = max(len(pairs), 1)
    cons, d_logits = consistency_loss(logits, pairs, gt_labels)
    return LossBreakdown.from_parts(l1_sum / n, giou_sum / n, cons), d_logits, d_boxes
