"""Box algebra, overlap metrics and suppression.

Boxes are normalized ``(cx, cy, w, h)`` unless a function says otherwise.
The numpy functions work on single boxes or ``(..., 4)`` arrays; the
``*_t`` functions are their torch counterparts used inside losses.
"""

from __future__ import annotations

import numpy as np
import torch


def to_corners(box):
    """Convert ``(cx, cy, w, h)`` to ``(x1, y1, x2, y2)``."""
    b = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def to_center(corners):
    """Convert ``(x1, y1, x2, y2)`` to ``(cx, cy, w, h)``."""
    c = np.asarray(corners, dtype=np.float64)
    x1, y1, x2, y2 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(c):
    return np.clip(c[..., 2] - c[..., 0], 0, None) * np.clip(c[..., 3] - c[..., 1], 0, None)


def _inter_union(ca, cb):
    lt = np.maximum(ca[..., :2], cb[..., :2])
    rb = np.minimum(ca[..., 2:], cb[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(ca) + _area(cb) - inter
    return inter, union


def corner_iou(ca, cb):
    """IoU of boxes given in corner form; broadcasts over leading dims."""
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    inter, union = _inter_union(ca, cb)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out[()] if out.ndim == 0 else out


def corner_giou(ca, cb):
    """Generalized IoU of boxes given in corner form."""
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    inter, union = _inter_union(ca, cb)
    lt = np.minimum(ca[..., :2], cb[..., :2])
    rb = np.maximum(ca[..., 2:], cb[..., 2:])
    wh = np.clip(rb - lt, 0, None)
    hull = wh[..., 0] * wh[..., 1]
    safe_union = np.where(union > 0, union, 1.0)
    safe_hull = np.where(hull > 0, hull, 1.0)
    iou = np.where(union > 0, inter / safe_union, 0.0)
    out = np.where(hull > 0, iou - (hull - union) / safe_hull, 0.0)
    return out[()] if out.ndim == 0 else out


def iou(a, b):
    """IoU of two center-size boxes (0 when the union is empty)."""
    return corner_iou(to_corners(a), to_corners(b))


def giou(a, b):
    """Generalized IoU of two center-size boxes (0 when the hull is empty)."""
    return corner_giou(to_corners(a), to_corners(b))


def pairwise_iou(boxes_a, boxes_b):
    """``(n, m)`` IoU matrix between two sets of center-size boxes."""
    ca = to_corners(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4))
    cb = to_corners(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4))
    return corner_iou(ca[:, None, :], cb[None, :, :]).reshape(len(ca), len(cb))


def nms(boxes, scores, iou_threshold=0.5, classes=None, class_aware=True):
    """Greedy non-maximum suppression.

    A box is suppressed when its IoU with an already kept box is strictly
    greater than ``iou_threshold``. Equal scores are resolved in favour of the
    lower original index.

    Args:
        boxes: ``(n, 4)`` center-size boxes.
        scores: ``(n,)`` finite scores.
        iou_threshold: suppression threshold in ``(0, 1]``.
        classes: ``(n,)`` integer class ids; required when ``class_aware``.
        class_aware: only suppress within the same class.

    Returns:
        Kept indices, in descending score order.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n == 0:
        return []
    if class_aware:
        if classes is None:
            raise ValueError("class_aware NMS needs class ids")
        classes = np.asarray(classes).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        hit = overlaps[i] > iou_threshold
        if class_aware:
            hit &= classes == classes[i]
        suppressed |= hit
    return keep


# torch versions, differentiable, used by the matcher and the losses


def box_cxcywh_to_xyxy(x: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = x.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def generalized_box_iou_t(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU ``(n, m)`` between corner-form box tensors."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    iou_ = inter / union.clamp(min=1e-12)
    lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou_ - (hull - union) / hull.clamp(min=1e-12)


def elementwise_giou_t(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """GIoU of aligned corner-form box pairs ``(..., 4)``."""
    area1 = (boxes1[..., 2] - boxes1[..., 0]).clamp(min=0) * (boxes1[..., 3] - boxes1[..., 1]).clamp(min=0)
    area2 = (boxes2[..., 2] - boxes2[..., 0]).clamp(min=0) * (boxes2[..., 3] - boxes2[..., 1]).clamp(min=0)
    wh = (torch.min(boxes1[..., 2:], boxes2[..., 2:]) - torch.max(boxes1[..., :2], boxes2[..., :2])).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1 + area2 - inter
    hull_wh = (torch.max(boxes1[..., 2:], boxes2[..., 2:]) - torch.min(boxes1[..., :2], boxes2[..., :2])).clamp(min=0)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union.clamp(min=1e-12) - (hull - union) / hull.clamp(min=1e-12)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=0, max=1)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))
