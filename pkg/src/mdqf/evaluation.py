"""COCO-style mAP and the experiment protocols built on it."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import degrade_contrast
from .detector import BranchDetector
from .geometry import pairwise_iou
from .model import Detection, MdqfModel, baseline_box_fusion, baseline_image_fusion, postprocess
from .training import train_joint, train_separate

COCO_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass
class EvalResult:
    map: float
    map50: float
    per_class_ap: dict = field(default_factory=dict)
    per_class_ap50: dict = field(default_factory=dict)
    num_detections: int = 0
    num_gt: int = 0

    def row(self):
        return {"mAP": round(100 * self.map, 2), "mAP50": round(100 * self.map50, 2),
                "detections": self.num_detections, "gt": self.num_gt}


def _as_det(d):
    if isinstance(d, Detection):
        return d.box, d.class_id, d.score
    box, cls, score = d[:3]
    return box, cls, score


def _as_gt(g):
    if hasattr(g, "box"):
        return g.box, g.class_id
    return g[0], g[1]


def match_image(det_boxes, gt_boxes, threshold):
    """Greedy matching of score-sorted detections to ground truth of one image/class.

    Each detection takes the unmatched ground truth of highest IoU (lowest
    index on ties) provided that IoU is at least ``threshold``.
    Returns a boolean true-positive flag per detection.
    """
    tp = np.zeros(len(det_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return tp
    ious = pairwise_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(det_boxes)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= threshold:
            taken[j] = True
            tp[i] = True
    return tp


def average_precision(tp, num_gt, interpolation="area"):
    """AP of a globally score-sorted true-positive sequence.

    ``"area"`` integrates the monotone precision envelope over recall;
    ``"coco101"`` averages the envelope at 101 evenly spaced recall points.
    """
    if num_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "area":
        r = np.concatenate([[0.0], recall])
        return float(np.sum((r[1:] - r[:-1]) * envelope))
    if interpolation == "coco101":
        points = np.arange(101) / 100  # exactly i/100, so recall k/n == i/100 compares equal
        idx = np.searchsorted(recall, points, side="left")
        env = np.concatenate([envelope, [0.0]])
        return float(np.mean(env[idx]))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def coco_map(detections, ground_truth, num_classes, iou_thresholds=COCO_THRESHOLDS,
             max_dets=100, interpolation="area", return_curves=False):
    """Mean AP over classes and IoU thresholds.

    Args:
        detections: ``{image_id: [Detection | (box, class_id, score), ...]}``.
        ground_truth: ``{image_id: [Annotation | (box, class_id), ...]}``.
        num_classes: class ids must lie in ``[0, num_classes)``.
        iou_thresholds: thresholds to average over; 0.5 must be among them
            for ``map50`` to be reported.
        max_dets: per image and class cap on scored detections.

    Classes without ground truth are left out of the mean.
    """
    thresholds = np.asarray(iou_thresholds, dtype=float)
    image_ids = sorted(set(ground_truth) | set(detections))
    dets = {c: [] for c in range(num_classes)}
    gts = {c: {} for c in range(num_classes)}
    for img in image_ids:
        for g in ground_truth.get(img, []):
            box, cls = _as_gt(g)
            if not 0 <= cls < num_classes:
                raise ValueError(f"unknown class id {cls} in ground truth")
            gts[cls].setdefault(img, []).append(box)
        per_class = {}
        for d in detections.get(img, []):
            box, cls, score = _as_det(d)
            if not 0 <= cls < num_classes:
                raise ValueError(f"unknown class id {cls} in detections")
            per_class.setdefault(cls, []).append((box, score))
        for cls, items in per_class.items():
            order = np.argsort(-np.array([s for _, s in items]), kind="stable")[:max_dets]
            dets[cls].append((img, [items[i] for i in order]))

    ap = np.full((num_classes, len(thresholds)), np.nan)
    curves = {}
    for c in range(num_classes):
        npos = sum(len(v) for v in gts[c].values())
        if npos == 0:
            continue
        scores, flags = [], [[] for _ in thresholds]
        for img, items in dets[c]:
            boxes = np.array([b for b, _ in items]).reshape(-1, 4)
            gt_boxes = np.array(gts[c].get(img, [])).reshape(-1, 4)
            scores += [s for _, s in items]
            for t_i, t in enumerate(thresholds):
                flags[t_i].append(match_image(boxes, gt_boxes, t))
        order = np.argsort(-np.array(scores, dtype=float), kind="stable")
        for t_i in range(len(thresholds)):
            tp = np.concatenate(flags[t_i])[order] if flags[t_i] else np.zeros(0, bool)
            ap[c, t_i] = average_precision(tp, npos, interpolation)
            if return_curves:
                ctp = np.cumsum(tp)
                curves[(c, float(thresholds[t_i]))] = (ctp / npos, ctp / np.arange(1, len(tp) + 1))
    valid = ~np.isnan(ap[:, 0])
    n_det = sum(len(v) for v in detections.values())
    n_gt = sum(len(v) for v in ground_truth.values())
    if not valid.any():
        result = EvalResult(0.0, 0.0, {}, {}, n_det, n_gt)
    else:
        at50 = np.flatnonzero(np.isclose(thresholds, 0.5))
        map50 = float(np.mean(ap[valid, at50[0]])) if len(at50) else float("nan")
        result = EvalResult(float(np.mean(ap[valid])), map50,
                            {c: float(np.mean(ap[c])) for c in np.flatnonzero(valid)},
                            {c: float(ap[c, at50[0]]) for c in np.flatnonzero(valid)} if len(at50) else {},
                            n_det, n_gt)
    return (result, curves) if return_curves else result


# inference helpers


def _batched(samples, size):
    for i in range(0, len(samples), size):
        yield samples[i:i + size]


def ground_truth_of(samples):
    return {s.image_id: list(s.annotations) for s in samples}


def detect_fused(model: MdqfModel, samples, degrade=None, factor=0.0, k=None, mode=None,
                 batch_size=25, **post):
    """Fused-path detections, optionally with one modality's contrast reduced."""
    out = {}
    for chunk in _batched(samples, batch_size):
        rgb = np.stack([s.rgb for s in chunk])
        tir = np.stack([s.tir for s in chunk])
        if degrade == "rgb":
            rgb = degrade_contrast(rgb, factor)
        elif degrade == "tir":
            tir = degrade_contrast(tir, factor)
        elif degrade is not None:
            raise ValueError(f"unknown modality {degrade!r}")
        for s, d in zip(chunk, model.predict(rgb, tir, mode=mode, k=k, **post)):
            out[s.image_id] = d
    return out


def detect_single(branch, samples, batch_size=25, **post):
    """Detections of one branch run alone on its own modality."""
    kwargs = {"mode": "nms", **post}
    out = {}
    for chunk in _batched(samples, batch_size):
        images = np.stack([s.image(branch.modality) for s in chunk])
        with torch.no_grad():
            final = branch.forward_single(images)[-1].proposals
        for s, d in zip(chunk, postprocess(final, None, **kwargs)):
            out[s.image_id] = d
    return out


def detect_image_baseline(detector, samples, degrade=None, factor=0.0, batch_size=25, **post):
    out = {}
    for chunk in _batched(samples, batch_size):
        rgb = np.stack([s.rgb for s in chunk])
        tir = np.stack([s.tir for s in chunk])
        if degrade == "rgb":
            rgb = degrade_contrast(rgb, factor)
        elif degrade == "tir":
            tir = degrade_contrast(tir, factor)
        for s, d in zip(chunk, baseline_image_fusion(detector, rgb, tir, **post)):
            out[s.image_id] = d
    return out


def detect_box_baseline(rgb_detector, tir_detector, samples, degrade=None, factor=0.0, batch_size=25, **post):
    out = {}
    for chunk in _batched(samples, batch_size):
        rgb = np.stack([s.rgb for s in chunk])
        tir = np.stack([s.tir for s in chunk])
        if degrade == "rgb":
            rgb = degrade_contrast(rgb, factor)
        elif degrade == "tir":
            tir = degrade_contrast(tir, factor)
        for s, d in zip(chunk, baseline_box_fusion(rgb_detector, tir_detector, rgb, tir, **post)):
            out[s.image_id] = d
    return out


def evaluate(detections, samples, num_classes=3, **kwargs) -> EvalResult:
    return coco_map(detections, ground_truth_of(samples), num_classes, **kwargs)


def _num_classes(model):
    return model.rgb.config.num_classes


def _post(model):
    f = model.fusion
    return {"score_floor": f.score_floor, "iou_threshold": f.nms_iou}


# protocols


def run_fusion_comparison(model: MdqfModel, samples, branches=None):
    """Single-branch rows followed by the fused row.

    ``branches`` maps modality to a standalone detector; by default the
    model's own branches are run alone.
    """
    nc = _num_classes(model)
    branches = branches or {"rgb": model.rgb, "tir": model.tir}
    rows = []
    for modality in ("rgb", "tir"):
        r = evaluate(detect_single(branches[modality], samples, **_post(model)), samples, nc)
        rows.append({"method": f"branch-{modality}", "modality": modality.upper(), **r.row()})
    r = evaluate(detect_fused(model, samples), samples, nc)
    rows.append({"method": "mdqf", "modality": "R+T", **r.row()})
    return rows


def relative_drop(degraded, clean):
    return (degraded - clean) / clean if clean else float("nan")


def run_robustness(model: MdqfModel, samples, image_baseline=None, box_baseline=None, factor=0.0,
                   degrade=("rgb", "tir")):
    """Clean and single-modality-degraded mAP50 for MDQF and the baselines.

    MDQF is reported on two paths: the fused path fed a contrast-reduced
    image, and the missing-modality path that runs the surviving branch alone.
    Drops are relative to each method's clean mAP50.
    """
    nc = _num_classes(model)
    post = _post(model)
    rows = []

    def add(method, path, fn):
        clean = evaluate(fn(None), samples, nc).map50
        row = {"method": method, "path": path, "RGB+TIR": round(100 * clean, 2)}
        for deg, col in (("tir", "RGB-only"), ("rgb", "TIR-only")):
            if deg not in degrade:
                continue
            v = evaluate(fn(deg), samples, nc).map50
            row[col] = round(100 * v, 2)
            row[col + " drop%"] = round(100 * relative_drop(v, clean), 2)
        rows.append(row)

    add("mdqf", "fused", lambda deg: detect_fused(model, samples, degrade=deg, factor=factor))

    def missing(deg):
        if deg is None:
            return detect_fused(model, samples)
        survivor = "tir" if deg == "rgb" else "rgb"
        return detect_single(model.branch(survivor), samples, **post)

    add("mdqf", "missing", missing)
    if image_baseline is not None:
        add("image-fusion", "fused",
            lambda deg: detect_image_baseline(image_baseline, samples, deg, factor, **post))
    if box_baseline is not None:
        r, t = box_baseline
        add("box-fusion", "fused", lambda deg: detect_box_baseline(r, t, samples, deg, factor, **post))
    return rows


def run_k_ablation(model: MdqfModel, samples, k2_values=(None,), modes=("nms",), k1=None, topk_n=None):
    """Evaluate one trained model over test-time ``k`` values and post-processing modes."""
    nc = _num_classes(model)
    pool = 2 * model.rgb.config.num_queries
    rows = []
    for k2 in k2_values:
        for mode in modes:
            post = {"topk_n": topk_n} if topk_n is not None else {}
            r = evaluate(detect_fused(model, samples, k=k2, mode=mode, **post), samples, nc)
            rows.append({"k1": k1 if k1 is not None else model.fusion.k_train or pool,
                         "k2": k2 or pool, "postproc": mode, **r.row()})
    return rows


SWAPS = {"swap-rgb": ("rgb",), "swap-tir": ("tir",), "swap-both": ("rgb", "tir")}


def run_decoupled_update(initial: MdqfModel, rgb_unpaired, tir_unpaired, paired, test, joint_config,
                         separate_config=None, high_branches=None, swaps=tuple(SWAPS)):
    """Swap separately trained branches into a trained model and fine-tune jointly.

    ``high_branches`` may supply already trained standalone detectors; otherwise
    fresh ones are trained on the unpaired sets with ``separate_config``.
    Returns ``(rows, models)``; every row carries its deltas to the initial
    model and whether the swap left the other components byte-identical.
    """
    nc = _num_classes(initial)
    high = dict(high_branches or {})
    needed = {m for name in swaps for m in SWAPS[name]}
    for modality, data in (("rgb", rgb_unpaired), ("tir", tir_unpaired)):
        if modality in needed and modality not in high:
            det = BranchDetector(initial.branch(modality).config)
            train_separate(det, data, separate_config)
            high[modality] = det
    base = evaluate(detect_fused(initial, test), test, nc)
    rows = [{"model": "initial", **base.row(), "delta mAP": 0.0, "delta mAP50": 0.0}]
    models = {"initial": initial}
    for name in swaps:
        m = copy_model(initial)
        swap = SWAPS[name]
        for modality in swap:
            m.load_branch(modality, high[modality])
        untouched = _untouched_after_swap(initial, m, swap)
        train_joint(m, paired, joint_config)
        r = evaluate(detect_fused(m, test), test, nc)
        rows.append({"model": name, **r.row(), "delta mAP": round(100 * (r.map - base.map), 2),
                     "delta mAP50": round(100 * (r.map50 - base.map50), 2), "swap untouched": untouched})
        models[name] = m
    return rows, models


def _untouched_after_swap(before: MdqfModel, after: MdqfModel, swapped):
    """True when every array outside the swapped branches is byte-identical."""
    a, b = {}, {}
    for m in ("rgb", "tir"):
        if m not in swapped:
            a.update(before.branch(m).arrays(m + "."))
            b.update(after.branch(m).arrays(m + "."))
    a.update(before.adapter_arrays())
    b.update(after.adapter_arrays())
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def copy_model(model: MdqfModel) -> MdqfModel:
    clone = MdqfModel(BranchDetector(model.rgb.config), BranchDetector(model.tir.config), model.fusion)
    clone.load_state_dict(model.state_dict())
    return clone


# reports


def write_table(rows, out_dir, name):
    """Write ``rows`` as ``name.csv`` and ``name.md``; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    columns = list(rows[0]) if rows else []
    for r in rows:
        columns += [c for c in r if c not in columns]
    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    md_path = os.path.join(out_dir, f"{name}.md")
    with open(md_path, "w") as f:
        f.write("| " + " | ".join(columns) + " |\n")
        f.write("|" + "---|" * len(columns) + "\n")
        for r in rows:
            f.write("| " + " | ".join(str(r.get(c, "")) for c in columns) + " |\n")
    return csv_path, md_path


def write_pr_curves(curves, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "iou_threshold", "rank", "recall", "precision"])
        for (c, t), (rec, prec) in sorted(curves.items()):
            for i, (r, p) in enumerate(zip(rec, prec)):
                w.writerow([c, t, i + 1, f"{r:.6f}", f"{p:.6f}"])


def render_detections(sample, detections, path, scale=4):
    """Save RGB and thermal views side by side with boxes drawn by branch of origin.

    RGB-branch detections are drawn in red on the RGB view, TIR-branch ones
    in green on the thermal view.
    """
    from PIL import Image, ImageDraw

    h, w = sample.rgb.shape[:2]
    rgb = Image.fromarray((sample.rgb * 255).round().astype(np.uint8)).resize((w * scale, h * scale), Image.NEAREST)
    tir = Image.fromarray((sample.tir[..., 0] * 255).round().astype(np.uint8)).convert("RGB")
    tir = tir.resize((w * scale, h * scale), Image.NEAREST)
    for det in detections:
        cx, cy, bw, bh = det.box
        xy = [(cx - bw / 2) * w * scale, (cy - bh / 2) * h * scale,
              (cx + bw / 2) * w * scale, (cy + bh / 2) * h * scale]
        if det.modality == "rgb":
            ImageDraw.Draw(rgb).rectangle(xy, outline=(255, 0, 0), width=3)
        else:
            ImageDraw.Draw(tir).rectangle(xy, outline=(0, 255, 0), width=3)
    canvas = Image.new("RGB", (2 * w * scale, h * scale))
    canvas.paste(rgb, (0, 0))
    canvas.paste(tir, (w * scale, 0))
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    canvas.save(path)
    return path
