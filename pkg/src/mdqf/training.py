"""Set-based matching, per-stage losses and the separate-to-joint schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .detector import BranchDetector, ProposalSet
from .geometry import box_cxcywh_to_xyxy, elementwise_giou_t, generalized_box_iou_t
from .datagen import Sample
from .model import FusedOutput, MdqfModel, mean_image

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.125  # classification
    beta: float = 0.25  # GIoU
    gamma: float = 0.625  # L1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


class Assignment(NamedTuple):
    pred: np.ndarray  # matched prediction indices
    gt: np.ndarray  # matched ground-truth indices, aligned with ``pred``
    unmatched: np.ndarray

    def pairs(self):
        return list(zip(self.pred.tolist(), self.gt.tolist()))


class Target(NamedTuple):
    boxes: torch.Tensor  # (m, 4) normalized cxcywh
    labels: torch.Tensor  # (m,) int64


def make_target(annotations, dtype=torch.float32) -> Target:
    if not annotations:
        return Target(torch.zeros(0, 4, dtype=dtype), torch.zeros(0, dtype=torch.long))
    return Target(torch.tensor([a.box for a in annotations], dtype=dtype),
                  torch.tensor([a.class_id for a in annotations], dtype=torch.long))


def match_cost(boxes, logits, target: Target, weights: LossWeights) -> torch.Tensor:
    """``(n, m)`` matching cost; uses the loss weights so matching and loss agree."""
    prob = logits.sigmoid()
    cost_cls = 1 - prob[:, target.labels]
    cost_giou = 1 - generalized_box_iou_t(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(target.boxes))
    cost_l1 = torch.cdist(boxes, target.boxes, p=1) / 4
    return weights.alpha * cost_cls + weights.beta * cost_giou + weights.gamma * cost_l1


def hungarian_match(boxes, logits, target: Target, weights: LossWeights = LossWeights()) -> Assignment:
    """Minimum-cost one-to-one assignment of predictions ``(n, 4)``/``(n, C)`` to targets."""
    n = boxes.shape[0]
    if len(target.labels) == 0 or n == 0:
        return Assignment(np.zeros(0, int), np.zeros(0, int), np.arange(n))
    with torch.no_grad():
        cost = match_cost(boxes, logits, target, weights).double().cpu().numpy()
    return assignment_from_cost(cost)


def assignment_from_cost(cost) -> Assignment:
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("matching cost contains non-finite entries")
    pred, gt = linear_sum_assignment(cost)
    unmatched = np.setdiff1d(np.arange(cost.shape[0]), pred)
    return Assignment(pred.astype(int), gt.astype(int), unmatched)


def stage_loss(boxes, logits, target: Target, assignment: Assignment, weights: LossWeights = LossWeights()):
    """Weighted loss of one image at one stage, plus the unweighted parts.

    Classification is per-class sigmoid BCE over every prediction (matched ones
    target their one-hot class, the rest target all zeros), summed and divided
    by the number of ground-truth objects. The box terms average over matched
    pairs and vanish when nothing is matched.
    """
    pred = torch.as_tensor(assignment.pred, dtype=torch.long)
    gt = torch.as_tensor(assignment.gt, dtype=torch.long)
    cls_target = torch.zeros_like(logits)
    if len(pred):
        cls_target[pred, target.labels[gt]] = 1
    num_gt = max(len(target.labels), 1)
    l_cls = F.binary_cross_entropy_with_logits(logits, cls_target, reduction="sum") / num_gt
    if len(pred):
        pb, tb = boxes[pred], target.boxes[gt]
        giou = torch.diagonal(generalized_box_iou_t(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(tb)))
        l_iou = (1 - giou).mean()
        l_l1 = (pb - tb).abs().mean()
    else:
        l_iou = l_l1 = logits.sum() * 0
    total = weights.alpha * l_cls + weights.beta * l_iou + weights.gamma * l_l1
    return total, {"cls": l_cls, "iou": l_iou, "l1": l_l1}


def branch_loss(stages, targets, weights: LossWeights = LossWeights(), num_stages=6, components=None):
    """Sum over stages of the batch-averaged :func:`stage_loss`, each stage matched afresh.

    Vectorized over stages and images; numerically the same as looping
    :func:`hungarian_match` and :func:`stage_loss`.
    """
    if len(stages) != num_stages:
        raise ValueError(f"expected {num_stages} stages, got {len(stages)}")
    boxes = torch.stack([s.proposals.boxes for s in stages])  # (S, B, n, 4)
    logits = torch.stack([s.proposals.logits for s in stages])  # (S, B, n, C)
    n_stage, batch, n = logits.shape[:3]
    if len(targets) != batch:
        raise ValueError("one target per image is required")
    sizes = [len(t.labels) for t in targets]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    tgt = Target(torch.cat([t.boxes.to(boxes.dtype) for t in targets]), torch.cat([t.labels for t in targets]))

    s_idx, b_idx, p_idx, g_idx = [], [], [], []
    if len(tgt.labels):
        with torch.no_grad():
            cost = match_cost(boxes.flatten(0, 2), logits.flatten(0, 2), tgt, weights)
            cost = cost.view(n_stage, batch, n, -1).double().cpu().numpy()
        for s in range(n_stage):
            for b in range(batch):
                if sizes[b] == 0:
                    continue
                a = assignment_from_cost(cost[s, b, :, offsets[b]:offsets[b + 1]])
                s_idx += [s] * len(a.pred)
                b_idx += [b] * len(a.pred)
                p_idx += a.pred.tolist()
                g_idx += (a.gt + offsets[b]).tolist()
    s_idx, b_idx, p_idx, g_idx = (torch.as_tensor(x, dtype=torch.long) for x in (s_idx, b_idx, p_idx, g_idx))

    cls_target = torch.zeros_like(logits)
    if len(p_idx):
        cls_target[s_idx, b_idx, p_idx, tgt.labels[g_idx]] = 1
    num_gt = torch.as_tensor([max(m, 1) for m in sizes], dtype=logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, cls_target, reduction="none").sum((-1, -2))
    l_cls = (bce / num_gt).sum() / batch
    if len(p_idx):
        pb, tb = boxes[s_idx, b_idx, p_idx], tgt.boxes[g_idx]
        per_image = torch.zeros(n_stage, batch, dtype=logits.dtype)
        per_image.index_put_((s_idx, b_idx), torch.ones(len(s_idx), dtype=logits.dtype), accumulate=True)
        w = 1 / per_image[s_idx, b_idx] / batch
        l_iou = ((1 - elementwise_giou_t(box_cxcywh_to_xyxy(pb), box_cxcywh_to_xyxy(tb))) * w).sum()
        l_l1 = ((pb - tb).abs().mean(-1) * w).sum()
    else:
        l_iou = l_l1 = logits.sum() * 0
    if components is not None:
        for k, v in (("cls", l_cls), ("iou", l_iou), ("l1", l_l1)):
            components[k] = components.get(k, 0.0) + float(v.detach())
    return weights.alpha * l_cls + weights.beta * l_iou + weights.gamma * l_l1


def joint_loss(output: FusedOutput, targets, weights: LossWeights = LossWeights(), num_stages=6, components=None):
    """RGB-branch loss plus TIR-branch loss, each matched against the same targets."""
    return (branch_loss(output.rgb, targets, weights, num_stages, components)
            + branch_loss(output.tir, targets, weights, num_stages, components))


@dataclass
class TrainConfig:
    epochs: int = 12
    max_steps: int | None = None
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 2
    seed: int = 0
    clip_norm: float | None = 0.1
    hflip: bool = False
    freeze: tuple = ("backbone", "encoder")
    log_path: str | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs <= 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs, lr and batch_size must be positive")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.freeze = tuple(self.freeze)

    @classmethod
    def from_dict(cls, data):
        bad = sorted(set(data) - set(cls.__dataclass_fields__))
        if bad:
            raise ValueError(f"invalid training config key(s): {', '.join(bad)}")
        return cls(**data)

    def to_dict(self):
        d = asdict(self)
        d["freeze"] = list(d["freeze"])
        return d


class FreezeViolation(RuntimeError):
    """A parameter that must stay frozen changed during training."""


def _batches(n, config: TrainConfig):
    """Deterministic (epoch, step, indices) stream honouring ``epochs`` and ``max_steps``."""
    step = 0
    for epoch in range(10 ** 9 if config.max_steps else config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                return
            yield epoch, step, order[start:start + config.batch_size]
            step += 1
        if config.max_steps is None and epoch + 1 >= config.epochs:
            return


def _flip(images, anns_list, rng):
    """Random horizontal flips; the shape classes are all mirror-symmetric."""
    out_img, out_anns = [], []
    for img, anns in zip(images, anns_list):
        if rng.random() < 0.5:
            img = img[:, ::-1]
            anns = [type(a)((1 - a.box[0],) + tuple(a.box[1:]), a.class_id, a.visibility) for a in anns]
        out_img.append(img)
        out_anns.append(anns)
    return out_img, out_anns


class _Logger:
    def __init__(self, path):
        self.f = open(path, "w") if path else None
        self.t0 = time.perf_counter()

    def write(self, record):
        record["time"] = round(time.perf_counter() - self.t0, 4)
        if self.f:
            self.f.write(json.dumps(record) + "\n")

    def close(self):
        if self.f:
            self.f.close()


def _optimizer(params, config):
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def _step(optimizer, params, loss, config):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.clip_norm:
        torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
    optimizer.step()


def train_separate(branch: BranchDetector, samples, config: TrainConfig, checkpoint=None):
    """Train one branch alone on single-modality samples; returns the loss history."""
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    branch.train()
    params = [p for p in branch.parameters()]
    for p in params:
        p.requires_grad_(True)
    opt = _optimizer(params, config)
    logger = _Logger(config.log_path)
    history = []
    dtype = branch.query_content.dtype
    for epoch, step, idx in _batches(len(samples), config):
        images = [samples[i].image for i in idx]
        anns = [samples[i].annotations for i in idx]
        if config.hflip:
            images, anns = _flip(images, anns, np.random.default_rng([config.seed, 7, step]))
        parts = {}
        stages = branch.forward_single(np.stack(images))
        loss = branch_loss(stages, [make_target(a, dtype) for a in anns], config.weights,
                           branch.num_stages, parts)
        _step(opt, params, loss, config)
        record = {"phase": "separate", "modality": branch.modality, "epoch": epoch, "step": step,
                  "loss": float(loss.detach()), **parts}
        history.append(record)
        logger.write(dict(record))
    logger.close()
    branch.eval()
    if checkpoint:
        branch.save(checkpoint)
    return history


def image_fusion_samples(samples) -> list[Sample]:
    """Averaged image pairs labelled with every object, for the image-fusion baseline."""
    return [Sample(mean_image(s.rgb, s.tir), list(s.annotations), s.image_id, "rgb") for s in samples]


def train_image_baseline(detector: BranchDetector, samples, config: TrainConfig, checkpoint=None):
    """Train a 3-channel detector on averaged pairs; see :func:`mdqf.model.baseline_image_fusion`."""
    if detector.config.in_channels != 3:
        raise ValueError("the image-fusion baseline needs a 3-channel detector")
    return train_separate(detector, image_fusion_samples(samples), config, checkpoint)


def snapshot(params):
    return {k: v.detach().clone() for k, v in params.items()}


def check_frozen(before, params):
    changed = [k for k, v in params.items() if not torch.equal(before[k], v.detach())]
    if changed:
        raise FreezeViolation(f"frozen parameters changed: {changed[:5]}")


def frozen_parameters(model: MdqfModel, prefixes=("backbone", "encoder")):
    out = {}
    for m in ("rgb", "tir"):
        for k, v in model.branch(m).named_parameters():
            if k.split(".")[0] in prefixes:
                out[f"{m}.{k}"] = v
    return out


def train_joint(model: MdqfModel, samples, config: TrainConfig, checkpoint=None):
    """Fine-tune decoders, heads, query embeddings and adapters on paired data.

    Backbone and encoder parameters are excluded from the optimizer and
    verified bit-for-bit unchanged afterwards.
    """
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(config.seed)
    frozen = frozen_parameters(model, config.freeze)
    frozen_ids = {id(p) for p in frozen.values()}
    for p in model.parameters():
        p.requires_grad_(id(p) not in frozen_ids)
    params = [p for p in model.parameters() if id(p) not in frozen_ids]
    before = snapshot(frozen)
    opt = _optimizer(params, config)
    logger = _Logger(config.log_path)
    history = []
    dtype = model.rgb.query_content.dtype
    model.train()
    try:
        for epoch, step, idx in _batches(len(samples), config):
            rgb = np.stack([samples[i].rgb for i in idx])
            tir = np.stack([samples[i].tir for i in idx])
            anns = [samples[i].annotations for i in idx]
            if config.hflip:
                rng = np.random.default_rng([config.seed, 11, step])
                flips = rng.random(len(idx)) < 0.5
                rgb = np.stack([im[:, ::-1] if f else im for im, f in zip(rgb, flips)])
                tir = np.stack([im[:, ::-1] if f else im for im, f in zip(tir, flips)])
                anns = [[type(a)((1 - a.box[0],) + tuple(a.box[1:]), a.class_id, a.visibility) for a in an]
                        if f else an for an, f in zip(anns, flips)]
            parts = {}
            out = model.forward_fused(rgb, tir)
            loss = joint_loss(out, [make_target(a, dtype) for a in anns], config.weights, model.num_stages, parts)
            _step(opt, params, loss, config)
            record = {"phase": "joint", "epoch": epoch, "step": step, "loss": float(loss.detach()), **parts}
            history.append(record)
            logger.write(dict(record))
    finally:
        logger.close()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(True)
    check_frozen(before, frozen)
    if checkpoint:
        model.save(checkpoint)
    return history


def separate_to_joint_loop(model: MdqfModel, rgb_samples, tir_samples, paired, rounds=1,
                           separate_config: TrainConfig | None = None,
                           joint_config: TrainConfig | None = None, checkpoint=None):
    """Alternate separate branch training, branch write-back and joint fine-tuning.

    Empty unpaired sets skip the separate phase for that modality. Each
    branch is trained on a standalone copy and then written into the
    composite, which leaves the other branch and the adapters untouched.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    separate_config = separate_config or TrainConfig()
    joint_config = joint_config or TrainConfig()
    history = []
    for r in range(rounds):
        for modality, data in (("rgb", rgb_samples), ("tir", tir_samples)):
            if not data:
                continue
            branch = BranchDetector(model.branch(modality).config)
            branch = branch.to(model.rgb.query_content.dtype)
            branch.load_arrays(model.branch(modality).arrays())
            history += train_separate(branch, data, separate_config)
            model.load_branch(modality, branch)
        history += train_joint(model, paired, joint_config)
        log.info("round %d done", r + 1)
    if checkpoint:
        model.save(checkpoint)
    return history
