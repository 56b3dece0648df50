"""Two detector branches coupled by per-stage query fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .detector import BranchDetector, DetectorConfig, ProposalSet, Stage
from .fusion import AdapterPair, FusedState, FusionConfig, fuse
from .geometry import nms


@dataclass(frozen=True)
class Detection:
    box: tuple  # normalized (cx, cy, w, h)
    class_id: int
    score: float
    modality: str


class FusedOutput(NamedTuple):
    rgb: list  # list[Stage]
    tir: list
    fused: list  # list[FusedState], one per stage, consumed by that stage


class MdqfModel(nn.Module):
    def __init__(self, rgb: BranchDetector | None = None, tir: BranchDetector | None = None,
                 fusion: FusionConfig | None = None, **branch_kwargs):
        super().__init__()
        seed = branch_kwargs.pop("seed", 0)
        self.rgb = rgb or BranchDetector(DetectorConfig(modality="rgb", seed=seed, **branch_kwargs))
        self.tir = tir or BranchDetector(DetectorConfig(modality="tir", seed=seed + 1, **branch_kwargs))
        if self.rgb.modality != "rgb" or self.tir.modality != "tir":
            raise ValueError("branches must be tagged rgb and tir")
        cr, ct = self.rgb.config, self.tir.config
        if (cr.d_model, cr.num_stages, cr.num_classes) != (ct.d_model, ct.num_stages, ct.num_classes):
            raise ValueError("branches disagree on width, stage count or class count")
        self.fusion = fusion or FusionConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 2)
            self.adapters = nn.ModuleList(
                AdapterPair(cr.d_model, self.fusion.adapter_hidden, stage=i + 1) for i in range(cr.num_stages)
            )
        self.to(self.rgb.query_content.dtype)

    @property
    def num_stages(self):
        return self.rgb.num_stages

    def branch(self, modality) -> BranchDetector:
        if modality == "rgb":
            return self.rgb
        if modality == "tir":
            return self.tir
        raise ValueError(f"unknown modality {modality!r}")

    def forward_fused(self, rgb_images, tir_images, k: int | None = None) -> FusedOutput:
        mem_r = self.rgb.extract_memory(rgb_images)
        mem_t = self.tir.extract_memory(tir_images)
        if mem_r.features.shape[0] != mem_t.features.shape[0]:
            raise ValueError("rgb and tir batches differ in size")
        b = mem_r.features.shape[0]
        q_r, p_r = self.rgb.init_queries(b)
        q_t, p_t = self.tir.init_queries(b)
        out = FusedOutput([], [], [])
        for i in range(self.num_stages):
            pool = len(p_r) + len(p_t)
            kk = self.fusion.k(self.training, self.rgb.config.num_queries) if k is None else int(k)
            kk = min(kk, pool)
            state = fuse(p_r, p_t, q_r, q_t, self.adapters[i], kk)
            sr = self.rgb.decode_stage(i, mem_r, state.queries_rgb, state.proposals)
            st = self.tir.decode_stage(i, mem_t, state.queries_tir, state.proposals)
            out.rgb.append(sr)
            out.tir.append(st)
            out.fused.append(state)
            q_r, p_r = sr
            q_t, p_t = st
        return out

    forward = forward_fused

    def forward_missing(self, modality, images) -> list[Stage]:
        """Run one branch alone; fusion and adapters are not touched."""
        return self.branch(modality).forward_single(images)

    def predict(self, rgb_images=None, tir_images=None, mode=None, k=None, **post_kwargs):
        """Detections per image; a missing modality falls back to its partner branch alone."""
        with torch.no_grad():
            if rgb_images is not None and tir_images is not None:
                out = self.forward_fused(rgb_images, tir_images, k=k)
                p_r, p_t = out.rgb[-1].proposals, out.tir[-1].proposals
            elif rgb_images is not None:
                p_r, p_t = self.forward_missing("rgb", rgb_images)[-1].proposals, None
            elif tir_images is not None:
                p_r, p_t = None, self.forward_missing("tir", tir_images)[-1].proposals
            else:
                raise ValueError("need at least one modality")
        kwargs = self._post_defaults(mode)
        kwargs.update(post_kwargs)
        return postprocess(p_r, p_t, **kwargs)

    def _post_defaults(self, mode=None):
        f = self.fusion
        mode = mode or f.postprocess
        return {"mode": mode, "score_floor": f.score_floor, "iou_threshold": f.nms_iou, "topk_n": f.topk_n}

    # checkpoints

    def adapter_arrays(self):
        return {"adapters." + k: v.detach().cpu().numpy().copy() for k, v in self.adapters.state_dict().items()}

    def save(self, path):
        arrays = {**self.rgb.arrays("rgb."), **self.tir.arrays("tir."), **self.adapter_arrays()}
        meta = {"kind": "mdqf", "rgb": self.rgb.metadata(), "tir": self.tir.metadata(),
                "fusion": asdict(self.fusion)}
        save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_archive(path)
        if meta.get("kind") != "mdqf":
            raise ValueError(f"{path} is not a composite checkpoint")
        model = cls(BranchDetector(DetectorConfig(**meta["rgb"]["config"])),
                    BranchDetector(DetectorConfig(**meta["tir"]["config"])),
                    FusionConfig(**meta["fusion"]))
        model.to(torch.from_numpy(arrays["rgb.query_content"]).dtype)
        model.rgb.load_arrays(arrays, "rgb.")
        model.tir.load_arrays(arrays, "tir.")
        model.load_adapter_arrays(arrays)
        return model

    def load_adapter_arrays(self, arrays):
        with torch.no_grad():
            for k, v in self.adapters.state_dict().items():
                v.copy_(torch.from_numpy(np.asarray(arrays["adapters." + k])))

    def load_branch(self, modality, source):
        """Overwrite one branch from a detector or a branch checkpoint path."""
        target = self.branch(modality)
        if isinstance(source, BranchDetector):
            if source.modality != modality:
                raise ValueError(f"cannot load a {source.modality} branch into {modality}")
            arrays = source.arrays()
        else:
            arrays, meta = load_archive(source)
            if meta.get("kind") == "mdqf":
                arrays = {k[len(modality) + 1:]: v for k, v in arrays.items() if k.startswith(modality + ".")}
            elif meta.get("modality") != modality:
                raise ValueError(f"checkpoint holds a {meta.get('modality')} branch, not {modality}")
        target.load_arrays(arrays)


def extract_branch(path, modality, out_path):
    """Write one branch of a composite checkpoint as a standalone branch checkpoint."""
    arrays, meta = load_archive(path)
    prefix = modality + "."
    save_archive(out_path, {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)},
                 meta[modality])


def _to_numpy(p: ProposalSet | None):
    if p is None:
        return None
    return (p.boxes.detach().cpu().double().numpy(), p.scores.detach().cpu().double().numpy(),
            p.labels.detach().cpu().numpy())


def postprocess(p_rgb: ProposalSet | None, p_tir: ProposalSet | None, mode="nms",
                score_floor=0.05, iou_threshold=0.5, topk_n=300) -> list[list[Detection]]:
    """Merge the final proposals of both branches into detections, per image.

    ``mode="nms"`` applies class-aware NMS to the tagged union; ``mode="topk"``
    keeps the ``topk_n`` best entries without any suppression.
    """
    if mode not in ("nms", "topk"):
        raise ValueError(f"unknown post-processing mode {mode!r}")
    parts = [(m, _to_numpy(p)) for m, p in (("rgb", p_rgb), ("tir", p_tir)) if p is not None]
    if not parts:
        return []
    batch = parts[0][1][0].shape[0]
    results = []
    for b in range(batch):
        boxes = np.concatenate([p[0][b] for _, p in parts]).reshape(-1, 4)
        scores = np.concatenate([p[1][b] for _, p in parts]).reshape(-1)
        labels = np.concatenate([p[2][b] for _, p in parts]).reshape(-1)
        tags = np.concatenate([[m] * len(p[1][b]) for m, p in parts]).reshape(-1)
        keep = np.flatnonzero(scores >= score_floor)
        if mode == "nms":
            kept = nms(boxes[keep], scores[keep], iou_threshold, labels[keep], class_aware=True)
        else:
            kept = np.argsort(-scores[keep], kind="stable")[:topk_n]
        results.append([
            Detection(tuple(float(x) for x in boxes[j]), int(labels[j]), float(scores[j]), str(tags[j]))
            for j in keep[np.asarray(kept, dtype=int)]
        ])
    return results


def mean_image(rgb_images, tir_images):
    """Pixel-wise mean of an RGB and a thermal image; thermal is broadcast over colour."""
    rgb = np.asarray(rgb_images, dtype=np.float32)
    tir = np.asarray(tir_images, dtype=np.float32)
    if rgb.shape[:-1] != tir.shape[:-1]:
        raise ValueError(f"image sizes differ: {rgb.shape} vs {tir.shape}")
    return (rgb + tir) / 2


def baseline_image_fusion(detector: BranchDetector, rgb_images, tir_images, **post_kwargs):
    """Single 3-channel detector run on the averaged image pair."""
    with torch.no_grad():
        final = detector.forward_single(mean_image(rgb_images, tir_images))[-1].proposals
    return postprocess(final, None, **{"mode": "nms", **post_kwargs})


def baseline_box_fusion(rgb_detector: BranchDetector, tir_detector: BranchDetector,
                        rgb_images, tir_images, **post_kwargs):
    """Two independent detectors; their final boxes are merged by class-aware NMS."""
    with torch.no_grad():
        p_r = rgb_detector.forward_single(rgb_images)[-1].proposals
        p_t = tir_detector.forward_single(tir_images)[-1].proposals
    return postprocess(p_r, p_t, **{"mode": "nms", **post_kwargs})
