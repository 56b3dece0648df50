"""Single-modality DETR-style detector.

One ``BranchDetector`` is a complete detector on its own: a small
convolutional patch embedding plus self-attention encoder produces the
memory, and a stack of decoder layers with unshared prediction heads
refines a fixed set of learned queries and anchor boxes stage by stage::

    Q_i = decoder_i(memory, Q_{i-1}, P_{i-1})
    P_i = head_i(Q_i, P_{i-1})

All tensors carry a leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_archive, save_archive
from .geometry import inverse_sigmoid

MODALITIES = ("rgb", "tir")
CHANNELS = {"rgb": 3, "tir": 1}
NUM_STAGES = 6
# anchors start with no score; sigmoid of this is exactly 0 in float32/64
EMPTY_LOGIT = -1.0e4


@dataclass
class DetectorConfig:
    modality: str = "rgb"
    image_size: tuple = (64, 64)
    patch: int = 8
    d_model: int = 64
    num_queries: int = 20
    num_classes: int = 3
    num_stages: int = NUM_STAGES
    num_heads: int = 4
    enc_layers: int = 2
    ffn_dim: int = 128
    detach_refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.patch < 1 or self.patch & (self.patch - 1):
            raise ValueError("patch must be a power of two")
        if self.d_model % 8:
            raise ValueError("d_model must be a multiple of 8")

    @property
    def in_channels(self):
        return CHANNELS[self.modality]

    @property
    def grid(self):
        h, w = self.image_size
        return h // self.patch, w // self.patch


class EncoderMemory(NamedTuple):
    features: torch.Tensor  # (B, T, d)
    pos: torch.Tensor  # (T, d)
    centers: torch.Tensor  # (T, 2) normalized token centres (x, y)


class ProposalSet(NamedTuple):
    """Boxes ``(B, n, 4)`` in normalized cxcywh plus class logits ``(B, n, C)``.

    The confidence score is always derived from the logits, so it can never
    disagree with them.
    """

    boxes: torch.Tensor
    logits: torch.Tensor

    @property
    def scores(self) -> torch.Tensor:
        return self.logits.sigmoid().amax(-1)

    @property
    def labels(self) -> torch.Tensor:
        return self.logits.argmax(-1)

    def __len__(self):
        return self.boxes.shape[1]


class Stage(NamedTuple):
    queries: torch.Tensor  # (B, n, d)
    proposals: ProposalSet


def sine_embed(coords: torch.Tensor, dim_per_coord: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of each coordinate in ``[0, 1]``, concatenated."""
    i = torch.arange(dim_per_coord, dtype=coords.dtype, device=coords.device)
    dim_t = temperature ** (2 * torch.div(i, 2, rounding_mode="floor") / dim_per_coord)
    pos = coords[..., None] * (2 * math.pi) / dim_t
    pos = torch.stack([pos[..., 0::2].sin(), pos[..., 1::2].cos()], dim=-1).flatten(-2)
    return pos.flatten(-2)


class Attention(nn.Module):
    """Plain multi-head softmax attention."""

    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, query, key, value, bias=None):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
        if bias is not None:
            att = att + bias
        x = att.softmax(-1) @ v
        b, h, n, dh = x.shape
        return self.out(x.transpose(1, 2).reshape(b, n, h * dh))


class FeedForward(nn.Sequential):
    def __init__(self, d, hidden):
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn):
        super().__init__()
        self.attn = Attention(d, heads)
        self.ffn = FeedForward(d, ffn)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x, pos):
        q = x + pos
        x = self.norm1(x + self.attn(q, q, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    """Self-attention, cross-attention to memory, feed-forward.

    Proposal boxes condition the layer as sinusoidal positional encodings
    of ``(cx, cy, w, h)`` added to the queries, and as a Gaussian bias on the
    cross-attention logits centred on each box (width set per head by a
    learned scale).
    """

    def __init__(self, d, heads, ffn, detach_refine=True):
        super().__init__()
        self.detach_refine = detach_refine
        self.spatial_scale = nn.Parameter(torch.ones(heads))
        self.box_pos = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.self_attn = Attention(d, heads)
        self.cross_attn = Attention(d, heads)
        self.ffn = FeedForward(d, ffn)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, memory: EncoderMemory, queries: torch.Tensor, proposals: ProposalSet) -> torch.Tensor:
        boxes = proposals.boxes.detach() if self.detach_refine else proposals.boxes
        d = queries.shape[-1]
        qpos = self.box_pos(sine_embed(boxes, d // 4))
        q = queries + qpos
        x = self.norm1(queries + self.self_attn(q, q, queries))
        bias = self.spatial_bias(boxes, memory.centers)
        x = self.norm2(x + self.cross_attn(x + qpos, memory.features + memory.pos, memory.features, bias))
        return self.norm3(x + self.ffn(x))


    def spatial_bias(self, boxes, centers):
        """``(B, heads, n, T)`` log-Gaussian of token centres around each box."""
        c = centers.to(boxes.dtype)
        half = boxes[..., None, 2:] / 2 + 1e-3
        dist = ((c[None, None] - boxes[..., None, :2]) / half).pow(2).sum(-1)  # (B, n, T)
        return -0.5 * self.spatial_scale.abs()[None, :, None, None] * dist[:, None]


class PredictionHead(nn.Module):
    """Class logits plus an inverse-sigmoid box delta per query."""

    def __init__(self, d, num_classes, detach_refine=True, prior_prob=0.01):
        super().__init__()
        self.detach_refine = detach_refine
        self.cls = nn.Linear(d, num_classes)
        self.box = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU(), nn.Linear(d, 4))
        nn.init.constant_(self.cls.bias, -math.log((1 - prior_prob) / prior_prob))
        nn.init.zeros_(self.box[-1].weight)
        nn.init.zeros_(self.box[-1].bias)

    def refine(self, prev_boxes, delta):
        ref = prev_boxes.detach() if self.detach_refine else prev_boxes
        return (inverse_sigmoid(ref) + delta).sigmoid()

    def forward(self, queries: torch.Tensor, proposals: ProposalSet) -> ProposalSet:
        return ProposalSet(self.refine(proposals.boxes, self.box(queries)), self.cls(queries))


def _anchor_grid(n):
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    boxes = []
    for k in range(n):
        r, c = divmod(k, cols)
        boxes.append([(c + 0.5) / cols, (r + 0.5) / rows, 0.25, 0.25])
    return torch.tensor(boxes)


class BranchDetector(nn.Module):
    """Self-contained detector for one modality."""

    def __init__(self, config: DetectorConfig | None = None, **overrides):
        super().__init__()
        config = config or DetectorConfig(**overrides)
        self.config = config
        d = config.d_model
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            layers, width = [], config.in_channels
            n_down = int(math.log2(config.patch))
            for s in range(n_down):
                out = d if s == n_down - 1 else min(d, 32 * 2 ** s)
                layers += [nn.Conv2d(width, out, 3, stride=2, padding=1), nn.ReLU()]
                width = out
            if n_down == 0:
                layers += [nn.Conv2d(width, d, 1)]
            self.backbone = nn.Sequential(*layers)
            self.encoder = nn.ModuleList(
                EncoderLayer(d, config.num_heads, config.ffn_dim) for _ in range(config.enc_layers)
            )
            self.query_content = nn.Parameter(torch.randn(config.num_queries, d) * 0.1)
            self.anchor_logits = nn.Parameter(inverse_sigmoid(_anchor_grid(config.num_queries)))
            self.decoders = nn.ModuleList(
                DecoderLayer(d, config.num_heads, config.ffn_dim, config.detach_refine)
                for _ in range(config.num_stages)
            )
            self.heads = nn.ModuleList(
                PredictionHead(d, config.num_classes, config.detach_refine) for _ in range(config.num_stages)
            )
        gh, gw = config.grid
        ys, xs = torch.meshgrid(
            (torch.arange(gh) + 0.5) / gh, (torch.arange(gw) + 0.5) / gw, indexing="ij"
        )
        centers = torch.stack([xs, ys], -1).view(-1, 2)
        self.register_buffer("memory_centers", centers, persistent=False)
        self.register_buffer("memory_pos", sine_embed(centers, d // 2), persistent=False)

    @property
    def modality(self):
        return self.config.modality

    @property
    def num_stages(self):
        return self.config.num_stages

    def _dtype(self):
        return self.query_content.dtype

    def as_images(self, images) -> torch.Tensor:
        """Coerce ``(H, W, C)`` or ``(B, H, W, C)`` arrays to a batched tensor."""
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        x = x.to(self._dtype())
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise ValueError(f"expected (B, H, W, C) images, got shape {tuple(x.shape)}")
        return x

    def extract_memory(self, images) -> EncoderMemory:
        x = self.as_images(images)
        b, h, w, c = x.shape
        p = self.config.patch
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} is not divisible by patch {p}")
        if (h, w) != self.config.image_size:
            raise ValueError(f"image size {h}x{w} does not match configured {self.config.image_size}")
        if c != self.config.in_channels:
            raise ValueError(f"{self.modality} branch expects {self.config.in_channels} channels, got {c}")
        feats = self.backbone(x.permute(0, 3, 1, 2)).flatten(2).transpose(1, 2)
        pos = self.memory_pos.to(feats.dtype)
        for layer in self.encoder:
            feats = layer(feats, pos)
        return EncoderMemory(feats, pos, self.memory_centers)

    def init_queries(self, batch_size: int = 1) -> tuple[torch.Tensor, ProposalSet]:
        n, c = self.config.num_queries, self.config.num_classes
        queries = self.query_content[None].expand(batch_size, -1, -1)
        boxes = self.anchor_logits.sigmoid()[None].expand(batch_size, -1, -1)
        logits = torch.full((batch_size, n, c), EMPTY_LOGIT, dtype=boxes.dtype)
        return queries, ProposalSet(boxes, logits)

    def decode_stage(self, i, memory, queries, proposals) -> Stage:
        """One application of decoder ``i`` followed by head ``i``."""
        q = self.decoders[i](memory, queries, proposals)
        return Stage(q, self.heads[i](q, proposals))

    def forward_single(self, images) -> list[Stage]:
        memory = self.extract_memory(images)
        queries, proposals = self.init_queries(memory.features.shape[0])
        stages = []
        for i in range(self.num_stages):
            stage = self.decode_stage(i, memory, queries, proposals)
            stages.append(stage)
            queries, proposals = stage
        return stages

    forward = forward_single

    # parameter bookkeeping

    FROZEN_PREFIXES = ("backbone.", "encoder.")

    def frozen_parameters(self):
        return {k: v for k, v in self.named_parameters() if k.startswith(self.FROZEN_PREFIXES)}

    def trainable_in_joint(self):
        return {k: v for k, v in self.named_parameters() if not k.startswith(self.FROZEN_PREFIXES)}

    def metadata(self):
        cfg = asdict(self.config)
        cfg["image_size"] = list(cfg["image_size"])
        return {"kind": "branch", "modality": self.modality, "d": cfg["d_model"],
                "N": cfg["num_queries"], "C": cfg["num_classes"], "stages": cfg["num_stages"],
                "config": cfg}

    def arrays(self, prefix=""):
        return {prefix + k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_arrays(self, arrays, prefix=""):
        state = self.state_dict()
        missing = [k for k in state if prefix + k not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        with torch.no_grad():
            for k, v in state.items():
                v.copy_(torch.from_numpy(np.asarray(arrays[prefix + k])))

    def save(self, path):
        save_archive(path, self.arrays(), self.metadata())

    @classmethod
    def load(cls, path):
        arrays, meta = load_archive(path)
        if meta.get("kind") != "branch":
            raise ValueError(f"{path} is not a branch checkpoint")
        det = cls(DetectorConfig(**meta["config"]))
        det = det.to(torch.from_numpy(next(iter(arrays.values()))).dtype)
        det.load_arrays(arrays)
        return det
