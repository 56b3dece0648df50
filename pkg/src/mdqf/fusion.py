"""Cross-branch query fusion.

At every decoder stage the proposals of both branches are pooled (RGB rows
first, then TIR rows), the ``k`` highest-scoring ones are kept, and the
matching queries are gathered for each branch. Queries crossing over from
the other modality are first passed through a directional adapter; the
adapter runs on *all* queries before selection so every tensor shape
depends only on ``(N, k, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .detector import ProposalSet


class QueryAdapter(nn.Module):
    """Residual two-layer perceptron ``d -> hidden -> d``.

    The output layer starts at zero, so a fresh adapter is the identity map.
    """

    def __init__(self, d, hidden=None, direction="to_rgb", stage=1):
        super().__init__()
        self.d = d
        self.direction = direction
        self.stage = stage
        self.fc1 = nn.Linear(d, hidden or d)
        self.fc2 = nn.Linear(hidden or d, d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, queries):
        if queries.shape[-1] != self.d:
            raise ValueError(f"adapter width {self.d} does not match query width {queries.shape[-1]}")
        return queries + self.fc2(F.gelu(self.fc1(queries)))


class AdapterPair(nn.Module):
    def __init__(self, d, hidden=None, stage=1):
        super().__init__()
        self.to_rgb = QueryAdapter(d, hidden, "to_rgb", stage)
        self.to_tir = QueryAdapter(d, hidden, "to_tir", stage)


@dataclass
class FusionConfig:
    """``k_train`` / ``k_test`` of ``None`` mean twice the per-branch query count ``N``.

    Every stage after the first sees a pool of ``2k`` rows, so ``k`` is fixed
    relative to ``N`` rather than to the pool.
    """

    k_train: int | None = None
    k_test: int | None = None
    adapter_hidden: int | None = None
    postprocess: str = "nms"
    nms_iou: float = 0.5
    topk_n: int = 20
    score_floor: float = 0.05

    def k(self, training: bool, num_queries: int) -> int:
        k = self.k_train if training else self.k_test
        return 2 * num_queries if k is None else int(k)


class FusedState(NamedTuple):
    proposals: ProposalSet  # shared by both branches
    queries_rgb: torch.Tensor
    queries_tir: torch.Tensor
    index: torch.Tensor  # (B, k) positions in the [rgb, tir] pool

    def from_tir(self, n_rgb):
        return self.index >= n_rgb


def adapt(adapter: QueryAdapter, queries: torch.Tensor) -> torch.Tensor:
    return adapter(queries)


def select_topk(p_rgb: ProposalSet, p_tir: ProposalSet, k: int) -> tuple[ProposalSet, torch.Tensor]:
    """Keep the ``k`` best proposals from the pooled ``[rgb, tir]`` set.

    Ordering is by score descending; ties go to RGB before TIR and then to
    the lower index, which is exactly a stable sort over the pooled order.
    """
    pool = p_rgb.boxes.shape[1] + p_tir.boxes.shape[1]
    if not 1 <= k <= pool:
        raise ValueError(f"k={k} outside [1, {pool}]")
    scores = torch.cat([p_rgb.scores, p_tir.scores], dim=1)
    index = torch.sort(scores.detach(), dim=1, descending=True, stable=True).indices[:, :k]
    boxes = _gather_rows(torch.cat([p_rgb.boxes, p_tir.boxes], 1), index)
    logits = _gather_rows(torch.cat([p_rgb.logits, p_tir.logits], 1), index)
    return ProposalSet(boxes, logits), index


def _gather_rows(x, index):
    if index.numel() and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError(f"selection index out of range for {x.shape[1]} rows")
    return torch.gather(x, 1, index[..., None].expand(-1, -1, x.shape[-1]))


def gather_fused_queries(q_rgb, q_tir, adapters: AdapterPair, index):
    """Build both ``2N``-row candidate stacks and index them with the same selection."""
    stack_rgb = torch.cat([q_rgb, adapters.to_rgb(q_tir)], dim=1)
    stack_tir = torch.cat([adapters.to_tir(q_rgb), q_tir], dim=1)
    return _gather_rows(stack_rgb, index), _gather_rows(stack_tir, index)


def fuse(p_rgb, p_tir, q_rgb, q_tir, adapters: AdapterPair, k: int) -> FusedState:
    proposals, index = select_topk(p_rgb, p_tir, k)
    fq_rgb, fq_tir = gather_fused_queries(q_rgb, q_tir, adapters, index)
    return FusedState(proposals, fq_rgb, fq_tir, index)
