"""Weighted fusion of unimodal features and the task prediction head."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .data import MODALITIES
from .diffcore import ModuleSpec, build_mlp, check_finite, derive_seed, seeded_init_

FUSION_MODES = ("add", "concat")


def apply_actions(f: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Broadcast a per-frame weight [B, T] over the feature axis of [B, T, h]."""
    return f * w.unsqueeze(-1)


def fuse(weighted: dict[str, torch.Tensor], mode: str = "add", active=MODALITIES) -> torch.Tensor:
    active = [m for m in MODALITIES if m in active]
    if not active:
        raise ValueError("fusion needs at least one active modality")
    if mode == "add":
        return torch.stack([weighted[m] for m in active]).sum(dim=0)
    if mode == "concat":
        ref = weighted[active[0]]
        return torch.cat(
            [weighted[m] if m in active else torch.zeros_like(ref) for m in MODALITIES], dim=-1)
    raise ValueError(f"unknown fusion mode {mode!r}")


def fused_width(embed_dim: int, mode: str) -> int:
    return embed_dim * (3 if mode == "concat" else 1)


class PredictionHead(nn.Module):
    """Mean-pool over frames, then ``embed -> hidden -> out``.

    Concatenative fusion first goes through an affine adapter ``3 embed -> embed``
    so both modes share the same head.
    """

    def __init__(self, embed_dim: int, out_dim: int, mode: str = "add", hidden_dim: int = 64, seed: int = 0):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.out_dim = out_dim
        self.adapter = None
        if mode == "concat":
            self.adapter = seeded_init_(nn.Linear(3 * embed_dim, embed_dim), derive_seed(seed, "head.adapter"))
        self.mlp = build_mlp(ModuleSpec((embed_dim, hidden_dim, out_dim)), derive_seed(seed, "head.mlp"))

    def forward(self, joint: torch.Tensor) -> torch.Tensor:
        if self.adapter is not None:
            joint = self.adapter(joint)
        out = self.mlp(joint.mean(dim=1))
        return out[:, 0] if self.out_dim == 1 else out


class FrameGate(nn.Module):
    """Learned per-frame sigmoid gate on fused features; starts at 0.5 everywhere."""

    def __init__(self, width: int):
        super().__init__()
        self.proj = nn.Linear(width, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, joint: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.proj(joint))[..., 0]


def mean_absolute_error(pred, truth):
    """Shared by the MSA training loss and the MAE metric (numpy or torch)."""
    return abs(pred - truth).mean()


def loss_prediction(pred: torch.Tensor, labels: torch.Tensor, task: str) -> torch.Tensor:
    if task == "msa":
        return check_finite(mean_absolute_error(pred, labels.to(pred.dtype)), "L_p")
    if task == "mer":
        labels = labels.long()
        if labels.min() < 0 or labels.max() >= pred.shape[-1]:
            raise ValueError(f"class index outside [0, {pred.shape[-1]})")
        return check_finite(F.cross_entropy(pred, labels), "L_p")
    raise ValueError(f"unknown task {task!r}")
