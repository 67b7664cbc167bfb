"""The assembled network: disentanglement, reconstruction, agents or gate, head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .agents import ActorCritic
from .data import MODALITIES
from .dpsr import reconstruct
from .fusion import FrameGate, PredictionHead, apply_actions, fuse, fused_width
from .msd import MSD, DisentangledPair


@dataclass
class Representation:
    """Per-modality tensors for one batch. ``f`` feeds the agents and fusion."""

    f_s: dict[str, torch.Tensor]
    f: dict[str, torch.Tensor]
    pairs: dict[str, DisentangledPair] | None = None
    W: dict[str, torch.Tensor] | None = None


class CoSANetwork(nn.Module):
    def __init__(self, widths: dict[str, int], out_dim: int, *, fusion: str = "add",
                 embed_dim: int = 128, hidden_dim: int = 128, head_hidden: int = 64,
                 actor_hidden: int = 128, critic_dim: int = 64, critic_ff: int = 128,
                 use_msd: bool = True, use_dpsr: bool = True, use_sac: bool = True,
                 w_norm: str = "none", active=MODALITIES, seed: int = 0):
        super().__init__()
        self.fusion = fusion
        self.use_msd, self.use_dpsr, self.use_sac = use_msd, use_dpsr, use_sac
        self.w_norm = w_norm
        self.active = tuple(m for m in MODALITIES if m in active)
        self.msd = MSD(widths, embed_dim, hidden_dim, seed)
        self.head = PredictionHead(embed_dim, out_dim, fusion, head_hidden, seed)
        self.gate = FrameGate(fused_width(embed_dim, fusion))
        self.ac = ActorCritic(embed_dim, actor_hidden, critic_dim, critic_ff, seed)

    def prediction_parameters(self):
        """Everything updated by the prediction objective (never the agents/critic)."""
        return [*self.msd.parameters(), *self.head.parameters(), *self.gate.parameters()]

    def represent(self, x: dict[str, torch.Tensor]) -> Representation:
        pairs = None
        if self.use_msd:
            pairs = self.msd.disentangle(x, self.active)
            f_s = {m: p.f_s for m, p in pairs.items()}
        else:
            f_s = self.msd.encode_sentiment(x, self.active)
        W = None
        if self.use_dpsr:
            rec = {m: reconstruct(v, self.w_norm) for m, v in f_s.items()}
            f = {m: r.f for m, r in rec.items()}
            W = {m: r.W for m, r in rec.items()}
        else:
            f = dict(f_s)
        ref = f[self.active[0]]
        for m in MODALITIES:
            if m not in f:
                f[m] = torch.zeros_like(ref)
        return Representation(f_s=f_s, f=f, pairs=pairs, W=W)

    def weights(self, f: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Per-frame weights: live policies (no gradient) or the baseline gate."""
        if self.use_sac:
            with torch.no_grad():
                return self.ac.act({m: v.detach() for m, v in f.items()}, self.active)
        g = self.gate(fuse(f, self.fusion, self.active))
        return {m: g for m in MODALITIES}

    def predict_from(self, f: dict[str, torch.Tensor], w: dict[str, torch.Tensor]) -> torch.Tensor:
        weighted = {m: apply_actions(f[m], w[m]) for m in MODALITIES}
        return self.head(fuse(weighted, self.fusion, self.active))

    def joint(self, f, w) -> torch.Tensor:
        return fuse({m: apply_actions(f[m], w[m]) for m in MODALITIES}, self.fusion, self.active)

    def forward(self, x: dict[str, torch.Tensor]) -> torch.Tensor:
        rep = self.represent(x)
        return self.predict_from(rep.f, self.weights(rep.f))
