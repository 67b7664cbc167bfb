"""Modality/sentiment disentanglement: per-modality encoder pairs, decoders,
a shared modality classifier and the three disentanglement losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import MODALITIES, MODALITY_LABELS
from .diffcore import ModuleSpec, build_mlp, check_finite, derive_seed


@dataclass
class DisentangledPair:
    f_s: torch.Tensor
    f_m: torch.Tensor
    modality: str

    def __post_init__(self):
        if self.f_s.shape != self.f_m.shape:
            raise ValueError(f"{self.modality}: f_s {tuple(self.f_s.shape)} vs f_m {tuple(self.f_m.shape)}")


@dataclass
class MsdLosses:
    modality: torch.Tensor
    reconstruct: torch.Tensor
    contrast: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.modality + self.reconstruct + self.contrast


def frame_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distance over the feature axis, averaged over batch and frames."""
    return torch.linalg.vector_norm(a - b, dim=-1).mean()


class MSD(nn.Module):
    """Encoders E^s_i, E^m_i, decoders D_i (one set per modality) and shared F^m.

    All maps are frame-local: ``d_i -> hidden -> embed`` for encoders and
    ``2 embed -> hidden -> d_i`` for decoders. The modality classifier sees the
    frame-mean of ``f_m``.
    """

    def __init__(self, widths: dict[str, int], embed_dim: int = 128, hidden_dim: int = 128, seed: int = 0):
        super().__init__()
        self.embed_dim = embed_dim

        def mlp(name, *w):
            return build_mlp(ModuleSpec(tuple(w)), derive_seed(seed, name))

        self.sentiment = nn.ModuleDict(
            {m: mlp(f"msd.sentiment.{m}", widths[m], hidden_dim, embed_dim) for m in MODALITIES})
        self.modality = nn.ModuleDict(
            {m: mlp(f"msd.modality.{m}", widths[m], hidden_dim, embed_dim) for m in MODALITIES})
        self.decoder = nn.ModuleDict(
            {m: mlp(f"msd.decoder.{m}", 2 * embed_dim, hidden_dim, widths[m]) for m in MODALITIES})
        self.classifier = mlp("msd.classifier", embed_dim, hidden_dim, len(MODALITIES))

    def encode_sentiment(self, x: dict[str, torch.Tensor], modalities=MODALITIES) -> dict[str, torch.Tensor]:
        return {m: self.sentiment[m](x[m]) for m in modalities}

    def disentangle(self, x: dict[str, torch.Tensor], modalities=MODALITIES) -> dict[str, DisentangledPair]:
        return {
            m: DisentangledPair(self.sentiment[m](x[m]), self.modality[m](x[m]), m)
            for m in modalities
        }

    def reconstruct_input(self, pair: DisentangledPair) -> torch.Tensor:
        return self.decoder[pair.modality](torch.cat([pair.f_s, pair.f_m], dim=-1))

    def losses(
        self,
        x: dict[str, torch.Tensor],
        pairs: dict[str, DisentangledPair],
        margin: float | None = 10.0,
        use_modality: bool = True,
        use_reconstruct: bool = True,
        use_contrast: bool = True,
    ) -> MsdLosses:
        zero = next(iter(pairs.values())).f_s.new_zeros(())
        return MsdLosses(
            modality=loss_modality(pairs, self.classifier) if use_modality else zero,
            reconstruct=loss_reconstruct(x, pairs, self.reconstruct_input) if use_reconstruct else zero,
            contrast=loss_contrast(pairs, margin) if use_contrast else zero,
        )


def modality_logits(classifier: nn.Module, f_m: torch.Tensor) -> torch.Tensor:
    return classifier(f_m.mean(dim=1))


def loss_modality(pairs: dict[str, DisentangledPair], classifier: nn.Module) -> torch.Tensor:
    """Cross-entropy of the shared classifier against the fixed modality labels,
    averaged over batch and over the modalities present."""
    terms = []
    for m, pair in pairs.items():
        logits = modality_logits(classifier, pair.f_m)
        target = torch.full((logits.shape[0],), MODALITY_LABELS[m], dtype=torch.long)
        terms.append(F.cross_entropy(logits, target))
    return check_finite(torch.stack(terms).mean(), "L_m")


def loss_contrast(pairs: dict[str, DisentangledPair], margin: float | None = 10.0) -> torch.Tensor:
    """Negative f_s/f_m distance; each modality's distance is capped at ``margin``
    (``None`` leaves it unbounded)."""
    terms = []
    for pair in pairs.values():
        d = frame_distance(pair.f_s, pair.f_m)
        if margin is not None:
            d = torch.clamp(d, max=margin)
        terms.append(d)
    return check_finite(-torch.stack(terms).mean(), "L_c")


def loss_reconstruct(x: dict[str, torch.Tensor], pairs: dict[str, DisentangledPair], decode) -> torch.Tensor:
    terms = []
    for m, pair in pairs.items():
        x_hat = decode(pair)
        if x_hat.shape != x[m].shape:
            raise ValueError(f"decoder for {m} produced {tuple(x_hat.shape)}, input is {tuple(x[m].shape)}")
        terms.append(frame_distance(x[m], x_hat))
    return check_finite(torch.stack(terms).mean(), "L_r")


def modality_accuracy(classifier: nn.Module, pairs: dict[str, DisentangledPair]) -> float:
    correct = total = 0
    with torch.no_grad():
        for m, pair in pairs.items():
            pred = modality_logits(classifier, pair.f_m).argmax(dim=-1)
            correct += int((pred == MODALITY_LABELS[m]).sum())
            total += pred.numel()
    return correct / total if total else math.nan
