"""Phase-space style reconstruction of a frame sequence through its own Gram
matrix, the interval-weighted redundancy loss, and the similarity-by-interval
diagnostic."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import check_finite

COS_EPS = 1e-8


@dataclass
class ReconstructedSeq:
    f: torch.Tensor   # [B, T, h]
    W: torch.Tensor   # [B, T, T]


W_NORMS = ("none", "softmax", "trace")


def reconstruct(f_s: torch.Tensor, norm: str = "none") -> ReconstructedSeq:
    """W = f_s f_s^T per sample, f = W f_s.

    With ``norm="none"`` the output scales cubically with ``f_s``. ``"softmax"``
    mixes frames with a row softmax of W; ``"trace"`` divides W by its mean
    diagonal, which keeps ``f`` on the scale of ``f_s`` while leaving every
    direction (and so every frame cosine) unchanged. The returned W is the
    matrix actually applied.
    """
    if f_s.ndim != 3 or f_s.shape[1] < 2:
        raise ValueError(f"expected [B, T>=2, h], got {tuple(f_s.shape)}")
    W = f_s @ f_s.transpose(1, 2)
    if norm == "softmax":
        W = torch.softmax(W, dim=-1)
    elif norm == "trace":
        scale = torch.diagonal(W, dim1=1, dim2=2).mean(dim=1)
        W = W / (scale[:, None, None] + COS_EPS)
    elif norm != "none":
        raise ValueError(f"unknown W normalization {norm!r}; expected one of {W_NORMS}")
    f = check_finite(W @ f_s, "reconstructed sequence")
    return ReconstructedSeq(f=f, W=W)


def eta_matrix(seq_len: int, dtype=torch.float32) -> torch.Tensor:
    """eta[p, q] = T - |p - q|."""
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    idx = torch.arange(seq_len)
    return (seq_len - (idx[:, None] - idx[None, :]).abs()).to(dtype)


def cosine_matrix(f: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Pairwise frame cosines [B, T, T]; a zero frame has cosine 0 with everything."""
    norms = torch.linalg.vector_norm(f, dim=-1)
    dots = f @ f.transpose(1, 2)
    return dots / (norms[:, :, None] * norms[:, None, :] + eps)


def loss_dpsr(f: torch.Tensor, use_eta: bool = True) -> torch.Tensor:
    """Mean over ordered off-diagonal frame pairs of eta_pq * (cos + 1) / 2,
    averaged over the batch."""
    T = f.shape[1]
    if T < 2:
        raise ValueError("sequence needs at least two frames")
    terms = (cosine_matrix(f) + 1.0) / 2.0
    off = 1.0 - torch.eye(T, dtype=f.dtype)
    weights = eta_matrix(T, f.dtype) * off if use_eta else off
    per_sample = (terms * weights).sum(dim=(1, 2)) / (T * (T - 1))
    return check_finite(per_sample.mean(), "L_dpsr")


def similarity_by_interval(f) -> np.ndarray:
    """Entry k-1: mean cosine over the batch and all frame pairs with |p - q| = k."""
    f = torch.as_tensor(f, dtype=torch.float64)
    T = f.shape[1]
    if T < 2:
        raise ValueError("sequence needs at least two frames")
    with torch.no_grad():
        cos = cosine_matrix(f)
    return np.array([
        torch.diagonal(cos, offset=k, dim1=1, dim2=2).mean().item() for k in range(1, T)
    ])
