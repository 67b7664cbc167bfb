"""Differentiable building blocks: seeded MLPs, gradient checking, checkpoint IO.

Autograd is delegated to torch. Everything here is about making that
substrate reproducible and verifiable: every parameter store is initialized
from its own named seed, and any scalar loss can be compared against central
finite differences.
"""
from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"CSA1"

_ACTIVATIONS = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass, loss or gradient contains NaN/Inf."""


class CheckpointError(ValueError):
    pass


def check_finite(tensor: torch.Tensor, what: str) -> torch.Tensor:
    # any NaN/Inf entry makes the sum non-finite; much cheaper than an elementwise test
    if not torch.isfinite(tensor.detach().sum()):
        raise NonFiniteError(f"non-finite values in {what}")
    return tensor


def derive_seed(base_seed: int, name: str) -> int:
    """Stable per-store seed; independent of Python's hash randomization."""
    state = np.random.SeedSequence([int(base_seed), zlib.crc32(name.encode())])
    return int(state.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class ModuleSpec:
    """Frame-local MLP description.

    ``widths`` lists input, hidden and output widths. ``activation`` is applied
    after every hidden layer, ``out_activation`` after the last one.
    """

    widths: tuple[int, ...]
    activation: str = "relu"
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths}")
        for act in (self.activation, self.out_activation):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def in_features(self) -> int:
        return self.widths[0]

    @property
    def out_features(self) -> int:
        return self.widths[-1]


class MLP(nn.Module):
    """Stack of affine layers applied to the last axis of its input."""

    def __init__(self, spec: ModuleSpec):
        super().__init__()
        self.spec = spec
        self.layers = nn.ModuleList(
            nn.Linear(a, b) for a, b in zip(spec.widths[:-1], spec.widths[1:])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.in_features:
            raise ValueError(
                f"expected last dimension {self.spec.in_features}, got shape {tuple(x.shape)}"
            )
        hidden = _ACTIVATIONS[self.spec.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = hidden(x)
        x = _ACTIVATIONS[self.spec.out_activation](x)
        return check_finite(x, "MLP output")

    @property
    def last(self) -> nn.Linear:
        return self.layers[-1]


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every Linear, in module order."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / np.sqrt(sub.in_features)
                # draw in float32 then cast so double copies match float ones
                w = torch.rand(sub.weight.shape, generator=gen) * (2 * bound) - bound
                b = torch.rand(sub.out_features, generator=gen) * (2 * bound) - bound
                sub.weight.copy_(w)
                sub.bias.copy_(b)
    return module


def zero_last_layer_(mlp: MLP) -> MLP:
    with torch.no_grad():
        mlp.last.weight.zero_()
        mlp.last.bias.zero_()
    return mlp


def build_mlp(spec: ModuleSpec, seed: int) -> MLP:
    return seeded_init_(MLP(spec), seed)


def gradients(module: nn.Module) -> dict[str, torch.Tensor]:
    """Named gradients with zeros for parameters the loss never reached."""
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in module.named_parameters()
    }


def hard_copy_(source: nn.Module, target: nn.Module) -> None:
    target.load_state_dict(source.state_dict())


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckEntry:
    name: str
    rel_error: float
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.rel_error <= self.tol for e in self.entries)

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_error > self.tol]

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def __str__(self):
        lines = [f"grad_check tol={self.tol:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name:<40s} rel_err={e.rel_error:.3e} worst={e.worst_index}")
        return "\n".join(lines)


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, nn.Module):
        return list(params.named_parameters())
    if isinstance(params, Mapping):
        return list(params.items())
    return list(params)


def grad_check(
    params: nn.Module | Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    loss_fn: Callable[[], torch.Tensor],
    h: float = 1e-3,
    tol: float = 1e-3,
    analytic: Mapping[str, torch.Tensor] | None = None,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Parameters are perturbed in place and restored. Run the model in float64
    for a meaningful comparison. The relative error of each parameter tensor
    is ``||g_a - g_n|| / max(||g_a||, ||g_n||)``; tensors whose gradient norms
    both fall under ``atol`` count as exact. ``analytic`` overrides the autograd
    gradients, which is how fault injection is tested.
    """
    named = _named(params)
    report = GradCheckReport(tol=tol)
    if not named:
        return report

    if analytic is None:
        tensors = [p for _, p in named]
        loss = loss_fn()
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        analytic = {
            name: (g.detach() if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(named, grads)
        }

    for name, p in named:
        a = analytic[name].detach().to(torch.float64).reshape(-1)
        n = torch.zeros_like(a)
        flat = p.data.view(-1)
        with torch.no_grad():
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                up = float(loss_fn())
                flat[j] = orig - h
                down = float(loss_fn())
                flat[j] = orig
                n[j] = (up - down) / (2 * h)
        diff = (a - n).abs()
        scale = max(a.norm().item(), n.norm().item())
        rel = 0.0 if scale < atol else (a - n).norm().item() / scale
        worst = int(diff.argmax()) if diff.numel() else None
        report.entries.append(
            GradCheckEntry(
                name=name,
                rel_error=rel,
                worst_index=tuple(np.unravel_index(worst, tuple(p.shape))) if worst is not None else None,
                analytic=float(a[worst]) if worst is not None else 0.0,
                numeric=float(n[worst]) if worst is not None else 0.0,
            )
        )
    return report


# ---------------------------------------------------------------------------
# checkpoint files: "CSA1" | u32 manifest length | JSON manifest | f32 payload


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    arrays = OrderedDict(
        (name, np.ascontiguousarray(
            t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype="<f4"))
        for name, t in tensors.items()
    )
    manifest = {
        "params": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for a in arrays.values():
            fh.write(a.tobytes())


def load_checkpoint(path) -> tuple[OrderedDict, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    manifest = json.loads(raw[8:8 + hlen])
    offset = 8 + hlen
    out = OrderedDict()
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return out, manifest["meta"]


def load_state_into(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into ``module``'s parameters; names and shapes must match exactly."""
    own = module.state_dict()
    expected = [prefix + k for k in own]
    present = [k for k in arrays if k.startswith(prefix)] if prefix else list(arrays)
    for key in expected:
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {key!r}")
        if tuple(arrays[key].shape) != tuple(own[key[len(prefix):]].shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {tuple(arrays[key].shape)}, "
                f"model {tuple(own[key[len(prefix):]].shape)}"
            )
    extra = sorted(set(present) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter {extra[0]!r}")
    with torch.no_grad():
        for key, value in own.items():
            value.copy_(torch.from_numpy(arrays[prefix + key]))
