"""Differentiation helpers on top of torch's reverse-mode tape.

Provides the guarded ``backward`` entry point, the Adam variant used for
both training stages, a central finite-difference checker, seeded dropout
and the ``.ckpt`` named-tensor archive.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

__all__ = [
    "DifferentiationError",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "finite_difference_grad",
    "gradient_check",
    "seeded_dropout",
    "save_checkpoint",
    "load_checkpoint",
]


class DifferentiationError(RuntimeError):
    pass


def backward(loss: torch.Tensor, name: str | None = None) -> None:
    """Populate ``.grad`` of every leaf that requires grad, then free the graph."""
    if loss.numel() != 1:
        raise DifferentiationError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss.detach()).all():
        origin = name or (loss.grad_fn.name() if loss.grad_fn is not None else "leaf")
        raise DifferentiationError(f"non-finite loss produced by {origin}")
    loss.backward()


@dataclass
class AdamState:
    beta1: float = 0.99
    beta2: float = 0.0
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Weight decay is added to the gradient."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return params


class Adam:
    """Minimal optimiser facade over :func:`adam_step` with an adjustable ``lr``."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float, betas=(0.99, 0.0), eps=1e-8, weight_decay=1e-4):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


def finite_difference_grad(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], index: int, eps: float = 1e-4):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``."""
    x = inputs[index].detach().clone()
    args = [a.detach() if isinstance(a, torch.Tensor) else a for a in inputs]
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            args[index] = x
            up = float(fn(*args))
            flat[k] = orig - eps
            down = float(fn(*args))
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
    return grad


def gradient_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-4) -> float:
    """Worst norm-wise relative error between autograd and central differences.

    Every floating input is checked; inputs should be ``float64``.
    """
    worst = 0.0
    for i, a in enumerate(inputs):
        if not (isinstance(a, torch.Tensor) and a.is_floating_point()):
            continue
        leaves = [t.detach().clone().requires_grad_(j == i) if isinstance(t, torch.Tensor) else t for j, t in enumerate(inputs)]
        out = fn(*leaves)
        (analytic,) = torch.autograd.grad(out, leaves[i], allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(a)
        numeric = finite_difference_grad(fn, list(inputs), i, eps)
        scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        worst = max(worst, (analytic - numeric).norm().item() / scale)
    return worst


def seeded_dropout(x: torch.Tensor, p: float, generator: torch.Generator, training: bool = True) -> torch.Tensor:
    """Inverted dropout with a mask drawn from ``generator``."""
    if not training or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1 - p)


_MAGIC = b"MMCKPT1\n"


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor]) -> None:
    """Write named tensors as little-endian float32 with a JSON manifest.

    Layout: magic, ``<u4`` manifest length, manifest bytes, payload. Offsets
    in the manifest are byte offsets into the payload.
    """
    manifest, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(manifest, separators=(",", ":")).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    (n,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    manifest = json.loads(data[pos : pos + n])
    payload = data[pos + n :]
    out = {}
    for entry in manifest:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        out[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return out
