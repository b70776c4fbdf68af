"""Registration and heatmap losses.

Image arguments are ``(..., H, W)``; fields are ``(..., 2, H, W)``; heatmap
stacks are ``(..., N, H, W)``. With ``reduction="none"`` a loss returns one
value per index of the leading (batch) dimension.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .grid import edge_magnitude, landmark_mask, sobel_edges
from .transform import warp_affine

C1 = 0.01**2
C2 = 0.03**2


class DegenerateMaskError(ValueError):
    pass


def _reduce(per_pixel: torch.Tensor, reduction: str, event_dims: int) -> torch.Tensor:
    if reduction == "mean":
        return per_pixel.mean()
    if reduction == "none":
        if per_pixel.ndim <= event_dims:
            return per_pixel.mean().reshape(1)
        return per_pixel.flatten(1).mean(1)
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l_global(a, b, reduction="mean"):
    """Mean absolute difference."""
    _check_same(a, b, "l_global")
    return _reduce((a - b).abs(), reduction, 2)


def _box(x: torch.Tensor, window: int) -> torch.Tensor:
    """Uniform ``window x window`` mean over the last two axes, replicate-padded."""
    shape = x.shape
    r = window // 2
    y = F.pad(x.reshape(-1, 1, *shape[-2:]), (r, r, r, r), mode="replicate")
    y = F.avg_pool2d(y, (window, 1), stride=1)
    return F.avg_pool2d(y, (1, window), stride=1).reshape(shape)


def ssim_map(a, b, window: int = 7) -> torch.Tensor:
    """Per-pixel single-scale SSIM with a uniform window, replicate-padded."""
    _check_same(a, b, "ssim_map")
    if window % 2 != 1:
        raise ValueError("SSIM window must be odd")
    moments = _box(torch.stack([a, b, a * a, b * b, a * b]), window)
    mu_a, mu_b, aa, bb, ab = moments.unbind(0)
    var_a = aa - mu_a * mu_a
    var_b = bb - mu_b * mu_b
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def l_sim(a, b, window=7, reduction="mean"):
    return _reduce(1 - ssim_map(a, b, window), reduction, 2)


def l_esim(warped, target, points=None, sigma=3.0, window=7, reduction="mean", mask=None):
    """SSIM loss plus the landmark-masked SSIM loss of the edge maps.

    ``points`` is ``(..., N, 2)``; ``None`` gives a uniform mask. A
    precomputed ``mask`` broadcastable to the images overrides ``points``.
    """
    _check_same(warped, target, "l_esim")
    H, W = warped.shape[-2:]
    plain = 1 - ssim_map(warped, target, window)
    edge = 1 - ssim_map(edge_magnitude(warped), edge_magnitude(target), window)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=warped.dtype).expand_as(warped)
    elif points is None:
        mask = torch.ones_like(warped)
    else:
        points = torch.as_tensor(points, dtype=warped.dtype)
        mask = landmark_mask(points.detach(), H, W, sigma).expand_as(warped)
    msum = mask.sum((-2, -1))
    if bool((msum < 1e-8).any()):
        raise DegenerateMaskError("landmark mask is empty (all landmarks far outside the frame)")
    edge_term = (edge * mask).sum((-2, -1)) / msum
    plain_term = plain.mean((-2, -1))
    per = plain_term + edge_term
    if reduction == "mean":
        return per.mean()
    return per.reshape(-1)


def _field_gradients(field):
    """Forward differences along x and y, last column/row one-sided (backward)."""
    gx = field[..., :, 1:] - field[..., :, :-1]
    gx = torch.cat([gx, gx[..., :, -1:]], -1)
    gy = field[..., 1:, :] - field[..., :-1, :]
    gy = torch.cat([gy, gy[..., -1:, :]], -2)
    return gx, gy


def _smooth_energy(field):
    # (..., H, W): mean of the four squared partials
    gx, gy = _field_gradients(field)
    return (gx**2 + gy**2).sum(-3) / 4.0


def l_smooth(field, reduction="mean"):
    return _reduce(_smooth_energy(field), reduction, 2)


def l_esmooth(field, warped, T=0.1, reduction="mean"):
    """Smoothness energy down-weighted by ``exp(-|edge(warped)|^2 / T)``."""
    if T <= 0:
        raise ValueError("T must be positive")
    gx, gy = sobel_edges(warped)
    weight = torch.exp(-(gx**2 + gy**2) / T)
    return _reduce(_smooth_energy(field) * weight, reduction, 2)


def jacobian_determinant(field):
    gx, gy = _field_gradients(field)
    ux, vx = gx[..., 0, :, :], gx[..., 1, :, :]
    uy, vy = gy[..., 0, :, :], gy[..., 1, :, :]
    return (1 + ux) * (1 + vy) - uy * vx


def l_inv(field, reduction="mean"):
    """Squared hinge on negative Jacobian determinants of ``x + field(x)``."""
    return _reduce(F.relu(-jacobian_determinant(field)) ** 2, reduction, 2)


def l_syn(predicted, truth, reduction="mean"):
    """Mean squared endpoint error."""
    _check_same(predicted, truth, "l_syn")
    return _reduce(((predicted - truth) ** 2).sum(-3), reduction, 2)


@dataclass
class StageOneLossReport:
    global_sim: float
    local_sim: list[float]
    smooth: list[float]
    inv: list[float]
    syn: list[float]
    total: float
    lambda1: float
    lambda2: float
    lambda3: float

    def to_dict(self) -> dict:
        return asdict(self)


def stage1_total(global_sim, local_sims: Sequence, smooths: Sequence, invs: Sequence, syn, lambda1, lambda2, lambda3):
    """Weighted stage-I objective.

    ``total = global + lambda1 * sum_i [local_i + smooth_i + lambda2 * inv_i
    + lambda3 * syn_i]``. ``syn`` may be one value shared by every step or a
    per-step sequence. Returns ``(total, report)``; ``total`` keeps the graph
    when the parts are tensors.
    """
    if min(lambda1, lambda2, lambda3) < 0:
        raise ValueError("loss weights must be nonnegative")
    n = len(local_sims)
    if n < 1 or len(smooths) != n or len(invs) != n:
        raise ValueError("need one local, smooth and inv term per deformation step")
    syns = list(syn) if isinstance(syn, (list, tuple)) else [syn] * n
    if len(syns) != n:
        raise ValueError("syn must be a scalar or have one entry per step")
    total = global_sim
    for loc, sm, inv, sy in zip(local_sims, smooths, invs, syns):
        total = total + lambda1 * (loc + sm + lambda2 * inv + lambda3 * sy)

    def f(v):
        return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

    report = StageOneLossReport(
        global_sim=f(global_sim),
        local_sim=[f(v) for v in local_sims],
        smooth=[f(v) for v in smooths],
        inv=[f(v) for v in invs],
        syn=[f(v) for v in syns],
        total=f(total),
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        lambda3=float(lambda3),
    )
    return total, report


def l_heat(pred, target, reduction="mean"):
    """Heatmap mean squared error over ``N x H x W``."""
    _check_same(pred, target, "l_heat")
    return _reduce((pred - target) ** 2, reduction, 3)


def consistency_mse(pred_hard, pred_easy, easy_to_hard, reduction="mean"):
    """MSE between hard-view maps and easy-view maps carried into the hard view.

    ``easy_to_hard``: ``(B, 2, 3)`` normalised affine applied per channel by
    :func:`warp_affine`.
    """
    carried = warp_affine(pred_easy, easy_to_hard)
    return l_heat(pred_hard, carried, reduction)


def l_con_self(model, images, A_e, A_h, A_e_to_h, reduction="mean"):
    """Self-consistency of one model across an easy and a hard view.

    ``images``: ``(B, 1, H, W)``; the easy branch is a fixed target.
    """
    with torch.no_grad():
        easy = model(warp_affine(images, A_e))
    hard = model(warp_affine(images, A_h))
    return consistency_mse(hard, easy, A_e_to_h, reduction)


def l_con_cross(model_f, model_g, images, A_e, A_h, A_e_to_h, reduction="mean"):
    """Consistency of ``model_f`` on hard views with ``model_g`` on easy views.

    Gradient reaches ``model_f`` only.
    """
    with torch.no_grad():
        easy = model_g(warp_affine(images, A_e))
    hard = model_f(warp_affine(images, A_h))
    return consistency_mse(hard, easy, A_e_to_h, reduction)
