"""Image-grid primitives: bilinear sampling, Gaussian heatmaps, Sobel edges,
heatmap decoding and the PNG / CSV readers used across the package.

Coordinates are ``(x, y)`` pixels with the origin at the centre of the
top-left pixel, ``x`` to the right and ``y`` downward.
"""

from __future__ import annotations

import csv
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "DegenerateHeatmapWarning",
    "sample",
    "bilinear_sample",
    "pixel_grid",
    "gaussian_heatmap",
    "landmark_mask",
    "sobel_edges",
    "edge_magnitude",
    "decode_landmarks",
    "read_png",
    "write_png",
    "read_landmarks_csv",
    "write_landmarks_csv",
]


class DegenerateHeatmapWarning(UserWarning):
    """A heatmap had no unique peak (all values equal)."""


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    t = torch.as_tensor(np.asarray(x))
    if dtype is not None:
        return t.to(dtype)
    if not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def sample(images: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Batched bilinear sampling with border-replicate padding.

    images: ``(B, C, H, W)``; coords: ``(B, ..., 2)`` pixel ``(x, y)``.
    Returns ``(B, C, ...)``. Differentiable in both arguments; the partials
    are the analytic derivatives of the bilinear interpolant (zero along a
    clamped axis outside the grid).
    """
    B, C, H, W = images.shape
    out_shape = coords.shape[1:-1]
    xy = coords.reshape(B, -1, 2)
    x = xy[..., 0].clamp(0, W - 1)
    y = xy[..., 1].clamp(0, H - 1)
    x0 = torch.floor(x).clamp(max=max(W - 2, 0))
    y0 = torch.floor(y).clamp(max=max(H - 2, 0))
    wx = x - x0
    wy = y - y0
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)

    flat = images.reshape(B, C, H * W)

    def gather(yi, xi):
        idx = (yi * W + xi).unsqueeze(1).expand(B, C, -1)
        return torch.gather(flat, 2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    out = top * (1 - wy) + bottom * wy
    return out.reshape(B, C, *out_shape)


def bilinear_sample(image, coords) -> torch.Tensor:
    """Sample a single ``H x W`` image at ``K`` continuous ``(x, y)`` points."""
    image = _as_tensor(image)
    coords = _as_tensor(coords, image.dtype)
    if not torch.isfinite(coords).all():
        raise ValueError("bilinear_sample: coordinates must be finite")
    if coords.ndim == 1:
        coords = coords.reshape(1, 2)
    out = sample(image[None, None], coords.reshape(1, -1, 2))
    return out.reshape(coords.shape[:-1])


def pixel_grid(height: int, width: int, dtype=None, device=None) -> torch.Tensor:
    """``(H, W, 2)`` tensor holding the ``(x, y)`` coordinate of each pixel."""
    dtype = dtype or torch.get_default_dtype()
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def gaussian_heatmap(points, height: int, width: int, sigma: float) -> torch.Tensor:
    """Unnormalised Gaussian maps, one per landmark: ``(..., N, H, W)``.

    ``points`` has shape ``(..., N, 2)``; the value at pixel ``u`` is
    ``exp(-|u - p|^2 / (2 sigma^2))``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points = _as_tensor(points)
    grid = pixel_grid(height, width, points.dtype, points.device)
    diff = grid - points[..., None, None, :]
    return torch.exp(-(diff**2).sum(-1) / (2.0 * sigma**2))


def landmark_mask(points, height: int, width: int, sigma: float) -> torch.Tensor:
    """Average of the per-landmark Gaussians, ``(..., H, W)``."""
    return gaussian_heatmap(points, height, width, sigma).mean(-3)


_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0


def sobel_edges(image) -> tuple[torch.Tensor, torch.Tensor]:
    """3x3 Sobel responses ``(gx, gy)``, replicate-padded, scaled by 1/8.

    Accepts ``(H, W)`` or any ``(..., H, W)`` batch.
    """
    image = _as_tensor(image)
    shape = image.shape
    x = image.reshape(-1, 1, *shape[-2:])
    kx = _SOBEL_X.to(image.dtype).to(image.device)
    weight = torch.stack([kx, kx.T])[:, None]
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(padded, weight)
    gx = out[:, 0].reshape(shape)
    gy = out[:, 1].reshape(shape)
    return gx, gy


# Largest possible |(gx, gy)| for a [0, 1] image under the 1/8 scaling.
_MAX_EDGE = float(np.sqrt(2.0) * 0.5)


def edge_magnitude(image, eps: float = 1e-12) -> torch.Tensor:
    """Sobel gradient magnitude rescaled to ``[0, 1]``."""
    gx, gy = sobel_edges(image)
    return torch.sqrt(gx**2 + gy**2 + eps) / _MAX_EDGE


def _refine_axis(lo: float, mid: float, hi: float) -> float:
    """Sub-pixel offset of a peak from three samples along one axis.

    Fits a parabola to the log-values (exact for Gaussian peaks); falls back
    to the centre of mass of the nonnegative samples when the log fit is
    undefined.
    """
    if lo > 0 and mid > 0 and hi > 0:
        a, b, c = np.log(lo), np.log(mid), np.log(hi)
        curv = a - 2 * b + c
        if curv < 0:
            return float(np.clip(0.5 * (a - c) / curv, -0.5, 0.5))
    w = np.clip([lo, mid, hi], 0, None)
    s = w.sum()
    if s <= 0:
        return 0.0
    return float(np.clip((w[2] - w[0]) / s, -0.5, 0.5))


def decode_landmarks(heatmaps) -> np.ndarray:
    """Decode ``(N, H, W)`` (or ``(B, N, H, W)``) heatmaps to ``(..., N, 2)``.

    Peak = argmax (ties to the lowest row-major index), refined per axis on
    the 3x3 neighbourhood. A constant map decodes to the grid centre with a
    :class:`DegenerateHeatmapWarning`.
    """
    hm = heatmaps.detach().cpu().numpy() if isinstance(heatmaps, torch.Tensor) else np.asarray(heatmaps)
    hm = hm.astype(np.float64, copy=False)
    lead = hm.shape[:-2]
    H, W = hm.shape[-2:]
    flat = hm.reshape(-1, H, W)
    out = np.empty((flat.shape[0], 2))
    for k, m in enumerate(flat):
        finite = np.isfinite(m)
        if not finite.any():
            raise ValueError("decode_landmarks: heatmap has no finite values")
        m = np.where(finite, m, -np.inf)
        if np.all(m[finite] == m[finite].flat[0]) and finite.all():
            warnings.warn("constant heatmap; returning grid centre", DegenerateHeatmapWarning, stacklevel=2)
            out[k] = ((W - 1) / 2.0, (H - 1) / 2.0)
            continue
        r, c = divmod(int(np.argmax(m)), W)
        dx = _refine_axis(m[r, c - 1], m[r, c], m[r, c + 1]) if 0 < c < W - 1 else 0.0
        dy = _refine_axis(m[r - 1, c], m[r, c], m[r + 1, c]) if 0 < r < H - 1 else 0.0
        out[k] = (c + dx, r + dy)
    return out.reshape(*lead, 2)


def read_png(path) -> np.ndarray:
    """Load an 8-bit grayscale PNG as ``float64`` values in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def write_png(path, image) -> None:
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def read_landmarks_csv(path) -> np.ndarray:
    """Read an ``index,x,y`` CSV into an ``(N, 2)`` array ordered by index."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"index", "x", "y"}:
        raise ValueError(f"{path}: expected header 'index,x,y'")
    rows.sort(key=lambda r: int(r["index"]))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])


def write_landmarks_csv(path, points) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x", "y"])
        for j, (x, y) in enumerate(points):
            w.writerow([j, repr(float(x)), repr(float(y))])
