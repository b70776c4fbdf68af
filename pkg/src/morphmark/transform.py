"""Spatial transforms: the parametrised affine, dense deformation fields,
their action on images and landmark sets, and random perspective warps.

Both warps are *backward*: the output pixel ``u`` fetches the source at
``map(u)``. Affine matrices act on normalised coordinates in ``[-1, 1]``
(corner-aligned: pixel 0 maps to -1, pixel ``W - 1`` to +1). Fields are
``(B, 2, H, W)`` tensors holding ``(dx, dy)`` in pixels.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch

from .grid import pixel_grid, sample

__all__ = [
    "SingularTransformError",
    "DEFAULT_INTENSITIES",
    "affine_from_params",
    "identity_affine",
    "invert_affine",
    "compose_affine",
    "pixel_affine_to_normalized",
    "affine_coordinate_map",
    "warp_affine",
    "apply_affine_points",
    "warp_field",
    "apply_field_points",
    "compose_coordinate_map",
    "random_perspective",
    "homography_coordinate_map",
    "apply_homography_points",
    "save_dfield",
    "load_dfield",
]

# (sf_x, sf_y, rot, sh)
DEFAULT_INTENSITIES = (1.0, 1.0, math.pi / 2, math.pi / 2)

_SINGULAR_TOL = 1e-8


class SingularTransformError(ValueError):
    """Raised when an affine transform cannot be inverted."""


def affine_from_params(o, intensities=DEFAULT_INTENSITIES) -> torch.Tensor:
    """Build the ``(..., 2, 3)`` affine matrix from raw outputs ``o`` in (-1, 1).

    ``o = (t_x, t_y, ds_x, ds_y, rot, shear)`` relative changes, scaled by
    ``intensities = (sf_x, sf_y, rot, sh)``.
    """
    o = torch.as_tensor(o)
    if not o.is_floating_point():
        o = o.to(torch.get_default_dtype())
    sf_x, sf_y, rot, sh = intensities
    if min(intensities) <= 0:
        raise ValueError("transform intensities must be positive")
    tx, ty = o[..., 0], o[..., 1]
    sx = 1 + o[..., 2] * sf_x
    sy = 1 + o[..., 3] * sf_y
    alpha = o[..., 4] * rot
    beta = o[..., 5] * sh
    if bool((beta.detach().abs() >= math.pi / 2).any()):
        raise ValueError("shear angle must satisfy |beta| < pi/2")
    ca, sa, tb = torch.cos(alpha), torch.sin(alpha), torch.tan(beta)
    row0 = torch.stack([sx * ca, sx * (ca * tb + sa), tx], -1)
    row1 = torch.stack([-sy * sa, sy * (-sa * tb + ca), ty], -1)
    return torch.stack([row0, row1], -2)


def identity_affine(batch: int = 1, dtype=None) -> torch.Tensor:
    eye = torch.eye(2, 3, dtype=dtype or torch.get_default_dtype())
    return eye.expand(batch, 2, 3).clone()


def invert_affine(A: torch.Tensor) -> torch.Tensor:
    """Closed-form inverse of ``(..., 2, 3)`` affine matrices."""
    a, b, t1 = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    c, d, t2 = A[..., 1, 0], A[..., 1, 1], A[..., 1, 2]
    det = a * d - b * c
    if bool((det.detach().abs() < _SINGULAR_TOL).any()):
        raise SingularTransformError("affine transform is singular (|det| < 1e-8)")
    ia, ib, ic, id_ = d / det, -b / det, -c / det, a / det
    it1 = -(ia * t1 + ib * t2)
    it2 = -(ic * t1 + id_ * t2)
    row0 = torch.stack([ia, ib, it1], -1)
    row1 = torch.stack([ic, id_, it2], -1)
    return torch.stack([row0, row1], -2)


def compose_affine(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Matrix of ``u -> outer(inner(u))``."""
    lin = outer[..., :, :2] @ inner[..., :, :2]
    t = (outer[..., :, :2] @ inner[..., :, 2:]).squeeze(-1) + outer[..., :, 2]
    return torch.cat([lin, t[..., None]], -1)


def _scale_vectors(height, width, dtype, device=None):
    half = torch.tensor([(width - 1) / 2.0, (height - 1) / 2.0], dtype=dtype, device=device)
    return half, half.clone()


def _to_normalized(p, height, width):
    half, centre = _scale_vectors(height, width, p.dtype, p.device)
    return (p - centre) / half


def _to_pixels(n, height, width):
    half, centre = _scale_vectors(height, width, n.dtype, n.device)
    return n * half + centre


def pixel_affine_to_normalized(M, height: int, width: int) -> torch.Tensor:
    """Convert a pixel-space ``(..., 2, 3)`` map into normalised coordinates."""
    M = torch.as_tensor(M)
    half, centre = _scale_vectors(height, width, M.dtype, M.device)
    D = torch.diag(half)
    Dinv = torch.diag(1 / half)
    lin = Dinv @ M[..., :, :2] @ D
    t = Dinv @ ((M[..., :, :2] @ centre) + M[..., :, 2] - centre)[..., None]
    return torch.cat([lin, t], -1)


def _apply_affine(A: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    # A: (B, 2, 3); n: (B, ..., 2)
    B = A.shape[0]
    flat = n.reshape(B, -1, 2)
    out = flat @ A[:, :, :2].transpose(1, 2) + A[:, None, :, 2]
    return out.reshape(n.shape)


def affine_coordinate_map(A: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Pixel coordinates each output pixel samples from: ``(B, H, W, 2)``."""
    grid = pixel_grid(height, width, A.dtype, A.device)
    n = _to_normalized(grid, height, width).expand(A.shape[0], height, width, 2)
    return _to_pixels(_apply_affine(A, n), height, width)


def _as_batch(images):
    images = torch.as_tensor(images)
    squeeze = images.ndim
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    return images, squeeze


def _restore(out, ndim):
    if ndim == 2:
        return out[0, 0]
    if ndim == 3:
        return out[:, 0]
    return out


def warp_affine(images, A) -> torch.Tensor:
    """Backward-warp images by affine ``A``.

    ``images``: ``(H, W)``, ``(B, H, W)`` or ``(B, C, H, W)``; ``A``: ``(2, 3)``
    or ``(B, 2, 3)``.
    """
    x, ndim = _as_batch(images)
    A = torch.as_tensor(A, dtype=x.dtype)
    if A.ndim == 2:
        A = A.expand(x.shape[0], 2, 3)
    H, W = x.shape[-2:]
    return _restore(sample(x, affine_coordinate_map(A, H, W)), ndim)


def apply_affine_points(points, A, height: int, width: int) -> torch.Tensor:
    """Transport ``(N, 2)`` / ``(B, N, 2)`` landmarks along with ``warp_affine``.

    The image warp is backward, so points move through the inverse map: a
    landmark on a feature of the source lands on the same feature of the
    warped image.
    """
    points = torch.as_tensor(points)
    if not points.is_floating_point():
        points = points.to(torch.get_default_dtype())
    A = torch.as_tensor(A, dtype=points.dtype)
    squeeze = points.ndim == 2
    if squeeze:
        points = points[None]
    if A.ndim == 2:
        A = A.expand(points.shape[0], 2, 3)
    n = _to_normalized(points, height, width)
    out = _to_pixels(_apply_affine(invert_affine(A), n), height, width)
    return out[0] if squeeze else out


def warp_field(images, field) -> torch.Tensor:
    """Backward warp: ``out(x, y) = img(x + dx, y + dy)``."""
    x, ndim = _as_batch(images)
    field = torch.as_tensor(field, dtype=x.dtype)
    if field.ndim == 3:
        field = field[None]
    if field.shape[-2:] != x.shape[-2:]:
        raise ValueError("deformation field shape does not match image")
    H, W = x.shape[-2:]
    coords = pixel_grid(H, W, x.dtype, x.device) + field.permute(0, 2, 3, 1)
    return _restore(sample(x, coords), ndim)


def apply_field_points(points, field, sign: int = 1) -> torch.Tensor:
    """``p' = p + sign * field(p)`` with the field bilinearly sampled at ``p``."""
    points = torch.as_tensor(points)
    field = torch.as_tensor(field, dtype=points.dtype)
    squeeze = points.ndim == 2
    if squeeze:
        points = points[None]
    if field.ndim == 3:
        field = field[None]
    disp = sample(field, points).permute(0, 2, 1)
    out = points + sign * disp
    return out[0] if squeeze else out


def compose_coordinate_map(coord_map: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Coordinate map of ``warp_field(warp(coord_map), field)``.

    ``coord_map``: ``(B, H, W, 2)`` source coordinates of the previous warp;
    returns the source coordinates fetched after additionally applying the
    backward ``field``.
    """
    H, W = field.shape[-2:]
    coords = pixel_grid(H, W, field.dtype, field.device) + field.permute(0, 2, 3, 1)
    return sample(coord_map.permute(0, 3, 1, 2), coords).permute(0, 2, 3, 1)


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 ``Hm`` with ``Hm @ [src, 1] ~ [dst, 1]`` from four correspondences."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    h = np.linalg.solve(np.array(rows, dtype=np.float64), np.array(rhs, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def _is_convex(quad: np.ndarray) -> bool:
    signs = []
    for k in range(4):
        a, b, c = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        u, v = b - a, c - b
        signs.append(u[0] * v[1] - u[1] * v[0])
    signs = np.array(signs)
    return bool(np.all(signs > 0) or np.all(signs < 0))


def random_perspective(seed, strength: float, height: int, width: int, max_jitter: float = 0.15):
    """Random 8-dof perspective warp and its exact backward field.

    Returns ``(Hm, field)``: ``Hm`` maps output pixel coordinates to source
    coordinates (homogeneous, 3x3 numpy) and ``field`` is the ``(2, H, W)``
    float64 displacement ``Hm(u) - u``. Corner jitter is bounded by
    ``strength * max_jitter * size``.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    corners = np.array([[0, 0], [width - 1, 0], [width - 1, height - 1], [0, height - 1]], dtype=np.float64)
    bound = strength * max_jitter * np.array([width, height], dtype=np.float64)
    while True:
        jitter = rng.uniform(-1.0, 1.0, size=(4, 2)) * bound
        quad = corners + jitter
        if _is_convex(quad):
            break
    Hm = _homography(corners, quad)
    coords = homography_coordinate_map(Hm, height, width)
    grid = np.stack(np.meshgrid(np.arange(width), np.arange(height)), -1).astype(np.float64)
    field = (coords - grid).transpose(2, 0, 1)
    return Hm, field


def homography_coordinate_map(Hm: np.ndarray, height: int, width: int) -> np.ndarray:
    """``(H, W, 2)`` source coordinates for every output pixel."""
    grid = np.stack(np.meshgrid(np.arange(width), np.arange(height)), -1).astype(np.float64)
    return apply_homography_points(grid.reshape(-1, 2), Hm).reshape(height, width, 2)


def apply_homography_points(points, Hm: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    h = p @ Hm[:, :2].T + Hm[:, 2]
    return h[..., :2] / h[..., 2:3]


def save_dfield(path, field) -> None:
    """Write a ``(2, H, W)`` field: ``<u4 H, <u4 W`` then dx plane, dy plane as ``<f4``."""
    f = np.asarray(field.detach().cpu() if isinstance(field, torch.Tensor) else field, dtype="<f4")
    if f.ndim != 3 or f.shape[0] != 2:
        raise ValueError("field must have shape (2, H, W)")
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<II", f.shape[1], f.shape[2]))
        fh.write(np.ascontiguousarray(f).tobytes())


def load_dfield(path) -> np.ndarray:
    data = Path(path).read_bytes()
    H, W = struct.unpack("<II", data[:8])
    arr = np.frombuffer(data[8:], dtype="<f4")
    if arr.size != 2 * H * W:
        raise ValueError(f"{path}: payload size does not match header {H}x{W}")
    return arr.reshape(2, H, W).astype(np.float64)
