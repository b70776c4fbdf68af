"""Registration network: strided conv encoder, learned 2-D positional
encodings, self/cross attention blocks, and the affine and deformation heads
chained into the global + local cascade.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .transform import (
    DEFAULT_INTENSITIES,
    affine_coordinate_map,
    affine_from_params,
    compose_coordinate_map,
    warp_affine,
    warp_field,
)

STRIDES = (32, 16, 8, 4)


@dataclass
class RegnetConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    n_steps: int = 2
    window_grid: int = 4
    intensities: tuple = DEFAULT_INTENSITIES
    image_size: tuple = (64, 64)
    dropout: float = 0.1
    ffn_dim: int = 128
    mlp_hidden: int = 128
    channels: tuple = (16, 32, 64, 64)
    transform: str = "affine"

    def validate(self) -> None:
        H, W = self.image_size
        if H < 32 or W < 32:
            raise ValueError("registration needs images of at least 32 px per side")
        if H % 32 or W % 32:
            raise ValueError("image size must be a multiple of 32")
        if self.d_model % 2 or self.d_model % self.n_heads:
            raise ValueError("d_model must be even and divisible by n_heads")
        R = self.window_grid
        for s in (8, 4):
            if (H // s) % R or (W // s) % R:
                raise ValueError(f"window grid {R} does not divide the stride-{s} feature map")
        if min(self.n_layers, self.n_steps, R) < 1:
            raise ValueError("n_layers, n_steps and window_grid must be positive")
        if self.transform != "affine":
            raise NotImplementedError("only the affine global transform is implemented")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensities"] = list(self.intensities)
        d["image_size"] = list(self.image_size)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegnetConfig":
        d = dict(d)
        for k in ("intensities", "image_size", "channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _conv(cin, cout, stride):
    conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
    nn.init.zeros_(conv.bias)
    # normalisation keeps pair-dependent signal alive through the deep strided stack
    return nn.Sequential(conv, nn.GroupNorm(min(4, cout), cout), nn.ReLU())


class Encoder(nn.Module):
    """Four-level strided conv encoder over the concatenated pair."""

    def __init__(self, cfg: RegnetConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.channels
        self.stem = nn.Sequential(_conv(2, c1, 2), _conv(c1, c1, 2))  # stride 4
        self.down8 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1))
        self.down16 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1))
        self.down32 = nn.Sequential(_conv(c3, c4, 2), _conv(c4, c4, 1))
        self.proj = nn.ModuleList(nn.Conv2d(c, cfg.d_model, 1) for c in (c4, c3, c2, c1))

    def forward(self, src, dst):
        if src.shape != dst.shape:
            raise ValueError("source and target images must have equal shapes")
        if min(src.shape[-2:]) < 32:
            raise ValueError("registration needs images of at least 32 px per side")
        x = torch.cat([src, dst], 1)
        f4 = self.stem(x)
        f3 = self.down8(f4)
        f2 = self.down16(f3)
        f1 = self.down32(f2)
        return [p(f) for p, f in zip(self.proj, (f1, f2, f3, f4))]


class PositionalEncoding2D(nn.Module):
    """Concatenated learned row and column embeddings."""

    def __init__(self, height, width, d_model, init_std=0.02):
        super().__init__()
        self.row = nn.Parameter(torch.randn(height, d_model // 2) * init_std)
        self.col = nn.Parameter(torch.randn(width, d_model // 2) * init_std)

    def forward(self):
        H, W = self.row.shape[0], self.col.shape[0]
        row = self.row[:, None, :].expand(H, W, -1)
        col = self.col[None, :, :].expand(H, W, -1)
        return torch.cat([row, col], -1)  # (H, W, d)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, n_heads, dropout=0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by the number of heads")
        self.h = n_heads
        self.dk = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, q, k, v):
        B, Lq, D = q.shape
        Lk = k.shape[1]
        if k.shape[-1] != D or v.shape[-1] != D or v.shape[1] != Lk:
            raise ValueError("attention dimension mismatch")
        Q = self.wq(q).view(B, Lq, self.h, self.dk).transpose(1, 2)
        K = self.wk(k).view(B, Lk, self.h, self.dk).transpose(1, 2)
        V = self.wv(v).view(B, Lk, self.h, self.dk).transpose(1, 2)
        scores = Q @ K.transpose(-2, -1) / math.sqrt(self.dk)
        attn = self.drop(torch.softmax(scores, -1))
        out = (attn @ V).transpose(1, 2).reshape(B, Lq, D)
        return self.wo(out)


class AttentionBlock(nn.Module):
    """Post-norm transformer block; cross-attention when a memory is given."""

    def __init__(self, d_model, n_heads, ffn_dim, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_dim, d_model))
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory=None):
        kv = x if memory is None else memory
        x = self.norm1(x + self.drop(self.attn(x, kv, kv)))
        return self.norm2(x + self.drop(self.ffn(x)))


class FusionLayer(nn.Module):
    """Self-attention on both branches, then the high-resolution branch
    queries the low-resolution one."""

    def __init__(self, cfg: RegnetConfig):
        super().__init__()
        args = (cfg.d_model, cfg.n_heads, cfg.ffn_dim, cfg.dropout)
        self.sa_low = AttentionBlock(*args)
        self.sa_high = AttentionBlock(*args)
        self.ca = AttentionBlock(*args)

    def forward(self, low, high):
        low = self.sa_low(low)
        high = self.sa_high(high)
        return low, self.ca(high, low)


def _tokens(feat, pe):
    # (B, C, H, W) + (H, W, C) -> (B, H*W, C)
    return (feat.permute(0, 2, 3, 1) + pe).flatten(1, 2)


def _windows(seq, H, W, R):
    # (B, H*W, C) -> (B*R*R, (H/R)*(W/R), C), blocked windows
    B, _, C = seq.shape
    h, w = H // R, W // R
    x = seq.view(B, R, h, R, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B * R * R, h * w, C)


def _unwindow(seq, B, H, W, R):
    h, w = H // R, W // R
    C = seq.shape[-1]
    x = seq.view(B, R, R, h, w, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H * W, C)


class GlobalHead(nn.Module):
    def __init__(self, cfg: RegnetConfig):
        super().__init__()
        H, W = cfg.image_size
        self.cfg = cfg
        self.pe1 = PositionalEncoding2D(H // 32, W // 32, cfg.d_model)
        self.pe2 = PositionalEncoding2D(H // 16, W // 16, cfg.d_model)
        self.layers = nn.ModuleList(FusionLayer(cfg) for _ in range(cfg.n_layers))
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, 6))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def raw(self, pyramid):
        f1, f2 = pyramid[0], pyramid[1]
        low, high = _tokens(f1, self.pe1()), _tokens(f2, self.pe2())
        for layer in self.layers:
            low, high = layer(low, high)
        # float32 tanh can round to exactly +/-1, which would make the shear singular
        return torch.tanh(self.mlp(high.mean(1))).clamp(-1 + 1e-6, 1 - 1e-6)

    def forward(self, pyramid):
        return affine_from_params(self.raw(pyramid), self.cfg.intensities)


class LocalHead(nn.Module):
    def __init__(self, cfg: RegnetConfig):
        super().__init__()
        H, W = cfg.image_size
        self.cfg = cfg
        self.pe3 = PositionalEncoding2D(H // 8, W // 8, cfg.d_model)
        self.pe4 = PositionalEncoding2D(H // 4, W // 4, cfg.d_model)
        self.layers = nn.ModuleList(FusionLayer(cfg) for _ in range(cfg.n_layers))
        self.out = nn.Linear(cfg.d_model, 2)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, pyramid):
        f3, f4 = pyramid[2], pyramid[3]
        B = f3.shape[0]
        R = self.cfg.window_grid
        H3, W3 = f3.shape[-2:]
        H4, W4 = f4.shape[-2:]
        if H3 % R or W3 % R or H4 % R or W4 % R:
            raise ValueError("window grid does not divide the feature maps")
        low = _windows(_tokens(f3, self.pe3()), H3, W3, R)
        high = _windows(_tokens(f4, self.pe4()), H4, W4, R)
        for layer in self.layers:
            low, high = layer(low, high)
        disp = self.out(_unwindow(high, B, H4, W4, R))  # (B, H4*W4, 2)
        disp = disp.transpose(1, 2).reshape(B, 2, H4, W4)
        H, W = H4 * 4, W4 * 4
        return F.interpolate(disp, size=(H, W), mode="bilinear", align_corners=False)


class CascadeOutput(NamedTuple):
    affine: torch.Tensor  # (B, 2, 3)
    fields: list  # N_steps x (B, 2, H, W)
    warped_affine: torch.Tensor  # (B, 1, H, W)
    warped: list  # N_steps x (B, 1, H, W)
    coord_maps: list  # N_steps x (B, H, W, 2): composite source coordinates after each step


class RegistrationNet(nn.Module):
    def __init__(self, cfg: RegnetConfig | None = None):
        super().__init__()
        cfg = cfg or RegnetConfig()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.global_head = GlobalHead(cfg)
        self.local_head = LocalHead(cfg)

    def encode(self, src, dst):
        return self.encoder(src, dst)

    def forward(self, src, dst, n_steps: int | None = None) -> CascadeOutput:
        """Run the cascade on ``(B, 1, H, W)`` pairs."""
        n_steps = self.cfg.n_steps if n_steps is None else n_steps
        H, W = src.shape[-2:]
        A = self.global_head(self.encode(src, dst))
        current = warp_affine(src, A)
        warped_affine = current
        coord = affine_coordinate_map(A, H, W)
        fields, warped, coords = [], [], []
        for _ in range(n_steps):
            phi = self.local_head(self.encode(current, dst))
            current = warp_field(current, phi)
            coord = compose_coordinate_map(coord, phi)
            fields.append(phi)
            warped.append(current)
            coords.append(coord)
        return CascadeOutput(A, fields, warped_affine, warped, coords)
