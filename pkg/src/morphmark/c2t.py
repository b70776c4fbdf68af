"""Stage II: consistency co-teaching of two heatmap detectors on the
exemplar plus noisy pseudo labels.

Each detector ranks the unlabeled batch by its own filter loss (heatmap
error plus self-consistency across an easy and a hard view); the peer
network trains on the small-loss subset. Cross-consistency between one
network's hard view and the other's easy view regularises both.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import Adam, save_checkpoint
from .grid import decode_landmarks, gaussian_heatmap
from .losses import l_heat
from .transform import apply_affine_points, compose_affine, invert_affine, warp_affine


class TrainingError(RuntimeError):
    pass


@dataclass
class C2TConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_fractions: tuple = (0.6, 0.8)
    eps_max: float = 0.8
    eps_ramp_fraction: float = 0.3
    w_self: float = 1.0
    w_cross: float = 1.0
    sigma: float = 3.0
    base_channels: int = 16
    easy_rotation: float = 5.0  # degrees
    easy_scale: float = 0.05
    hard_rotation: float = 20.0
    hard_scale: float = 0.2
    flip: bool = True
    exemplar_in_cross: bool = True
    betas: tuple = (0.99, 0.999)
    weight_decay: float = 1e-4

    @classmethod
    def desk(cls, epochs: int = 20, **overrides) -> "C2TConfig":
        """Small-CPU preset: from-scratch detectors need a lighter momentum and
        smaller batches to leave the flat-heatmap plateau within a few hundred steps."""
        kw = dict(epochs=epochs, batch_size=8, betas=(0.9, 0.999))
        kw.update(overrides)
        return cls(**kw)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.eps_max <= 1:
            raise ValueError("eps_max must lie in [0, 1]")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if min(self.w_self, self.w_cross) < 0:
            raise ValueError("consistency weights must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_fractions"] = list(self.decay_fractions)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "C2TConfig":
        d = dict(d)
        for k in ("decay_fractions", "betas"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def eps_at(epoch: int, cfg: C2TConfig) -> float:
    """Filter rate: linear ramp from 0 to ``eps_max``, then flat."""
    ramp = max(1, int(round(cfg.epochs * cfg.eps_ramp_fraction)))
    return cfg.eps_max * min(1.0, max(epoch, 0) / ramp)


def lr_at(epoch: int, cfg: C2TConfig) -> float:
    n = sum(epoch >= int(math.floor(f * cfg.epochs)) for f in cfg.decay_fractions)
    return cfg.lr * cfg.lr_decay**n


# --- detector

def _block(cin, cout):
    layers = []
    for a, b in ((cin, cout), (cout, cout)):
        conv = nn.Conv2d(a, b, 3, padding=1)
        nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
        nn.init.zeros_(conv.bias)
        layers += [conv, nn.GroupNorm(min(8, b), b), nn.ReLU()]
    return nn.Sequential(*layers)


class Detector(nn.Module):
    """UNet with three pooling and three upsampling levels: image -> N heatmaps."""

    def __init__(self, n_landmarks: int, base: int = 16, tag: str = "f"):
        super().__init__()
        if n_landmarks < 1:
            raise ValueError("detector needs at least one landmark")
        c = [base, base * 2, base * 4, base * 8]
        self.tag = tag
        self.n_landmarks = n_landmarks
        self.inc = _block(1, c[0])
        self.down = nn.ModuleList(_block(c[i], c[i + 1]) for i in range(3))
        self.up = nn.ModuleList(_block(c[i + 1] + c[i], c[i]) for i in reversed(range(3)))
        self.head = nn.Conv2d(c[0], n_landmarks, 1)

    def forward(self, x):
        """``(B, 1, H, W)`` -> ``(B, N, H, W)``; H and W divisible by 8."""
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError("detector input sides must be divisible by 8")
        skips = [self.inc(x)]
        for blk in self.down:
            skips.append(blk(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for blk in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = blk(torch.cat([h, skip], 1))
        return self.head(h)


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- augmentations

def _similarity(rotation_deg, scale, flip=False):
    """Normalised backward-warp matrix of a centred rotation/scale (optionally mirrored)."""
    a = math.radians(rotation_deg)
    c, s = math.cos(a) / scale, math.sin(a) / scale
    fx = -1.0 if flip else 1.0
    return torch.tensor([[c * fx, -s, 0.0], [s * fx, c, 0.0]], dtype=torch.float64)


@dataclass
class AugmentationPair:
    """Easy and hard views as ``(2, 3)`` backward-warp affines.

    ``easy_to_hard`` carries an easy-view map into the hard view:
    ``warp_affine(warp_affine(x, A_e), A_eh) == warp_affine(x, A_h)``.
    """

    easy: torch.Tensor
    hard: torch.Tensor
    flipped: bool = False

    @property
    def easy_to_hard(self) -> torch.Tensor:
        return compose_affine(invert_affine(self.easy), self.hard)

    @classmethod
    def identity(cls) -> "AugmentationPair":
        eye = torch.eye(2, 3, dtype=torch.float64)
        return cls(eye, eye.clone())

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: C2TConfig, allow_flip: bool) -> "AugmentationPair":
        er = rng.uniform(-cfg.easy_rotation, cfg.easy_rotation)
        es = rng.uniform(1 - cfg.easy_scale, 1 + cfg.easy_scale)
        hr = rng.uniform(-cfg.hard_rotation, cfg.hard_rotation)
        hs = rng.uniform(1 - cfg.hard_scale, 1 + cfg.hard_scale)
        flip = bool(allow_flip and rng.random() < 0.5)
        return cls(_similarity(er, es), _similarity(hr, hs, flip), flip)


@dataclass
class Views:
    """Batched view matrices plus the channel permutation for flipped hard views."""

    easy: torch.Tensor  # (B, 2, 3)
    hard: torch.Tensor
    easy_to_hard: torch.Tensor
    hard_perm: torch.Tensor  # (B, N) channel order of each hard view

    @classmethod
    def stack(cls, augs: Sequence[AugmentationPair], n_landmarks: int, permutation=None, dtype=torch.float32):
        ident = torch.arange(n_landmarks)
        perm = torch.as_tensor(permutation) if permutation is not None else ident
        return cls(
            torch.stack([a.easy for a in augs]).to(dtype),
            torch.stack([a.hard for a in augs]).to(dtype),
            torch.stack([a.easy_to_hard for a in augs]).to(dtype),
            torch.stack([perm if a.flipped else ident for a in augs]),
        )


def _permute_channels(maps, perm):
    return torch.gather(maps, 1, perm[:, :, None, None].expand_as(maps))


def carry_easy_to_hard(easy_maps, views: Views):
    """Easy-view heatmaps resampled into the hard view, channels reordered for flips."""
    return _permute_channels(warp_affine(easy_maps, views.easy_to_hard), views.hard_perm)


def view_targets(points, views: Views, height, width, sigma):
    """Heatmap targets for landmarks ``(B, N, 2)`` seen in the easy view."""
    p = apply_affine_points(torch.as_tensor(points, dtype=views.easy.dtype), views.easy, height, width)
    return gaussian_heatmap(p, height, width, sigma)


# --- losses and selection

def _forward_views(model, images, views: Views):
    return model(warp_affine(images, views.easy)), model(warp_affine(images, views.hard))


@torch.no_grad()
def filter_loss(model, images, targets, views: Views, w: float = 1.0):
    """Per-sample ``heat + w * self-consistency``; used for ranking only."""
    easy, hard = _forward_views(model, images, views)
    return _filter_from(easy, hard, targets, views, w)


@torch.no_grad()
def dataset_filter_losses(model, images, points, cfg: C2TConfig, seed: int = 0, w: float | None = None, chunk: int = 32) -> np.ndarray:
    """Filter loss of every ``(image, label)`` pair under one seeded view each.

    ``images``: ``(n, H, W)``; ``points``: ``(n, N, 2)``. Ranking these with
    :func:`small_loss_select` applies the filter to the whole set at once.
    """
    w = cfg.w_self if w is None else w
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    points = torch.as_tensor(np.asarray(points), dtype=torch.float32)
    n, H, W = images.shape
    rng = np.random.default_rng(seed)
    views = _sample_views(rng, n, cfg, points.shape[1], None)
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, n, chunk):
        v = _slice(views, slice(s, s + chunk))
        targets = view_targets(points[s : s + chunk], v, H, W, cfg.sigma)
        out.append(filter_loss(model, images[s : s + chunk, None], targets, v, w))
    model.train(was_training)
    return torch.cat(out).double().numpy()


def _filter_from(easy, hard, targets, views, w):
    heat = l_heat(easy, targets, reduction="none")
    if w == 0:
        return heat
    return heat + w * l_heat(hard, carry_easy_to_hard(easy, views), reduction="none")


def small_loss_select(losses, eps: float, batch_size: int | None = None) -> list[int]:
    """Indices of the ``ceil(eps * batch_size)`` smallest losses, ties to the lower index."""
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    if losses.size == 0:
        raise ValueError("small_loss_select: empty loss list")
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    n = losses.size if batch_size is None else int(batch_size)
    k = min(int(math.ceil(eps * n - 1e-9)), losses.size)
    order = np.argsort(losses, kind="stable")
    return sorted(int(i) for i in order[:k])


@dataclass
class StepReport:
    eps: float
    selected_f: list  # batch positions chosen by f (trains g)
    selected_g: list  # chosen by g (trains f)
    overlap: int
    loss_f: float
    loss_g: float
    heat_f: float
    heat_g: float
    cross_f: float
    cross_g: float

    def to_dict(self):
        return asdict(self)


def c2t_step(
    f: Detector,
    g: Detector,
    opt_f: Adam,
    opt_g: Adam,
    labeled: torch.Tensor,
    labeled_points,
    labeled_views: Views,
    unlabeled: torch.Tensor,
    unlabeled_points,
    unlabeled_views: Views,
    eps: float,
    cfg: C2TConfig,
    update: tuple = ("f", "g"),
) -> StepReport:
    """One co-teaching update of both detectors.

    ``labeled``/``unlabeled``: ``(B, 1, H, W)``; points ``(B, N, 2)``. Each
    network's heatmap loss covers the labeled batch plus the subset chosen by
    its peer; cross-consistency covers every image. ``update`` limits which
    detectors are stepped.
    """
    H, W = unlabeled.shape[-2:]
    nl = labeled.shape[0]
    images = torch.cat([labeled, unlabeled])
    points = torch.cat([torch.as_tensor(labeled_points, dtype=images.dtype), torch.as_tensor(unlabeled_points, dtype=images.dtype)])
    views = Views(
        torch.cat([labeled_views.easy, unlabeled_views.easy]),
        torch.cat([labeled_views.hard, unlabeled_views.hard]),
        torch.cat([labeled_views.easy_to_hard, unlabeled_views.easy_to_hard]),
        torch.cat([labeled_views.hard_perm, unlabeled_views.hard_perm]),
    )
    targets = view_targets(points, views, H, W, cfg.sigma)

    f_easy, f_hard = _forward_views(f, images, views)
    g_easy, g_hard = _forward_views(g, images, views)

    with torch.no_grad():
        filt_f = _filter_from(f_easy[nl:], f_hard[nl:], targets[nl:], _slice(views, nl), cfg.w_self)
        filt_g = _filter_from(g_easy[nl:], g_hard[nl:], targets[nl:], _slice(views, nl), cfg.w_self)
    sel_f = small_loss_select(filt_f.numpy(), eps, unlabeled.shape[0])
    sel_g = small_loss_select(filt_g.numpy(), eps, unlabeled.shape[0])

    def update_loss(easy, hard, peer_easy, peer_sel):
        rows = list(range(nl)) + [nl + i for i in peer_sel]
        heat = l_heat(easy[rows], targets[rows], reduction="none").sum()
        cross_rows = slice(0, None) if cfg.exemplar_in_cross else slice(nl, None)
        carried = carry_easy_to_hard(peer_easy.detach()[cross_rows], _slice(views, cross_rows))
        cross = l_heat(hard[cross_rows], carried, reduction="none").sum()
        return heat + cfg.w_cross * cross, heat, cross

    loss_f, heat_f, cross_f = update_loss(f_easy, f_hard, g_easy, sel_g)
    loss_g, heat_g, cross_g = update_loss(g_easy, g_hard, f_easy, sel_f)
    for name, v in (("f", loss_f), ("g", loss_g)):
        if not torch.isfinite(v.detach()):
            raise TrainingError(f"non-finite stage-II loss for detector {name}")

    total = 0
    if "f" in update:
        total = total + loss_f
    if "g" in update:
        total = total + loss_g
    opt_f.zero_grad()
    opt_g.zero_grad()
    if isinstance(total, torch.Tensor):
        total.backward()
    if "f" in update:
        opt_f.step()
    if "g" in update:
        opt_g.step()
    return StepReport(
        eps=float(eps),
        selected_f=sel_f,
        selected_g=sel_g,
        overlap=len(set(sel_f) & set(sel_g)),
        loss_f=float(loss_f.detach()),
        loss_g=float(loss_g.detach()),
        heat_f=float(heat_f.detach()),
        heat_g=float(heat_g.detach()),
        cross_f=float(cross_f.detach()),
        cross_g=float(cross_g.detach()),
    )


def _slice(views: Views, rows) -> Views:
    if isinstance(rows, int):
        rows = slice(rows, None)
    return Views(views.easy[rows], views.hard[rows], views.easy_to_hard[rows], views.hard_perm[rows])


# --- training

@dataclass
class C2TResult:
    f: Detector
    g: Detector
    log: list
    selections: list = field(default_factory=list)  # per step: (image ids chosen by f, by g)


def _sample_views(rng, n, cfg, n_landmarks, permutation):
    allow_flip = cfg.flip and permutation is not None
    augs = [AugmentationPair.sample(rng, cfg, allow_flip) for _ in range(n)]
    return Views.stack(augs, n_landmarks, permutation)


def train_c2t(
    images,
    pseudo_points,
    exemplar_index: int,
    exemplar_points,
    cfg: C2TConfig | None = None,
    seed: int = 0,
    flip_permutation=None,
    log_path=None,
    callback: Callable | None = None,
) -> C2TResult:
    """Co-train detectors ``f`` and ``g``.

    ``images``: ``(n, H, W)``; ``pseudo_points``: ``(n, N, 2)`` (the
    exemplar's row is ignored in favour of ``exemplar_points``).
    """
    cfg = cfg or C2TConfig()
    cfg.validate()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n, H, W = images.shape
    pseudo = np.asarray(pseudo_points, dtype=np.float64)
    exemplar_points = np.asarray(exemplar_points, dtype=np.float64)
    if pseudo.shape[0] != n:
        raise ValueError("pseudo labels must cover every image")
    if not np.all(np.isfinite(np.delete(pseudo, exemplar_index, 0))):
        raise ValueError("pseudo labels must be finite for every unlabeled image")
    N = exemplar_points.shape[0]
    if flip_permutation is not None and sorted(flip_permutation) != list(range(N)):
        raise ValueError("flip permutation must be a permutation of the landmark indices")

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    f = Detector(N, cfg.base_channels, "f")
    g = Detector(N, cfg.base_channels, "g")
    opt_f = Adam(f.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    opt_g = Adam(g.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)

    unlabeled = np.array([i for i in range(n) if i != exemplar_index])
    ex_img = images[exemplar_index][None, None]
    ex_pts = torch.as_tensor(exemplar_points, dtype=torch.float32)[None]
    entries, selections = [], []
    logf = open(log_path, "w") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            eps = eps_at(epoch, cfg)
            opt_f.lr = opt_g.lr = lr_at(epoch, cfg)
            f.train()
            g.train()
            perm = rng.permutation(unlabeled)
            for s in range(0, len(perm), cfg.batch_size):
                ids = perm[s : s + cfg.batch_size]
                lv = _sample_views(rng, 1, cfg, N, flip_permutation)
                uv = _sample_views(rng, len(ids), cfg, N, flip_permutation)
                rep = c2t_step(
                    f, g, opt_f, opt_g,
                    ex_img, ex_pts, lv,
                    images[ids][:, None], torch.as_tensor(pseudo[ids], dtype=torch.float32), uv,
                    eps, cfg,
                )
                chosen_f = [int(ids[i]) for i in rep.selected_f]
                chosen_g = [int(ids[i]) for i in rep.selected_g]
                selections.append((chosen_f, chosen_g))
                entry = {
                    "epoch": epoch,
                    "step": step,
                    "eps": eps,
                    "lr": opt_f.lr,
                    "n_sel_f": len(chosen_f),
                    "n_sel_g": len(chosen_g),
                    "overlap": rep.overlap,
                    "loss_f": rep.loss_f,
                    "loss_g": rep.loss_g,
                    "heat_f": rep.heat_f,
                    "heat_g": rep.heat_g,
                    "cross_f": rep.cross_f,
                    "cross_g": rep.cross_g,
                    "batch": [int(i) for i in ids],
                    "selected_f": chosen_f,
                    "selected_g": chosen_g,
                }
                entries.append(entry)
                if logf:
                    logf.write(json.dumps(entry) + "\n")
                step += 1
            if callback is not None:
                callback(epoch, f, g)
    finally:
        if logf:
            logf.close()
    f.eval()
    g.eval()
    return C2TResult(f, g, entries, selections)


@torch.no_grad()
def predict(f: Detector, g: Detector | None, images, chunk: int = 64) -> np.ndarray:
    """Decode the mean of both detectors' heatmaps to ``(n, N, 2)`` landmarks."""
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if images.ndim == 2:
        images = images[None]
    modes = [(m, m.training) for m in (f, g) if m is not None]
    for m, _ in modes:
        m.eval()
    out = []
    for s in range(0, len(images), chunk):
        x = images[s : s + chunk, None]
        maps = sum(m(x) for m, _ in modes) / len(modes)
        out.append(decode_landmarks(maps))
    for m, was in modes:
        m.train(was)
    return np.concatenate(out)


def save_detectors(f: Detector, g: Detector, f_path, g_path) -> None:
    save_checkpoint(f_path, f.state_dict())
    save_checkpoint(g_path, g.state_dict())
