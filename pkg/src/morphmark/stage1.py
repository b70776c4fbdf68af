"""Stage-I trainer: pair sampling, loss schedules, the EMA pseudo-landmark
store and exemplar-to-target landmark inference.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .autodiff import Adam, backward, save_checkpoint
from .grid import pixel_grid
from .losses import l_esim, l_esmooth, l_global, l_inv, l_sim, l_smooth, l_syn, stage1_total
from .regnet import RegistrationNet, RegnetConfig
from .transform import apply_affine_points, apply_field_points, apply_homography_points, random_perspective

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Stage1Config:
    epochs: int = 90
    batch_size: int = 8
    lr_initial: float = 1e-4
    lr_final: float = 5e-5
    ramp_fraction: float = 1 / 3
    lambda2: float = 0.25
    lambda3_start: float = 5.0
    lambda3_end: float = 0.0
    ema_start: int | None = None
    tau: float = 0.9
    sigma: float = 3.0
    T: float = 0.1
    ssim_window: int = 7
    syn_strength: float = 1.0
    field_point_sign: int | str = 1
    edge_sim: bool = True
    edge_smooth: bool = True
    betas: tuple = (0.99, 0.999)
    weight_decay: float = 1e-4
    regnet: RegnetConfig = field(default_factory=RegnetConfig)

    @classmethod
    def desk(cls, epochs: int = 30, **overrides) -> "Stage1Config":
        """Short-schedule preset for CPU runs: fewer epochs, a 10x larger step
        size to compensate for the smaller number of updates, and the transport
        sign chosen against known warps."""
        kw = dict(epochs=epochs, lr_initial=1e-3, lr_final=5e-4, field_point_sign="auto")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def scaled(cls, epoch_scale: float, **overrides) -> "Stage1Config":
        """Full schedule (750 epochs) shrunk by ``epoch_scale`` with phase fractions kept."""
        if epoch_scale <= 0:
            raise ValueError("epoch_scale must be positive")
        return cls(epochs=max(1, int(round(750 * epoch_scale))), **overrides)

    @property
    def switch_epoch(self) -> int:
        return max(1, int(round(self.epochs * self.ramp_fraction)))

    @property
    def ema_start_epoch(self) -> int:
        if self.ema_start is not None:
            return self.ema_start
        return int(math.floor(self.epochs * 200 / 750))

    def validate(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("stage-I batch size must be even and at least 2")
        if not 0 <= self.tau < 1:
            raise ValueError("tau must lie in [0, 1)")
        if self.field_point_sign not in (1, -1, "auto"):
            raise ValueError("field_point_sign must be 1, -1 or 'auto'")
        self.regnet.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regnet"] = self.regnet.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Config":
        d = dict(d)
        if "regnet" in d and isinstance(d["regnet"], dict):
            d["regnet"] = RegnetConfig.from_dict(d["regnet"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


# --- schedules (per epoch)

def lambda1_at(epoch: int, cfg: Stage1Config) -> float:
    return min(1.0, epoch / cfg.switch_epoch)


def lambda3_at(epoch: int, cfg: Stage1Config) -> float:
    last = max(cfg.epochs - 1, 1)
    frac = min(epoch / last, 1.0)
    return cfg.lambda3_end + 0.5 * (cfg.lambda3_start - cfg.lambda3_end) * (1 + math.cos(math.pi * frac))


def lr_at(epoch: int, cfg: Stage1Config) -> float:
    s = cfg.switch_epoch
    if epoch < s:
        return cfg.lr_initial
    span = max(cfg.epochs - 1 - s, 1)
    frac = min((epoch - s) / span, 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr_initial - cfg.lr_final) * (1 + math.cos(math.pi * frac))


# --- pairs

@dataclass
class Pair:
    src: int
    dst: int
    homography: np.ndarray | None = None  # output -> source pixel map for synthetic pairs
    truth: np.ndarray | None = None  # (2, H, W) backward field

    @property
    def synthetic(self) -> bool:
        return self.truth is not None


def pairs_for_indices(indices, rng: np.random.Generator, size, strength: float) -> list[Pair]:
    """First half synthetic (image, perspective(image)); the rest shuffled in-batch."""
    indices = list(indices)
    B = len(indices)
    half = B // 2
    H, W = size
    pairs = []
    for i in indices[:half]:
        Hm, truth = random_perspective(int(rng.integers(2**31)), strength, H, W)
        pairs.append(Pair(i, i, Hm, truth))
    rest = indices[half:]
    if len(indices) >= 2:
        # derangement over the whole batch so each source gets another image
        for i in rest:
            choices = [j for j in indices if j != i] or [i]
            pairs.append(Pair(i, int(choices[rng.integers(len(choices))])))
    else:
        pairs += [Pair(i, i) for i in rest]
    return pairs


def make_batch(n_images: int, batch_size: int, seed, size=(64, 64), strength: float = 1.0) -> list[Pair]:
    """Sample a batch of ``batch_size`` images without replacement and pair them."""
    if n_images < 2:
        raise ValueError("need at least two images to form pairs")
    if batch_size % 2:
        raise ValueError("batch size must be even")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n_images, size=min(batch_size, n_images), replace=False)
    return pairs_for_indices(idx, rng, size, strength)


# --- pseudo-label store

@dataclass
class PseudoLabelStore:
    ema: dict = field(default_factory=dict)
    last: dict = field(default_factory=dict)
    count: dict = field(default_factory=dict)

    def __contains__(self, key):
        return key in self.ema

    def __len__(self):
        return len(self.ema)

    def get(self, key):
        return self.ema.get(key)


def ema_update(store: PseudoLabelStore, key, prediction, tau: float) -> PseudoLabelStore:
    """First update stores the prediction; later ones blend ``tau * old + (1 - tau) * new``."""
    if not 0 <= tau < 1:
        raise ValueError("tau must lie in [0, 1)")
    pred = np.asarray(prediction, dtype=np.float64)
    if not np.all(np.isfinite(pred)):
        raise ValueError("non-finite landmark prediction rejected")
    if key in store.ema:
        store.ema[key] = tau * store.ema[key] + (1 - tau) * pred
    else:
        store.ema[key] = pred.copy()
    store.last[key] = pred.copy()
    store.count[key] = store.count.get(key, 0) + 1
    return store


def select_field_point_sign(size=(64, 64), trials: int = 8, strength: float = 1.0, seed: int = 0) -> tuple[int, dict]:
    """Pick the transport sign that best follows known perspective warps.

    For a synthetic pair ``dst(u) = src(H(u))``, a source landmark ``q`` truly
    lands at ``H^-1(q)``; both signs of ``q +/- field(q)`` are scored against it.
    """
    H, W = size
    rng = np.random.default_rng(seed)
    errs = {1: [], -1: []}
    for _ in range(trials):
        Hm, truth = random_perspective(int(rng.integers(2**31)), strength, H, W)
        q = rng.uniform([0.2 * W, 0.2 * H], [0.8 * W, 0.8 * H], size=(16, 2))
        exact = apply_homography_points(q, np.linalg.inv(Hm))
        f = torch.as_tensor(truth)
        for s in (1, -1):
            moved = apply_field_points(torch.as_tensor(q), f, s).numpy()
            errs[s].append(np.linalg.norm(moved - exact, axis=-1).mean())
    score = {s: float(np.mean(v)) for s, v in errs.items()}
    return min(score, key=score.get), score


# --- inference

def transport_points(out, points: torch.Tensor, sign: int, height: int, width: int) -> list[torch.Tensor]:
    """Landmarks after the affine step and after each deformation step."""
    p = apply_affine_points(points, out.affine.detach(), height, width)
    seq = [p]
    for phi in out.fields:
        p = apply_field_points(p, phi.detach(), sign)
        seq.append(p)
    return seq


@torch.no_grad()
def infer_pseudo(model: RegistrationNet, exemplar_image, exemplar_points, targets, sign: int = 1, chunk: int = 32) -> np.ndarray:
    """Register the exemplar onto each target and carry its landmarks along."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    ex = torch.as_tensor(np.asarray(exemplar_image), dtype=dtype)
    pts = torch.as_tensor(np.asarray(exemplar_points), dtype=dtype)
    targets = torch.as_tensor(np.asarray(targets), dtype=dtype)
    H, W = ex.shape[-2:]
    out_pts = []
    for s in range(0, len(targets), chunk):
        dst = targets[s : s + chunk, None]
        B = dst.shape[0]
        src = ex.expand(B, 1, H, W)
        out = model(src, dst)
        p = transport_points(out, pts.expand(B, *pts.shape), sign, H, W)[-1]
        out_pts.append(p.double().numpy())
    model.train(was_training)
    return np.concatenate(out_pts) if out_pts else np.zeros((0,) + tuple(pts.shape))


# --- training

@dataclass
class Stage1Result:
    model: RegistrationNet
    store: PseudoLabelStore
    log: list
    field_point_sign: int
    sign_scores: dict


def _batch_tensors(pairs, images: torch.Tensor, store, use_store: bool, exemplar_index, exemplar_points, sign, size):
    H, W = size
    src = images[[p.src for p in pairs]][:, None]
    dst_list = []
    for p in pairs:
        if p.synthetic:
            dst_list.append(_warp_by_truth(images[p.src], p.truth))
        else:
            dst_list.append(images[p.dst])
    dst = torch.stack(dst_list)[:, None]
    src_pts = []
    for p in pairs:
        if p.src == exemplar_index:
            src_pts.append(exemplar_points)
        elif use_store and p.src in store:
            src_pts.append(store.get(p.src))
        else:
            src_pts.append(None)
    return src, dst, src_pts


def _warp_by_truth(image: torch.Tensor, truth: np.ndarray) -> torch.Tensor:
    from .transform import warp_field

    return warp_field(image, torch.as_tensor(truth, dtype=image.dtype)[None])


def _masks_for(pairs, src_pts, out, sign, size, sigma, dtype):
    """Per-step landmark masks in the target frame (``None`` = uniform)."""
    from .grid import landmark_mask

    H, W = size
    n_steps = len(out.fields)
    masks = [torch.ones(len(pairs), H, W, dtype=dtype) for _ in range(n_steps)]
    if all(p is None for p in src_pts):
        return masks
    for b, (pair, pts) in enumerate(zip(pairs, src_pts)):
        if pts is None:
            continue
        if pair.synthetic:
            exact = apply_homography_points(pts, np.linalg.inv(pair.homography))
            seq = [torch.as_tensor(exact, dtype=dtype)] * n_steps
        else:
            p = torch.as_tensor(pts, dtype=dtype)
            sub = type(out)(
                out.affine[b : b + 1],
                [f[b : b + 1] for f in out.fields],
                None,
                None,
                None,
            )
            seq = [s[0] for s in transport_points(sub, p[None], sign, H, W)[1:]]
        for i in range(n_steps):
            masks[i][b] = landmark_mask(seq[i], H, W, sigma)
    return masks


def _checked(name: str, value: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(value.detach()).all():
        raise TrainingError(f"non-finite stage-I loss term: {name}")
    return value


def train_stage1(
    images,
    exemplar_index: int,
    exemplar_points,
    cfg: Stage1Config | None = None,
    seed: int = 0,
    log_path=None,
    ckpt_path=None,
    callback: Callable | None = None,
) -> Stage1Result:
    """Train the registration cascade on ``(n, H, W)`` images.

    ``exemplar_points`` are the exemplar's ``(N, 2)`` landmarks. The returned
    store holds EMA pseudo landmarks for every non-exemplar image.
    """
    cfg = cfg or Stage1Config()
    cfg.validate()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n, H, W = images.shape
    if n < 2:
        raise ValueError("stage I needs at least two images")
    if (H, W) != tuple(cfg.regnet.image_size):
        raise ValueError(f"images are {H}x{W} but the network expects {tuple(cfg.regnet.image_size)}")
    exemplar_points = np.asarray(exemplar_points, dtype=np.float64)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = RegistrationNet(cfg.regnet)
    opt = Adam(model.parameters(), lr=cfg.lr_initial, betas=cfg.betas, weight_decay=cfg.weight_decay)

    if cfg.field_point_sign == "auto":
        sign, sign_scores = select_field_point_sign((H, W), strength=cfg.syn_strength, seed=seed)
    else:
        sign, sign_scores = int(cfg.field_point_sign), {}

    store = PseudoLabelStore()
    entries = []
    grid = pixel_grid(H, W, images.dtype).permute(2, 0, 1)
    M = cfg.ema_start_epoch
    unlabeled = [i for i in range(n) if i != exemplar_index]
    logf = open(log_path, "w") if log_path else None
    step = 0
    try:
        if logf:
            logf.write(json.dumps({"event": "field_point_sign", "sign": sign, "scores": {str(k): v for k, v in sign_scores.items()}}) + "\n")
        for epoch in range(cfg.epochs):
            lam1, lam3 = lambda1_at(epoch, cfg), lambda3_at(epoch, cfg)
            opt.lr = lr_at(epoch, cfg)
            model.train()
            perm = rng.permutation(n)
            B = cfg.batch_size
            for s in range(0, n - 1, B):
                idx = perm[s : s + B]
                if len(idx) < 2:
                    continue
                if len(idx) % 2:
                    idx = idx[:-1]
                pairs = pairs_for_indices(idx, rng, (H, W), cfg.syn_strength)
                src, dst, src_pts = _batch_tensors(pairs, images, store, len(store) > 0, exemplar_index, exemplar_points, sign, (H, W))
                out = model(src, dst)
                masks = _masks_for(pairs, src_pts, out, sign, (H, W), cfg.sigma, images.dtype) if len(store) > 0 else None
                syn_idx = [b for b, p in enumerate(pairs) if p.synthetic]
                truth = torch.stack([torch.as_tensor(pairs[b].truth, dtype=images.dtype) for b in syn_idx]) if syn_idx else None

                g = _checked("global", l_global(out.warped_affine, dst))
                locs, smooths, invs, syns = [], [], [], []
                for i, (phi, warped, coord) in enumerate(zip(out.fields, out.warped, out.coord_maps)):
                    if cfg.edge_sim:
                        mask = masks[i] if masks is not None else None
                        loc = l_esim(warped[:, 0], dst[:, 0], sigma=cfg.sigma, window=cfg.ssim_window, mask=mask)
                    else:
                        loc = l_sim(warped[:, 0], dst[:, 0], cfg.ssim_window)
                    sm = l_esmooth(phi, warped[:, 0], cfg.T) if cfg.edge_smooth else l_smooth(phi)
                    locs.append(_checked(f"local[{i}]", loc))
                    smooths.append(_checked(f"smooth[{i}]", sm))
                    invs.append(_checked(f"inv[{i}]", l_inv(phi)))
                    if truth is not None:
                        disp = coord[syn_idx].permute(0, 3, 1, 2) - grid
                        syns.append(_checked(f"syn[{i}]", l_syn(disp, truth)))
                    else:
                        syns.append(torch.zeros((), dtype=images.dtype))
                total, report = stage1_total(g, locs, smooths, invs, syns, lam1, cfg.lambda2, lam3)
                opt.zero_grad()
                try:
                    backward(total, "stage-I total")
                except Exception as exc:
                    if ckpt_path:
                        save_checkpoint(ckpt_path, model.state_dict())
                    raise TrainingError(str(exc)) from exc
                opt.step()
                entry = {"epoch": epoch, "step": step, "lr": opt.lr, **report.to_dict()}
                entries.append(entry)
                if logf:
                    logf.write(json.dumps(entry) + "\n")
                step += 1
            if epoch >= M:
                preds = infer_pseudo(model, images[exemplar_index], exemplar_points, images[unlabeled], sign)
                for k, p in zip(unlabeled, preds):
                    ema_update(store, k, p, cfg.tau)
            if callback is not None:
                callback(epoch, model, store)
    finally:
        if logf:
            logf.close()
    if len(store) == 0:
        preds = infer_pseudo(model, images[exemplar_index], exemplar_points, images[unlabeled], sign)
        for k, p in zip(unlabeled, preds):
            ema_update(store, k, p, cfg.tau)
    model.eval()
    if ckpt_path:
        save_checkpoint(ckpt_path, model.state_dict())
    return Stage1Result(model, store, entries, sign, sign_scores)


def pseudo_label_array(store: PseudoLabelStore, n: int, exemplar_index: int, exemplar_points) -> np.ndarray:
    """Stack the store into ``(n, N, 2)`` with the exemplar's own labels in place."""
    exemplar_points = np.asarray(exemplar_points, dtype=np.float64)
    out = np.empty((n,) + exemplar_points.shape)
    for k in range(n):
        out[k] = exemplar_points if k == exemplar_index else store.get(k)
    return out
