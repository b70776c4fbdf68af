import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st

from morphmark.autodiff import gradient_check
from morphmark.grid import gaussian_heatmap
from morphmark.losses import (
    DegenerateMaskError,
    consistency_mse,
    jacobian_determinant,
    l_con_cross,
    l_con_self,
    l_esim,
    l_esmooth,
    l_global,
    l_heat,
    l_inv,
    l_smooth,
    l_syn,
    ssim_map,
    stage1_total,
)
from morphmark.transform import compose_affine, identity_affine, invert_affine, warp_affine

D = torch.float64


def rnd(rng, *shape):
    return torch.as_tensor(rng.random(shape), dtype=D)


def ssim_oracle(a, b, window=7):
    """Direct per-pixel SSIM with replicate padding, scalar loops in float64."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    H, W = a.shape
    r = window // 2
    out = np.empty_like(a)
    for y in range(H):
        for x in range(W):
            ys = np.clip(np.arange(y - r, y + r + 1), 0, H - 1)
            xs = np.clip(np.arange(x - r, x + r + 1), 0, W - 1)
            pa, pb = a[np.ix_(ys, xs)], b[np.ix_(ys, xs)]
            ma, mb = pa.mean(), pb.mean()
            va = (pa * pa).mean() - ma * ma
            vb = (pb * pb).mean() - mb * mb
            cov = (pa * pb).mean() - ma * mb
            c1, c2 = 0.01**2, 0.03**2
            out[y, x] = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


# --- l_global

def test_l_global_examples(rng):
    a = rnd(rng, 8, 8)
    assert l_global(a, a) == 0
    assert l_global(torch.zeros(4, 4), torch.ones(4, 4)) == 1.0
    b = rnd(rng, 8, 8)
    oracle = sum(abs(a[i, j].item() - b[i, j].item()) for i in range(8) for j in range(8)) / 64
    assert abs(l_global(a, b).item() - oracle) < 1e-7


def test_shape_mismatch_rejected():
    for fn in (l_global, l_heat, l_syn, ssim_map):
        with pytest.raises(ValueError):
            fn(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 4, 5))


# --- SSIM

def test_ssim_identity_and_symmetry(rng):
    a, b = rnd(rng, 12, 12), rnd(rng, 12, 12)
    assert torch.allclose(ssim_map(a, a), torch.ones(12, 12, dtype=D), atol=1e-12)
    assert torch.allclose(ssim_map(a, b), ssim_map(b, a), atol=1e-15)


def test_ssim_matches_direct_formula():
    a = torch.full((16, 16), 0.5, dtype=D)
    b = a + torch.as_tensor(np.random.default_rng(0).normal(0, 0.1, (16, 16)), dtype=D)
    got = ssim_map(a, b)
    want = ssim_oracle(a.numpy(), b.numpy())
    assert got.mean().item() < 1
    assert np.abs(got.numpy() - want).max() < 1e-6


def test_ssim_rejects_even_window(rng):
    with pytest.raises(ValueError):
        ssim_map(rnd(rng, 8, 8), rnd(rng, 8, 8), window=6)


# --- l_esim

def _smooth_image(rng, n=24):
    g = torch.as_tensor(rng.random((1, 1, n // 4, n // 4)), dtype=D)
    return F.interpolate(g, size=(n, n), mode="bilinear", align_corners=True)[0, 0]


def test_l_esim_identity_cases(rng):
    img = _smooth_image(rng)
    pts = torch.tensor([[5.0, 7.0], [18.0, 12.0]], dtype=D)
    assert abs(l_esim(img, img, pts).item()) < 1e-12
    assert abs(l_esim(img, img, pts + torch.tensor([3.3, -2.1], dtype=D)).item()) < 1e-12


def test_l_esim_mask_emphasises_landmark_patch(rng):
    a = _smooth_image(rng)
    b = a.clone()
    b[10:15, 10:15] += torch.as_tensor(rng.normal(0, 0.2, (5, 5)), dtype=D)
    pts = torch.tensor([[12.0, 12.0]], dtype=D)
    assert l_esim(a, b, pts).item() > l_esim(a, b, None).item()


def test_l_esim_degenerate_mask(rng):
    img = _smooth_image(rng)
    with pytest.raises(DegenerateMaskError):
        l_esim(img, img, torch.tensor([[1e4, 1e4]], dtype=D))


# --- smoothness

def _ramp_field(H=10, W=12):
    x = torch.arange(W, dtype=D).expand(H, W)
    return torch.stack([x, torch.zeros_like(x)])


def test_l_smooth_examples(rng):
    assert l_smooth(torch.full((2, 8, 8), 0.7, dtype=D)) == 0
    assert abs(l_smooth(_ramp_field()).item() - 0.25) < 1e-12
    f = rnd(rng, 2, 8, 8)
    assert abs(l_smooth(3 * f).item() - 9 * l_smooth(f).item()) < 1e-12


def test_l_esmooth_constant_image_equals_l_smooth(rng):
    f = rnd(rng, 2, 9, 9)
    assert l_esmooth(f, torch.full((9, 9), 0.3, dtype=D)).item() == pytest.approx(l_smooth(f).item(), abs=0)


def test_l_esmooth_relaxes_at_step_edge():
    img = torch.zeros(12, 12, dtype=D)
    img[:, 6:] = 1.0
    f = torch.zeros(2, 12, 12, dtype=D)
    f[0, :, 6:] = 1.0
    assert l_esmooth(f, img, T=0.1).item() < 0.2 * l_smooth(f).item()


@given(st.integers(0, 10_000))
def test_l_esmooth_bounded_by_l_smooth(seed):
    rng = np.random.default_rng(seed)
    f, img = rnd(rng, 2, 8, 8), rnd(rng, 8, 8)
    assert l_esmooth(f, img).item() <= l_smooth(f).item() + 1e-15


def test_l_esmooth_rejects_bad_temperature(rng):
    with pytest.raises(ValueError):
        l_esmooth(rnd(rng, 2, 4, 4), rnd(rng, 4, 4), T=0)


# --- invertibility

def test_l_inv_examples(rng):
    assert l_inv(torch.zeros(2, 8, 8, dtype=D)) == 0
    assert torch.equal(jacobian_determinant(torch.zeros(2, 5, 5, dtype=D)), torch.ones(5, 5, dtype=D))
    fold = -2 * _ramp_field()
    det = jacobian_determinant(fold)
    assert torch.allclose(det[1:-1, 1:-1], torch.full_like(det[1:-1, 1:-1], -1.0))
    assert l_inv(fold).item() > 0
    gentle = 0.05 * rnd(rng, 2, 8, 8)
    assert bool((jacobian_determinant(gentle) > 0).all())
    assert l_inv(gentle) == 0


# --- synthetic supervision and heatmaps

def test_l_syn_examples(rng):
    t = rnd(rng, 2, 6, 6)
    assert l_syn(t, t) == 0
    shift = torch.zeros_like(t)
    shift[0] = 1
    assert l_syn(t + shift, t).item() == pytest.approx(1.0)
    p = rnd(rng, 2, 6, 6)
    oracle = sum((p[0, i, j] - t[0, i, j]).item() ** 2 + (p[1, i, j] - t[1, i, j]).item() ** 2 for i in range(6) for j in range(6)) / 36
    assert abs(l_syn(p, t).item() - oracle) < 1e-7


def test_l_heat_examples(rng):
    t = rnd(rng, 3, 5, 5)
    assert l_heat(t, t) == 0
    assert l_heat(t + 0.1, t).item() == pytest.approx(0.01)
    p = rnd(rng, 3, 5, 5)
    oracle = sum((p[c, i, j] - t[c, i, j]).item() ** 2 for c in range(3) for i in range(5) for j in range(5)) / 75
    assert abs(l_heat(p, t).item() - oracle) < 1e-7


def test_per_sample_reduction(rng):
    p, t = rnd(rng, 4, 3, 5, 5), rnd(rng, 4, 3, 5, 5)
    per = l_heat(p, t, reduction="none")
    assert per.shape == (4,)
    assert per.mean().item() == pytest.approx(l_heat(p, t).item())


# --- stage-I total

def test_stage1_total_examples():
    total, rep = stage1_total(1.0, [1.0, 1.0], [1.0, 1.0], [1.0, 1.0], 1.0, 1.0, 0.25, 2.0)
    assert total == pytest.approx(9.5)
    assert rep.total == pytest.approx(9.5)
    assert stage1_total(0.7, [3.0], [2.0], [1.0], 5.0, 0.0, 0.25, 2.0)[0] == 0.7
    assert stage1_total(0, [0], [0], [0], 0, 1, 0.25, 5)[0] == 0
    with pytest.raises(ValueError):
        stage1_total(1, [1], [1], [1], 1, -1, 0.25, 1)


@given(st.floats(0, 3), st.floats(0, 3))
def test_stage1_total_linear_in_lambdas(a, b):
    parts = (0.3, [0.5, 0.4], [0.2, 0.1], [0.05, 0.0], [0.7, 0.6])
    f = lambda l1, l2, l3: stage1_total(*parts, l1, l2, l3)[0]  # noqa: E731
    assert f(a + b, 0.25, 1.0) - f(0, 0.25, 1.0) == pytest.approx(f(a, 0.25, 1.0) + f(b, 0.25, 1.0) - 2 * f(0, 0.25, 1.0))
    assert f(1.0, 0.25, a + b) - f(1.0, 0.25, 0) == pytest.approx(f(1.0, 0.25, a) + f(1.0, 0.25, b) - 2 * f(1.0, 0.25, 0))


# --- consistency terms

def _shift_affine(dx_px, W):
    A = identity_affine(1, D)
    A[0, 0, 2] = 2 * dx_px / (W - 1)
    return A


def test_l_con_self_identity_views_zero(rng):
    model = torch.nn.Conv2d(1, 2, 3, padding=1).double()
    x = rnd(rng, 2, 1, 16, 16)
    I = identity_affine(2, D)
    assert l_con_self(model, x, I, I, I).item() == 0


def test_l_con_self_equivariant_model_near_zero():
    # an identity "model" on a blob image is exactly equivariant up to interpolation
    x = gaussian_heatmap(torch.tensor([[[15.0, 16.0]]], dtype=D), 32, 32, 3.0)
    A_e = torch.tensor([[[0.98, -0.05, 0.02], [0.05, 0.98, -0.03]]], dtype=D)
    A_h = torch.tensor([[[1.1, 0.2, -0.05], [-0.2, 1.1, 0.04]]], dtype=D)
    e2h = compose_affine(invert_affine(A_e), A_h)
    assert l_con_self(lambda t: t, x, A_e, A_h, e2h).item() < 1e-3


def test_l_con_self_constant_model_shift():
    W = 32
    fixed = gaussian_heatmap(torch.tensor([[16.0, 16.0]], dtype=D), W, W, 3.0)
    model = lambda t: fixed.expand(t.shape[0], 1, W, W)  # noqa: E731
    I = identity_affine(1, D)
    T = _shift_affine(2, W)
    got = l_con_self(model, torch.zeros(1, 1, W, W, dtype=D), I, T, T).item()
    shifted = gaussian_heatmap(torch.tensor([[14.0, 16.0]], dtype=D), W, W, 3.0)
    # the shifted blob stays away from the border, so bilinear shifting by whole pixels is exact
    assert got == pytest.approx(((fixed - shifted) ** 2).mean().item(), rel=1e-9)


def test_l_con_cross_examples(rng):
    f = torch.nn.Conv2d(1, 2, 3, padding=1).double()
    x = rnd(rng, 2, 1, 12, 12)
    I = identity_affine(2, D)
    assert l_con_cross(f, f, x, I, I, I).item() == 0
    zero = lambda t: torch.zeros(t.shape[0], 2, *t.shape[-2:], dtype=D)  # noqa: E731
    assert l_con_cross(f, zero, x, I, I, I).item() == pytest.approx((f(x) ** 2).mean().item())


def test_l_con_cross_gradient_targets(rng):
    g = torch.nn.Conv2d(1, 2, 3, padding=1).double()
    f = copy.deepcopy(g)
    x = rnd(rng, 2, 1, 12, 12)
    A_e = identity_affine(2, D)
    A_h = _shift_affine(1.5, 12).expand(2, 2, 3)
    v1 = l_con_cross(f, g, x, A_e, A_h, A_h)
    v1.backward()
    assert f.weight.grad is not None and g.weight.grad is None
    f.zero_grad()
    v2 = l_con_cross(g, f, x, A_e, A_h, A_h)
    v2.backward()
    assert g.weight.grad is not None and f.weight.grad is None
    assert v1.item() == v2.item()


def test_l_con_self_gradient_only_through_hard_view(rng):
    m = torch.nn.Conv2d(1, 2, 3, padding=1).double()
    frozen = copy.deepcopy(m)
    x = rnd(rng, 2, 1, 10, 10)
    A_e = identity_affine(2, D)
    A_h = _shift_affine(1.0, 10).expand(2, 2, 3)
    l_con_self(m, x, A_e, A_h, A_h).backward()
    l_con_cross(frozen, m, x, A_e, A_h, A_h).backward()
    assert torch.allclose(m.weight.grad, frozen.weight.grad)


# --- gradient suite

def _conv_model(w):
    return lambda t: F.conv2d(t, w, padding=1)


def _grad_cases():
    rng = np.random.default_rng(42)
    img = lambda n=8: torch.as_tensor(rng.random((n, n)), dtype=D)  # noqa: E731
    pts = torch.tensor([[3.0, 4.0], [6.0, 2.5]], dtype=D)
    x4 = torch.as_tensor(rng.random((2, 1, 8, 8)), dtype=D)
    w_g = torch.as_tensor(rng.normal(0, 0.3, (2, 1, 3, 3)), dtype=D)
    A_e = torch.tensor([[[1.0, 0.02, 0.03], [-0.02, 1.0, 0.0]]] * 2, dtype=D)
    A_h = torch.tensor([[[0.9, 0.1, -0.05], [-0.1, 0.95, 0.05]]] * 2, dtype=D)
    e2h = A_h.clone()
    return {
        "l_global": (lambda a, b: l_global(a, b), [img(), img()]),
        "ssim": (lambda a, b: ssim_map(a, b).mean(), [img(), img()]),
        "l_esim": (lambda a, b: l_esim(a, b, pts), [img(), img()]),
        "l_smooth": (lambda f: l_smooth(f), [torch.as_tensor(rng.random((2, 8, 8)), dtype=D)]),
        "l_esmooth": (lambda f, a: l_esmooth(f, a), [torch.as_tensor(rng.random((2, 8, 8)), dtype=D), img()]),
        "l_inv": (lambda f: l_inv(f), [torch.as_tensor(rng.normal(0, 1.5, (2, 8, 8)), dtype=D)]),
        "l_syn": (lambda p, t: l_syn(p, t), [torch.as_tensor(rng.random((2, 8, 8)), dtype=D), torch.as_tensor(rng.random((2, 8, 8)), dtype=D)]),
        "l_heat": (lambda p, t: l_heat(p, t), [torch.as_tensor(rng.random((3, 8, 8)), dtype=D), torch.as_tensor(rng.random((3, 8, 8)), dtype=D)]),
        # the easy-view branch is a constant target, so only the hard branch is differenced
        "l_con_self": (lambda w: consistency_mse(_conv_model(w)(warp_affine(x4, A_h)), _conv_model(w_g)(x4).detach(), e2h), [w_g.clone()]),
        "l_con_cross": (lambda w: l_con_cross(_conv_model(w), _conv_model(w_g), x4, A_e, A_h, e2h), [torch.as_tensor(rng.normal(0, 0.3, (2, 1, 3, 3)), dtype=D)]),
    }


GRAD_CASES = _grad_cases()


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_loss_gradients_match_finite_differences(name):
    fn, inputs = GRAD_CASES[name]
    assert gradient_check(fn, inputs) < 1e-4


@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rnd(rng, 8, 8), rnd(rng, 8, 8)
    f = torch.as_tensor(rng.normal(0, 2, (2, 8, 8)), dtype=D)
    assert l_global(a, b) >= 0 and l_smooth(f) >= 0 and l_inv(f) >= 0 and l_syn(f, f * 0) >= 0
    assert l_esim(a, b, torch.tensor([[4.0, 4.0]], dtype=D)).item() >= -1e-12
    assert l_heat(a, b) >= 0
    assert not math.isnan(l_esmooth(f, a).item())
