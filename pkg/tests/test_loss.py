import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bevlandmarks.loss import (EMPTY, IGNORE, LABELED, TOO_FAR, LossConfig, correspondence_labels,
                               correspondence_loss, distance_loss, partition_patches, patch_diagonal_m,
                               soft_argmax_coords, soft_argmax_patch, to_patches, total_loss)



@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float))


def scalar_total(heat, corr, coords, occ, lm, alpha, beta, gamma, d_p, diag):
    """Plain-Python reference: loops over patches and pixels, no vectorization."""
    H, W = len(heat), len(heat[0])
    ph, pw = H // d_p, W // d_p
    L = len(lm)
    dist_sum, ce_sum, n_lab = 0.0, 0.0, 0
    for r in range(d_p):
        for c in range(d_p):
            pix = [(v, u) for v in range(r * ph, (r + 1) * ph) for u in range(c * pw, (c + 1) * pw)]
            if not any(occ[v][u] for v, u in pix):
                continue
            m = max(heat[v][u] for v, u in pix)
            ws = [math.exp(heat[v][u] - m) for v, u in pix]
            z = sum(ws)
            sx = sum(w * coords[0][v][u] for w, (v, u) in zip(ws, pix)) / z
            sy = sum(w * coords[1][v][u] for w, (v, u) in zip(ws, pix)) / z
            best, bj = math.inf, -1
            for j in range(L):
                d = math.hypot(sx - lm[j][0], sy - lm[j][1])
                if d < best:
                    best, bj = d, j
            dist_sum += math.log(1.0 + gamma * best)
            if best > diag / 2:
                continue
            logits = [corr[k][r][c] for k in range(L)]
            mm = max(logits)
            lse = mm + math.log(sum(math.exp(x - mm) for x in logits))
            ce_sum += lse - logits[bj]
            n_lab += 1
    ce = ce_sum / n_lab if n_lab else 0.0
    return alpha * dist_sum + beta * ce


def random_fixture(seed, H=16, W=16, d_p=4, L=5):
    rng = np.random.default_rng(seed)
    heat = rng.normal(0, 2, size=(H, W))
    corr = rng.normal(0, 2, size=(L, d_p, d_p))
    ang, off = rng.uniform(0, 2 * np.pi), rng.uniform(-20, 20, 2)
    u, v = np.meshgrid(np.arange(W) + 0.5 - W / 2, np.arange(H) + 0.5 - H / 2)
    s = 0.5
    gx = off[0] + s * (np.cos(ang) * u - np.sin(ang) * v)
    gy = off[1] + s * (np.sin(ang) * u + np.cos(ang) * v)
    coords = np.stack([gx, gy])
    occ = rng.uniform(size=(H, W)) < 0.15
    lm = off + rng.uniform(-4, 4, size=(L, 2))
    return heat, corr, coords, occ, lm


@pytest.mark.parametrize("seed", range(25))
def test_total_loss_matches_scalar_oracle(seed):
    heat, corr, coords, occ, lm = random_fixture(seed)
    diag = patch_diagonal_m(16, 0.5, 4)
    cfg = LossConfig(d_p=4)
    out = total_loss(t(heat), t(corr), t(coords), occ, t(lm), cfg, diag)
    ref = scalar_total(heat.tolist(), corr.tolist(), coords.tolist(), occ.tolist(), lm.tolist(),
                       1.0, 30.0, 3.0, 4, diag)
    assert abs(float(out.total) - ref) <= 1e-10


def test_partition_examples():
    h = np.arange(16.0).reshape(4, 4)
    y = np.stack([h, -h])
    ps = partition_patches(h, y, h > 14, 2)
    assert [p.index for p in ps] == [0, 1, 2, 3]
    np.testing.assert_array_equal(ps[1].heatmap, [[2, 3], [6, 7]])
    assert [p.occupied for p in ps] == [False, False, False, True]
    one = partition_patches(h, y, h > 0, 1)
    assert len(one) == 1 and (one[0].heatmap == h).all()
    with pytest.raises(ValueError):
        partition_patches(h, y, h > 0, 3)


def test_partition_reassembly():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(64, 64))
    ps = partition_patches(h, np.stack([h, h]), h > 0, 4)
    rows = [np.hstack([ps[r * 4 + c].heatmap for c in range(4)]) for r in range(4)]
    assert np.array_equal(np.vstack(rows), h)
    tp = to_patches(t(h), 4).numpy()
    for p in ps:
        assert np.array_equal(tp[p.index], p.heatmap.ravel())


def test_soft_argmax_examples():
    coords = t([[[0.0, 5.0], [1.0, 5.0]]])
    assert float(soft_argmax_coords(t([[0.0, math.log(3)]]), coords)[0, 0]) == pytest.approx(0.75, abs=1e-15)
    x = np.arange(16.0).reshape(4, 4)
    from bevlandmarks.loss import PatchView
    p = PatchView(0, np.zeros((4, 4)), x, -x, True)
    np.testing.assert_allclose(soft_argmax_patch(p), [x.mean(), -x.mean()], atol=1e-12)
    hm = np.zeros((4, 4))
    hm[2, 1] = 50.0
    np.testing.assert_allclose(soft_argmax_patch(PatchView(0, hm, x, -x, True)), [9.0, -9.0], atol=1e-6)
    hm[2, 1] = 1e4  # stability: no overflow with max subtraction
    assert np.isfinite(soft_argmax_patch(PatchView(0, hm, x, -x, True))).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_soft_argmax_inside_bounding_box(seed):
    rng = np.random.default_rng(seed)
    logits = t(rng.normal(0, 10, size=(3, 9)))
    coords = t(rng.uniform(-50, 50, size=(3, 9, 2)))
    est = soft_argmax_coords(logits, coords).numpy()
    lo, hi = coords.numpy().min(1), coords.numpy().max(1)
    assert ((est >= lo - 1e-9) & (est <= hi + 1e-9)).all()


def test_distance_loss_examples():
    lm = t([[0.0, 0.0], [10.0, 0.0]])
    assert float(distance_loss(t([[0.0, 0.0]]), lm, 3.0)) == 0.0
    assert float(distance_loss(t([[1.0, 0.0]]), lm, 3.0)) == pytest.approx(math.log(4), abs=1e-12)
    assert float(distance_loss(t([[1.0, 0.0]]), lm, 3.0)) == pytest.approx(1.3863, abs=1e-4)
    d = 1e-3
    a = float(distance_loss(t([[d, 0.0]]), lm, 3.0))
    b = float(distance_loss(t([[d, 0.0]]), lm, 6.0))
    assert a == pytest.approx(3 * d, rel=2e-3) and b == pytest.approx(6 * d, rel=4e-3)
    assert float(distance_loss(t(np.zeros((0, 2))), lm, 3.0)) == 0.0


def test_labels_examples():
    lm = t([[0.0, 0.0], [20.0, 0.0], [3.0, 4.0]])
    est = t([[3.0, 4.0], [25.0, 0.0], [24.5, 0.0], [3.0, 4.0]])
    labels, reasons = correspondence_labels(est, lm, [True, True, True, False], 9.0)
    assert labels.tolist() == [2, IGNORE, 1, IGNORE]
    assert reasons == [LABELED, TOO_FAR, LABELED, EMPTY]
    # exactly half the diagonal stays labeled
    labels, _ = correspondence_labels(t([[4.5, 0.0]]), t([[0.0, 0.0]]), [True], 9.0)
    assert labels.tolist() == [0]


def test_correspondence_loss_examples():
    assert float(correspondence_loss(t([[0.0] * 4]), torch.tensor([1]))) == pytest.approx(math.log(4))
    assert float(correspondence_loss(t([[1.0, 0.0]]), torch.tensor([0]))) == pytest.approx(0.3133, abs=1e-4)
    assert float(correspondence_loss(t([[50.0, 0.0]]), torch.tensor([0]))) < 1e-20
    assert float(correspondence_loss(t([[1.0, 0.0]]), torch.tensor([IGNORE]))) == 0.0


def test_total_loss_examples():
    heat, corr, coords, occ, lm = random_fixture(3)
    diag = patch_diagonal_m(16, 0.5, 4)
    a = total_loss(t(heat), t(corr), t(coords), occ, t(lm), LossConfig(d_p=4, beta=0.0), diag)
    assert float(a.total) == float(a.dist)
    # perfect estimates and saturated logits
    heat = np.full((4, 4), -60.0)
    coords = np.stack(np.meshgrid(np.arange(4.0), np.arange(4.0)))
    heat[0, 0] = heat[0, 3] = heat[3, 0] = heat[3, 3] = 60.0
    lm = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]])
    corr = np.full((4, 2, 2), -60.0)
    for k, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        corr[k, r, c] = 60.0
    out = total_loss(t(heat), t(corr), t(coords), np.ones((4, 4), bool), t(lm), LossConfig(d_p=2), 10.0)
    assert float(out.total) < 1e-12


def test_all_empty_flags():
    heat, corr, coords, _, lm = random_fixture(4)
    out = total_loss(t(heat), t(corr), t(coords), np.zeros((16, 16), bool), t(lm), LossConfig(d_p=4), 5.0)
    assert float(out.total) == 0.0
    assert out.diagnostics["empty_dist"] and out.diagnostics["all_ignored"]


def test_translation_equivariance():
    heat, corr, coords, occ, lm = random_fixture(5)
    shift = np.array([123.25, -77.5])
    a = total_loss(t(heat), t(corr), t(coords), occ, t(lm), LossConfig(d_p=4), 8.0)
    b = total_loss(t(heat), t(corr), t(coords + shift[:, None, None]), occ, t(lm + shift), LossConfig(d_p=4), 8.0)
    np.testing.assert_allclose(b.estimates.numpy(), a.estimates.numpy() + shift, atol=1e-9)
    assert float(b.dist) == pytest.approx(float(a.dist), abs=1e-9)


def _fd_fixture(seed):
    # 8x8, d_P=2, L=3 with arg-min margins >= 1e-2 m
    rng = np.random.default_rng(seed)
    while True:
        heat, corr, coords, occ, lm = random_fixture(int(rng.integers(1 << 30)), H=8, W=8, d_p=2, L=3)
        occ[:] = rng.uniform(size=occ.shape) < 0.5
        out = total_loss(t(heat), t(corr), t(coords), occ, t(lm), LossConfig(d_p=2), 6.0)
        est = out.estimates.numpy()
        d = np.sort(np.linalg.norm(est[:, None] - lm[None], axis=-1), axis=1)
        if (d[:, 1] - d[:, 0]).min() >= 1e-2 and np.abs(d[:, 0] - 3.0).min() > 1e-2:
            return heat, corr, coords, occ, lm


@pytest.mark.parametrize("seed", range(3))
def test_finite_difference_gradients(seed):
    heat, corr, coords, occ, lm = _fd_fixture(seed)
    cfg = LossConfig(d_p=2)
    H, C, Lm = (t(x).requires_grad_() for x in (heat, corr, lm))
    out = total_loss(H, C, t(coords), occ, Lm, cfg, 6.0)
    out.total.backward()
    nearest = out.nearest

    def f(h, c, l):
        return float(total_loss(t(h), t(c), t(coords), occ, t(l), cfg, 6.0, nearest=nearest).total)

    eps = 1e-4
    for arr, grad, which in ((heat, H.grad, 0), (corr, C.grad, 1), (lm, Lm.grad, 2)):
        g = grad.numpy()
        for idx in np.ndindex(arr.shape):
            args = [heat.copy(), corr.copy(), lm.copy()]
            args[which][idx] += eps
            fp = f(*args)
            args[which][idx] -= 2 * eps
            fm = f(*args)
            num = (fp - fm) / (2 * eps)
            assert abs(num - g[idx]) <= 1e-4 * max(abs(num), abs(g[idx])) + 1e-8, (which, idx, num, g[idx])


def test_landmark_gradient_touches_only_argmins():
    heat, corr, coords, occ, lm = random_fixture(6, L=12)
    Lm = t(lm).requires_grad_()
    out = total_loss(t(heat), t(corr), t(coords), occ, Lm, LossConfig(d_p=4, beta=0.0), 8.0)
    out.total.backward()
    touched = set(out.nearest[out.occupied].tolist())
    for j in range(12):
        assert bool(Lm.grad[j].abs().sum() > 0) == (j in touched)
