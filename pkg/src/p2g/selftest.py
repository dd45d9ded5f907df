"""Condensed oracle and gradient suites behind `p2g selftest`.

Each check re-derives expected values from an independent route (naive
renderer, brute-force scans, finite differences, closed forms) and
compares the production path against it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, double_precision, finite_difference
from .gaussians import GaussianSet, camera_on_circle
from .losses import LossConfig, lambda_pc
from .pointcloud import PointCloud, chamfer, emd, fps, knn_points
from .reference import render_reference
from .renderer import render


def _random_set(seed, n, scale_hi=0.25):
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    return (rng.uniform(-0.6, 0.6, size=(n, 3)),
            rng.uniform(0.02, scale_hi, size=(n, 3)),
            quats,
            rng.uniform(0.1, 0.9, size=n),
            rng.uniform(0.05, 0.95, size=(n, 3)))


def check_renderer_oracle(seeds=(0, 1, 2), n=32, res=64, tol=1e-6):
    worst = 0.0
    for seed in seeds:
        c, s, q, o, col = _random_set(seed, n)
        cam = camera_on_circle(0.9 * seed + 0.3, 0.2, 2.2, res)
        gs = GaussianSet.from_arrays(c, s, q, o, col, dtype=np.float64)
        out = render(gs, cam, early_stop=False)
        rgb, alpha = render_reference(c, s, q, o, col, cam)
        worst = max(worst, float(np.abs(out.rgb.data - rgb).max()),
                    float(np.abs(out.alpha.data - alpha).max()))
    return worst < tol, f"max |tiled - naive| = {worst:.2e}"


def check_renderer_gradients(seed=0, n=5, res=32):
    with double_precision():
        c, s, q, o, col = _random_set(seed, n)
        cam = camera_on_circle(0.4, 0.25, 2.2, res)
        rng = np.random.default_rng(seed + 99)
        wr = rng.normal(size=(res, res, 3))
        wa = rng.normal(size=(res, res))
        gs = GaussianSet.from_arrays(c, s, q, o, col, requires_grad=True)
        with Tape():
            img = render(gs, cam, early_stop=False)
            loss = (img.rgb * Tensor(wr)).sum() + (img.alpha * Tensor(wa)).sum()
            backward(loss)

        def f():
            im = render(gs, cam, early_stop=False)
            return float((im.rgb.data * wr).sum() + (im.alpha.data * wa).sum())

        bad = total = 0
        for p in (gs.centers, gs.scales, gs.quats, gs.opacities, gs.colors):
            fd = finite_difference(f, p)
            mask = np.abs(fd) > 1e-6
            rel = np.abs(p.grad - fd)[mask] / np.abs(fd[mask])
            total += int(mask.sum())
            bad += int((rel >= 1e-4).sum())
    frac = 1.0 - bad / max(total, 1)
    return frac >= 0.95, f"{frac * 100:.1f}% of renderer grads match finite differences"


def check_kernel_oracles(seed=0, n=128):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    cloud = PointCloud(pts, np.clip(rng.uniform(0, 1, size=(n, 3)), 0, 1))
    # fps vs independent greedy
    start = 3
    sel = fps(cloud, 16, start=start).indices
    dist = np.full(n, np.inf)
    cur, expect = start, []
    for _ in range(16):
        expect.append(cur)
        dist = np.minimum(dist, ((pts - pts[cur]) ** 2).sum(axis=1))
        cur = int(np.argmax(dist))
    ok_fps = np.array_equal(sel, np.array(expect))
    # knn vs exhaustive
    k = 8
    idx = knn_points(pts[:32], pts, k)
    d = ((pts[:32, None, :] - pts[None, :, :]) ** 2).sum(-1)
    ok_knn = np.array_equal(idx, np.argsort(d, axis=1, kind="stable")[:, :k])
    # chamfer vs quadratic scan
    b = PointCloud(rng.uniform(-1, 1, size=(n, 3)), cloud.colors)
    da = ((pts[:, None, :] - b.positions[None, :, :]) ** 2).sum(-1)
    brute = da.min(axis=1).mean() + da.min(axis=0).mean()
    ok_cd = abs(chamfer(cloud, b) - brute) < 1e-9
    # sinkhorn vs hungarian
    a16 = PointCloud(rng.uniform(-1, 1, size=(16, 3)), np.zeros((16, 3)))
    b16 = PointCloud(rng.uniform(-1, 1, size=(16, 3)), np.zeros((16, 3)))
    exact = emd(a16, b16, method="exact")
    approx = emd(a16, b16, method="sinkhorn")
    ok_emd = abs(approx - exact) <= 0.05 * exact
    ok = ok_fps and ok_knn and ok_cd and ok_emd
    return ok, (f"fps={ok_fps} knn={ok_knn} chamfer={ok_cd} "
                f"sinkhorn/hungarian={approx:.4f}/{exact:.4f}")


def check_schedule():
    cfg = LossConfig(total_steps=1000)
    vals = (lambda_pc(0, cfg), lambda_pc(500, cfg), lambda_pc(1000, cfg))
    ok = (abs(vals[0] - 1.0) < 1e-9 and abs(vals[1] - 0.525) < 1e-9
          and abs(vals[2] - 0.05) < 1e-9)
    return ok, f"lambda_pc(0, T/2, T) = {vals}"


def run_selftest():
    checks = [
        ("renderer-vs-naive-oracle", check_renderer_oracle),
        ("renderer-finite-differences", check_renderer_gradients),
        ("pointcloud-kernel-oracles", check_kernel_oracles),
        ("annealing-schedule", check_schedule),
    ]
    results = []
    for name, fn in checks:
        ok, detail = fn()
        results.append((name, ok, detail))
    return results
