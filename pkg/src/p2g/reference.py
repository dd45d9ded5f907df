"""Naive O(pixels x gaussians) renderer used as the rasterization oracle.

Deliberately independent of the tiled path: no binning, no early
termination, its own quaternion/covariance/Jacobian formulas written out
longhand. Composites every gaussian at every pixel in global (view depth,
index) order. Used by tests and `p2g selftest`.
"""

from __future__ import annotations

import numpy as np

from .gaussians import Camera


def _quat_matrix(q):
    w, x, y, z = q / np.sqrt(np.sum(q * q))
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def render_reference(centers, scales, quats, opacities, colors, cam: Camera,
                     background=(1.0, 1.0, 1.0), dilation: float = 0.3,
                     qcut: float = 9.0):
    """Returns (rgb (H,W,3), alpha (H,W)) in float64."""
    centers = np.asarray(centers, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    h, w = cam.height, cam.width
    r3 = cam.world_to_view[:3, :3]
    tr = cam.world_to_view[:3, 3]

    view = centers @ r3.T + tr
    order = [i for i in np.lexsort((np.arange(len(centers)), view[:, 2]))
             if view[i, 2] > cam.near]

    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    trans = np.ones((h, w))
    acc = np.zeros((h, w, 3))
    for i in order:
        tx, ty, tz = view[i]
        rot = _quat_matrix(quats[i])
        s = np.diag(scales[i])
        sigma = rot @ s @ s.T @ rot.T
        jac = np.array([
            [cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)],
            [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)],
        ])
        u = jac @ r3
        s2 = u @ sigma @ u.T + dilation * np.eye(2)
        inv = np.linalg.inv(s2)
        mx = cam.fx * tx / tz + cam.cx
        my = cam.fy * ty / tz + cam.cy
        dx = xs - mx
        dy = ys - my
        q = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        inside = (q <= qcut) & (q >= 0.0)
        a = np.where(inside, opacities[i] * np.exp(-0.5 * np.where(inside, q, 0.0)), 0.0)
        acc += (a * trans)[:, :, None] * colors[i][None, None, :]
        trans = trans * (1.0 - a)
    bg = np.asarray(background, dtype=np.float64)
    return acc + trans[:, :, None] * bg[None, None, :], 1.0 - trans
