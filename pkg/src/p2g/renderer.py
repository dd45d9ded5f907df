"""Tile-based forward rasterization and analytic backward pass.

The per-pixel compositing work runs in the selected kernel backend; the
per-Gaussian projection chain (quaternion -> covariance -> EWA Jacobian ->
splat covariance) is batched float64 numpy shared by both backends. The
backward rederives the compositing back-to-front inside the kernel and
chains splat-space gradients to all five parameter groups here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .gaussians import DILATION, Camera, GaussianSet, camera_on_circle

TILE = 16
QCUT = 9.0  # 3-sigma fragment cutoff, applied identically in the oracle
EARLY_STOP_T = 1e-4


@dataclass
class RenderedImage:
    rgb: Tensor    # (H,W,3) in [0,1]
    alpha: Tensor  # (H,W) in [0,1]


@dataclass
class TileBins:
    tile: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray  # (tiles_x*tiles_y + 1,)
    ids: np.ndarray      # gaussian index per entry, sorted by (tile, depth, index)


def _project_batch(centers, scales, quats, cam: Camera, dilation: float):
    """Vectorized projection of N gaussians; returns kernel-facing arrays and
    the intermediates the backward chain needs (all float64)."""
    n = centers.shape[0]
    qnorm = np.linalg.norm(quats, axis=1, keepdims=True)
    qn = quats / qnorm
    from .gaussians import quat_to_rotmat

    rot = quat_to_rotmat(qn)                      # (N,3,3)
    m = rot * scales[:, None, :]                  # R @ diag(s)
    sigma = m @ np.swapaxes(m, 1, 2)              # (N,3,3)

    w3 = cam.rotation
    t = centers @ w3.T + cam.translation          # view space
    valid = t[:, 2] > cam.near

    z = np.where(valid, t[:, 2], 1.0)
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * t[:, 0] / (z * z)
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * t[:, 1] / (z * z)

    u = j @ w3                                    # (N,2,3)
    s2 = u @ sigma @ np.swapaxes(u, 1, 2)
    s2[:, 0, 0] += dilation
    s2[:, 1, 1] += dilation

    det = s2[:, 0, 0] * s2[:, 1, 1] - s2[:, 0, 1] * s2[:, 1, 0]
    det = np.where(valid, det, 1.0)
    conic = np.stack([s2[:, 1, 1] / det, -s2[:, 0, 1] / det, s2[:, 0, 0] / det], axis=1)

    means2d = np.stack([cam.fx * t[:, 0] / z + cam.cx,
                        cam.fy * t[:, 1] / z + cam.cy], axis=1)
    radii = 3.0 * np.sqrt(np.maximum(np.stack([s2[:, 0, 0], s2[:, 1, 1]], axis=1), 0.0))
    depths = t[:, 2]
    aux = dict(qn=qn, qnorm=qnorm, rot=rot, m=m, sigma=sigma, t=t, j=j, u=u,
               conic=conic, valid=valid, w3=w3, scales=scales)
    return means2d, conic, radii, depths, valid, aux


def build_tile_bins(means2d, radii, depths, valid, width, height, tile=TILE) -> TileBins:
    """Assign each kept gaussian to every tile its 3-sigma bbox touches,
    per-tile sorted ascending by (view depth, index)."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    # pixel-center index ranges covered by the bbox
    jx0 = np.ceil(means2d[:, 0] - radii[:, 0] - 0.5).astype(np.int64)
    jx1 = np.floor(means2d[:, 0] + radii[:, 0] - 0.5).astype(np.int64)
    jy0 = np.ceil(means2d[:, 1] - radii[:, 1] - 0.5).astype(np.int64)
    jy1 = np.floor(means2d[:, 1] + radii[:, 1] - 0.5).astype(np.int64)
    jx0 = np.maximum(jx0, 0)
    jy0 = np.maximum(jy0, 0)
    jx1 = np.minimum(jx1, width - 1)
    jy1 = np.minimum(jy1, height - 1)
    keep = valid & (jx0 <= jx1) & (jy0 <= jy1)

    idx = np.nonzero(keep)[0]
    ntiles = tiles_x * tiles_y
    if idx.size == 0:
        return TileBins(tile, tiles_x, tiles_y,
                        np.zeros(ntiles + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int64))
    tx0, tx1 = jx0[idx] // tile, jx1[idx] // tile
    ty0, ty1 = jy0[idx] // tile, jy1[idx] // tile
    w = tx1 - tx0 + 1
    h = ty1 - ty0 + 1
    counts = w * h
    starts = np.concatenate([[0], np.cumsum(counts)])
    total = int(starts[-1])
    owner = np.repeat(np.arange(idx.size), counts)
    local = np.arange(total) - starts[owner]
    ty = ty0[owner] + local // w[owner]
    tx = tx0[owner] + local % w[owner]
    tile_of = ty * tiles_x + tx
    gid = idx[owner]
    order = np.lexsort((gid, depths[gid], tile_of))
    tile_sorted = tile_of[order]
    ids = gid[order]
    offsets = np.searchsorted(tile_sorted, np.arange(ntiles + 1)).astype(np.int64)
    return TileBins(tile, tiles_x, tiles_y, offsets, ids)


def cull_and_bin(gset: GaussianSet, cam: Camera, dilation: float = DILATION,
                 tile: int = TILE) -> TileBins:
    means2d, conic, radii, depths, valid, _ = _project_batch(
        gset.centers.data.astype(np.float64), gset.scales.data.astype(np.float64),
        gset.quats.data.astype(np.float64), cam, dilation)
    return build_tile_bins(means2d, radii, depths, valid, cam.width, cam.height, tile)


# partial derivatives of R(q) w.r.t. (w,x,y,z); filled per gaussian below
def _rot_quat_grads(qn):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zeros = np.zeros_like(w)
    dw = np.stack([zeros, -2 * z, 2 * y, 2 * z, zeros, -2 * x, -2 * y, 2 * x, zeros], axis=1)
    dx = np.stack([zeros, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1)
    dy = np.stack([-4 * y, 2 * x, 2 * w, 2 * x, zeros, 2 * z, -2 * w, 2 * z, -4 * y], axis=1)
    dz = np.stack([-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zeros], axis=1)
    return np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)


def render(gset: GaussianSet, cam: Camera, background=(1.0, 1.0, 1.0),
           early_stop: bool = True, dilation: float = DILATION,
           tile: int = TILE, qcut: float = QCUT) -> RenderedImage:
    """Differentiable front-to-back splat of a GaussianSet."""
    dtype = gset.centers.dtype
    centers = gset.centers.data.astype(np.float64)
    scales = gset.scales.data.astype(np.float64)
    quats = gset.quats.data.astype(np.float64)
    opac64 = gset.opacities.data.astype(np.float64)
    col64 = gset.colors.data.astype(np.float64)

    means2d, conic, radii, depths, valid, aux = _project_batch(centers, scales, quats, cam, dilation)
    bins = build_tile_bins(means2d, radii, depths, valid, cam.width, cam.height, tile)

    bg = np.asarray(background, dtype=dtype)
    stop_t = EARLY_STOP_T if early_stop else 0.0
    k_means = np.ascontiguousarray(means2d, dtype=dtype)
    k_conic = np.ascontiguousarray(conic, dtype=dtype)
    k_opac = np.ascontiguousarray(opac64, dtype=dtype)
    k_col = np.ascontiguousarray(col64, dtype=dtype)
    rgb_arr, alpha_arr = kernels.render_forward(
        k_means, k_conic, k_opac, k_col, bins.offsets, bins.ids,
        cam.width, cam.height, tile, bg, dtype.type(stop_t), dtype.type(qcut))

    rgb = Tensor(rgb_arr, dtype=dtype)
    alpha = Tensor(alpha_arr, dtype=dtype)

    def backward_fn(g_rgb, g_alpha):
        d_means2d = np.zeros_like(k_means)
        d_conic = np.zeros_like(k_conic)
        d_opac = np.zeros_like(k_opac)
        d_col = np.zeros_like(k_col)
        kernels.render_backward(
            k_means, k_conic, k_opac, k_col, bins.offsets, bins.ids,
            cam.width, cam.height, tile, bg, dtype.type(stop_t), dtype.type(qcut),
            np.ascontiguousarray(g_rgb, dtype=dtype),
            np.ascontiguousarray(g_alpha, dtype=dtype),
            d_means2d, d_conic, d_opac, d_col)

        # chain splat-space grads back through the projection (float64)
        dm2 = d_means2d.astype(np.float64)
        dcn = d_conic.astype(np.float64)
        v = aux["valid"]
        dm2[~v] = 0.0
        dcn[~v] = 0.0

        # conic -> splat covariance: dSigma2 = -A G A with A = conic matrix
        a_mat = np.empty((centers.shape[0], 2, 2))
        a_mat[:, 0, 0] = aux["conic"][:, 0]
        a_mat[:, 0, 1] = a_mat[:, 1, 0] = aux["conic"][:, 1]
        a_mat[:, 1, 1] = aux["conic"][:, 2]
        g_a = np.empty_like(a_mat)
        g_a[:, 0, 0] = dcn[:, 0]
        g_a[:, 0, 1] = g_a[:, 1, 0] = 0.5 * dcn[:, 1]
        g_a[:, 1, 1] = dcn[:, 2]
        g_s2 = -a_mat @ g_a @ a_mat

        u, sigma, m, rot, t, j = aux["u"], aux["sigma"], aux["m"], aux["rot"], aux["t"], aux["j"]
        g_sigma = np.swapaxes(u, 1, 2) @ g_s2 @ u
        g_u = 2.0 * g_s2 @ u @ sigma
        g_j = g_u @ aux["w3"].T

        z = np.where(v, t[:, 2], 1.0)
        inv_z2 = 1.0 / (z * z)
        g_t = np.zeros_like(t)
        g_t[:, 0] = g_j[:, 0, 2] * (-cam.fx * inv_z2)
        g_t[:, 1] = g_j[:, 1, 2] * (-cam.fy * inv_z2)
        g_t[:, 2] = (g_j[:, 0, 0] * (-cam.fx * inv_z2)
                     + g_j[:, 1, 1] * (-cam.fy * inv_z2)
                     + g_j[:, 0, 2] * (2.0 * cam.fx * t[:, 0] / (z * z * z))
                     + g_j[:, 1, 2] * (2.0 * cam.fy * t[:, 1] / (z * z * z)))
        # screen position shares the same Jacobian
        g_t += np.einsum("nij,ni->nj", j, dm2)
        g_centers = g_t @ aux["w3"]

        g_m = 2.0 * g_sigma @ m
        g_scales = np.einsum("nab,nab->nb", g_m, rot)
        g_rot = g_m * aux["scales"][:, None, :]
        dr_dq = _rot_quat_grads(aux["qn"])
        g_qn = np.einsum("nab,nkab->nk", g_rot, dr_dq)
        qn = aux["qn"]
        g_quats = (g_qn - qn * (qn * g_qn).sum(axis=1, keepdims=True)) / aux["qnorm"]

        g_centers[~v] = 0.0
        g_scales[~v] = 0.0
        g_quats[~v] = 0.0
        return (g_centers.astype(dtype), g_scales.astype(dtype),
                g_quats.astype(dtype), d_opac, d_col)

    ad.record((rgb, alpha),
              (gset.centers, gset.scales, gset.quats, gset.opacities, gset.colors),
              backward_fn)
    return RenderedImage(rgb, alpha)


def turntable_cameras(k: int, radius: float = 2.0, elevation_deg: float = 15.0,
                      resolution: int = 64, focal_scale: float = 0.8):
    el = np.deg2rad(elevation_deg)
    return [camera_on_circle(2.0 * np.pi * i / k, el, radius, resolution, focal_scale)
            for i in range(k)]


def render_turntable(gset: GaussianSet, k: int, radius: float = 2.0,
                     elevation_deg: float = 15.0, resolution: int = 64,
                     background=(1.0, 1.0, 1.0), focal_scale: float = 0.8):
    """K renders from azimuth-uniform cameras looking at the origin."""
    if k < 1:
        raise ValueError("need at least one view")
    cams = turntable_cameras(k, radius, elevation_deg, resolution, focal_scale)
    return [render(gset, cam, background=background) for cam in cams], cams
