"""Pose-aware projection: map pixel-aligned image features onto the points
visible under a camera, treating the cloud as volumetric and opaque.

Visibility is a z-buffer of small disks; a point is visible iff it wins at
least one pixel within a depth tolerance. Feature lookup is bilinear and
differentiable w.r.t. the feature map; invisible points get the zero
feature (the attention path compensates for them).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .gaussians import Camera

SPLAT_RADIUS_PX = 1.5      # at 256x256 conditioning resolution
SPLAT_RADIUS_REF_RES = 256
DEPTH_TOL_FRAC = 0.01      # z-ownership tolerance, fraction of scene diameter


@dataclass
class FeatureMap:
    data: Tensor        # (C, Hf, Wf)
    camera: Camera
    stride: float       # image pixels per feature cell

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class VisibilityMask:
    visible: np.ndarray  # (M,) bool
    pixels: np.ndarray   # (M,2) continuous pixel coords (undefined when out of frustum)
    depths: np.ndarray   # (M,)


def default_splat_radius(cam: Camera) -> float:
    return SPLAT_RADIUS_PX * min(cam.width, cam.height) / SPLAT_RADIUS_REF_RES


def project_points(points: np.ndarray, cam: Camera):
    """Perspective projection; returns (pixels (M,2), depths (M,), in_front (M,))."""
    points = np.asarray(points, dtype=np.float64)
    view = cam.to_view(points)
    z = view[:, 2]
    in_front = z > cam.near
    zsafe = np.where(in_front, z, 1.0)
    u = cam.fx * view[:, 0] / zsafe + cam.cx
    v = cam.fy * view[:, 1] / zsafe + cam.cy
    return np.stack([u, v], axis=1), z, in_front


def visibility_zbuffer(points: np.ndarray, cam: Camera,
                       splat_radius_px: float | None = None,
                       depth_tol: float | None = None) -> VisibilityMask:
    points = np.asarray(points, dtype=np.float64)
    radius = default_splat_radius(cam) if splat_radius_px is None else splat_radius_px
    if radius <= 0:
        raise ValueError("splat radius must be positive")
    if depth_tol is None:
        span = points.max(axis=0) - points.min(axis=0)
        depth_tol = DEPTH_TOL_FRAC * max(float(np.linalg.norm(span)), 1e-6)
    uv, z, in_front = project_points(points, cam)
    uvc = np.ascontiguousarray(np.where(in_front[:, None], uv, 0.0))
    zc = np.ascontiguousarray(np.where(in_front, z, np.inf))
    zbuf = kernels.zbuffer_build(uvc, zc, in_front, radius, cam.width, cam.height)
    visible = kernels.zbuffer_query(uvc, zc, in_front, radius, cam.width, cam.height,
                                    zbuf, depth_tol)
    return VisibilityMask(np.asarray(visible, dtype=bool), uv, z)


def bilinear_gather(fmap: Tensor, coords: np.ndarray, weights_mask: np.ndarray) -> Tensor:
    """Border-clamped bilinear lookup of (M,2) feature-grid coords from a
    (C,Hf,Wf) tensor, scaled per-row by `weights_mask` (0 silences a row and
    its gradient)."""
    c, hf, wf = fmap.shape
    fx = np.clip(coords[:, 0], 0.0, wf - 1.0)
    fy = np.clip(coords[:, 1], 0.0, hf - 1.0)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    wx = fx - x0
    wy = fy - y0
    chan = np.arange(c) * (hf * wf)
    m = coords.shape[0]

    def corner(yi, xi, wgt):
        idx = (yi * wf + xi)[:, None] + chan[None, :]
        part = ad.take_flat(fmap, idx, (m, c))
        return ad.scale_rows(part, wgt * weights_mask)

    out = corner(y0, x0, (1 - wx) * (1 - wy))
    out = ad.add(out, corner(y0, x1, wx * (1 - wy)))
    out = ad.add(out, corner(y1, x0, (1 - wx) * wy))
    out = ad.add(out, corner(y1, x1, wx * wy))
    return out


def image_to_feature_coords(uv: np.ndarray, stride: float) -> np.ndarray:
    """Continuous pixel coords -> feature-grid coords (cell centers at ints)."""
    return uv / stride - 0.5


def gather_features(fmap: FeatureMap, mask: VisibilityMask) -> Tensor:
    """Per-point image features: bilinear at the projected position for
    visible points, zero rows for invisible ones."""
    coords = image_to_feature_coords(np.where(mask.visible[:, None], mask.pixels, 0.0),
                                     fmap.stride)
    return bilinear_gather(fmap.data, coords, mask.visible.astype(np.float64))


def multi_view_gather(fmaps: list[FeatureMap], masks: list[VisibilityMask]) -> Tensor:
    """Mean of per-view gathers over the views where each point is visible;
    zero when visible in none."""
    if len(fmaps) != len(masks) or not fmaps:
        raise ValueError("need one visibility mask per feature map")
    counts = np.zeros(masks[0].visible.shape[0])
    total = None
    for fmap, mask in zip(fmaps, masks):
        g = gather_features(fmap, mask)
        counts += mask.visible
        total = g if total is None else ad.add(total, g)
    return ad.scale_rows(total, 1.0 / np.maximum(counts, 1.0))


def visibility_debug_image(mask: VisibilityMask, cam: Camera) -> np.ndarray:
    """White-where-visible dump of the z-buffer ownership, for debugging."""
    img = np.zeros((cam.height, cam.width))
    pts = mask.pixels[mask.visible]
    ix = np.clip(np.floor(pts[:, 0]).astype(int), 0, cam.width - 1)
    iy = np.clip(np.floor(pts[:, 1]).astype(int), 0, cam.height - 1)
    img[iy, ix] = 1.0
    return img
