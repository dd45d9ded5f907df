"""Gaussian parameter types, covariance/projection math, and activations.

Conventions:
  * quaternions are (w, x, y, z), unit length,
  * view space is x-right / y-down / z-forward; a point projects to
    u = fx*x/z + cx, v = fy*y/z + cy with pixel centers at half-integers,
  * scene geometry lives in the normalized box [-1, 1]^3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# activation bounds: scales stay in a range that cannot vanish or swallow
# the scene; center offsets stay a small correction on top of the points
SCALE_MIN = 0.002
SCALE_MAX = 0.4
OFFSET_MAX = 0.1
# low-pass dilation added to the projected covariance diagonal (px^2)
DILATION = 0.3

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class Camera:
    world_to_view: np.ndarray  # 4x4
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.world_to_view = np.asarray(self.world_to_view, dtype=np.float64)
        if self.world_to_view.shape != (4, 4):
            raise ValueError("world_to_view must be 4x4")
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        r = self.world_to_view[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation block of world_to_view is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_view[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_view[:3, 3]

    def to_view(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same pose, resolution scaled by `factor` (for supersampling)."""
        return Camera(
            self.world_to_view.copy(),
            self.fx * factor, self.fy * factor,
            self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
            self.near,
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-view matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, dtype=np.float64)
    r = np.cross(upv, f)
    if np.linalg.norm(r) < 1e-8:
        r = np.cross(np.array([1.0, 0.0, 0.0]), f)
    r = r / np.linalg.norm(r)
    d = np.cross(r, f)
    w = np.eye(4)
    w[0, :3] = r
    w[1, :3] = d
    w[2, :3] = f
    w[:3, 3] = -w[:3, :3] @ eye
    return w


def camera_on_circle(azimuth: float, elevation: float, radius: float,
                     resolution: int, focal_scale: float = 0.8,
                     near: float = 0.05) -> Camera:
    """Camera on a sphere around the origin, looking at the origin."""
    ce, se = np.cos(elevation), np.sin(elevation)
    eye = radius * np.array([ce * np.cos(azimuth), se, ce * np.sin(azimuth)])
    f = focal_scale * resolution
    return Camera(look_at(eye, (0.0, 0.0, 0.0)), f, f,
                  resolution / 2.0, resolution / 2.0, resolution, resolution, near)


# ---------------------------------------------------------------------------
# covariance math (plain numpy; the renderer carries its own batched chain)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w,x,y,z) to rotation matrix; batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def build_covariance(scale, quat) -> np.ndarray:
    """Sigma = R S S^T R^T; accepts a single (3,)/(4,) pair or batches."""
    scale = np.asarray(scale, dtype=np.float64)
    quat = np.asarray(quat, dtype=np.float64)
    if not np.isfinite(scale).all() or not np.isfinite(quat).all():
        raise ValueError("non-finite covariance inputs")
    if (scale <= 0).any():
        raise ValueError("scales must be positive")
    quat = quat / np.linalg.norm(quat, axis=-1, keepdims=True)
    rot = quat_to_rotmat(quat)
    m = rot * scale[..., None, :]  # R @ diag(s)
    return m @ np.swapaxes(m, -1, -2)


def perspective_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Affine-approximation Jacobian of the projection at view-space point(s) t."""
    t = np.asarray(t, dtype=np.float64)
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    j = np.zeros(t.shape[:-1] + (2, 3))
    j[..., 0, 0] = fx / z
    j[..., 0, 2] = -fx * x / (z * z)
    j[..., 1, 1] = fy / z
    j[..., 1, 2] = -fy * y / (z * z)
    return j


def project_covariance(sigma: np.ndarray, center, cam: Camera,
                       dilation: float = DILATION):
    """Project a world covariance to a 2x2 splat covariance.

    Returns (sigma2d, ok); ok is False when the center sits at or behind
    the near plane (culled).
    """
    center = np.asarray(center, dtype=np.float64)
    t = cam.to_view(center[None, :])[0]
    if t[2] <= cam.near:
        return np.zeros((2, 2)), False
    j = perspective_jacobian(t, cam.fx, cam.fy)
    u = j @ cam.rotation
    s2 = u @ np.asarray(sigma, dtype=np.float64) @ u.T
    return s2 + dilation * np.eye(2), True


def gaussian_weight(conic: np.ndarray, delta) -> float:
    """exp(-0.5 * delta^T conic delta), exponent clamped to <= 0."""
    d = np.asarray(delta, dtype=np.float64)
    q = float(d @ np.asarray(conic, dtype=np.float64) @ d)
    return float(np.exp(-0.5 * max(q, 0.0)))


# ---------------------------------------------------------------------------
# activations


def activate_raw_params(raw_offset: Tensor, raw_scale: Tensor, raw_quat: Tensor,
                        raw_opacity: Tensor, raw_color: Tensor,
                        offset_max: float = OFFSET_MAX):
    """Map unbounded head outputs to valid Gaussian fields.

    Outputs satisfy the invariants for any raw magnitudes: scales in
    [SCALE_MIN, SCALE_MAX], opacity/color in [0,1], unit quaternions
    (identity fallback for zero rows), offsets bounded by `offset_max`.
    """
    offset = offset_max * ad.tanh(raw_offset)
    scale = SCALE_MIN + (SCALE_MAX - SCALE_MIN) * ad.sigmoid(raw_scale)
    quat = ad.normalize_rows(raw_quat, fallback=IDENTITY_QUAT)
    opacity = ad.sigmoid(raw_opacity)
    color = ad.sigmoid(raw_color)
    return offset, scale, quat, opacity, color


# ---------------------------------------------------------------------------
# Gaussian set


@dataclass
class GaussianSet:
    """N Gaussians as parallel field tensors (renderer fills their grads)."""

    centers: Tensor    # (N,3)
    scales: Tensor     # (N,3) positive stddevs
    quats: Tensor      # (N,4) unit (w,x,y,z)
    opacities: Tensor  # (N,)
    colors: Tensor     # (N,3) in [0,1]

    def __post_init__(self):
        n = self.centers.shape[0]
        for t, shp in ((self.centers, (n, 3)), (self.scales, (n, 3)),
                       (self.quats, (n, 4)), (self.opacities, (n,)),
                       (self.colors, (n, 3))):
            if t.shape != shp:
                raise ValueError(f"GaussianSet field shape {t.shape} != {shp}")

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def from_arrays(cls, centers, scales, quats, opacities, colors,
                    requires_grad: bool = False, dtype=None) -> "GaussianSet":
        mk = lambda a: Tensor(np.asarray(a), requires_grad=requires_grad, dtype=dtype)
        return cls(mk(centers), mk(scales), mk(quats), mk(opacities), mk(colors))

    def validate(self, atol: float = 1e-5):
        if (self.scales.data <= 0).any():
            raise ValueError("non-positive scale")
        norms = np.linalg.norm(self.quats.data, axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("quaternions not unit length")
        if self.opacities.data.min() < -atol or self.opacities.data.max() > 1 + atol:
            raise ValueError("opacity outside [0,1]")
        if self.colors.data.min() < -atol or self.colors.data.max() > 1 + atol:
            raise ValueError("color outside [0,1]")

    def flat_rows(self) -> np.ndarray:
        return np.concatenate(
            [self.centers.data, self.scales.data, self.quats.data,
             self.opacities.data[:, None], self.colors.data], axis=1
        ).astype(np.float64)

    @classmethod
    def from_flat_rows(cls, rows: np.ndarray) -> "GaussianSet":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != 14:
            raise ValueError(f"expected (N,14) rows, got {rows.shape}")
        return cls.from_arrays(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10],
                               rows[:, 10], rows[:, 11:14])


GAUSS_TEXT_HEADER = "P2G-GAUSS"
GAUSS_BINARY_MAGIC = b"P2GG"


def save_gaussians_text(path, gset: GaussianSet):
    rows = gset.flat_rows()
    with open(path, "w") as f:
        f.write(f"{GAUSS_TEXT_HEADER} {gset.n}\n")
        for r in rows:
            f.write(" ".join(f"{v:.8g}" for v in r) + "\n")


def load_gaussians_text(path) -> GaussianSet:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != GAUSS_TEXT_HEADER:
            raise ValueError(f"{path}: bad gaussian text header")
        n = int(header[1])
        rows = np.loadtxt(f, dtype=np.float64, ndmin=2)
    if rows.shape != (n, 14):
        raise ValueError(f"{path}: expected {n} rows of 14 values, got {rows.shape}")
    return GaussianSet.from_flat_rows(rows)


def save_gaussians_binary(path, gset: GaussianSet):
    rows = gset.flat_rows().astype("<f4")
    with open(path, "wb") as f:
        f.write(GAUSS_BINARY_MAGIC)
        f.write(struct.pack("<I", gset.n))
        f.write(rows.tobytes())


def load_gaussians_binary(path) -> GaussianSet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != GAUSS_BINARY_MAGIC:
            raise ValueError(f"{path}: bad gaussian binary magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        rows = np.frombuffer(f.read(4 * 14 * n), dtype="<f4").reshape(n, 14)
    return GaussianSet.from_flat_rows(rows)
