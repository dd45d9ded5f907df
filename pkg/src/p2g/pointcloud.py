"""Point-cloud kernels: sampling, grouping, jitter, and set distances.

Chamfer uses squared distances; EMD is the mean (unsquared) assignment
distance — exact Hungarian up to EMD_EXACT_MAX points, entropic Sinkhorn
above that (an approximation, flagged via `emd_is_exact`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels

EMD_EXACT_MAX = 256
SINKHORN_ITERS = 100
SINKHORN_EPS_FRAC = 0.01  # epsilon = frac * scene diameter
UPSAMPLE_OFFSET_MAX = 0.05
JITTER_XYZ = 0.01
JITTER_RGB = 0.02
POSITION_CLIP = 1.1


@dataclass
class PointCloud:
    positions: np.ndarray  # (N,3) in the normalized scene box
    colors: np.ndarray     # (N,3) in [0,1]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N,3), got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ValueError("colors must match positions")
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite positions")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.positions[idx].copy(), self.colors[idx].copy())


@dataclass
class SamplingIndex:
    indices: np.ndarray
    seed: int | None


def fps(cloud: PointCloud, k: int, seed: int | None = 0,
        start: int | None = None) -> SamplingIndex:
    """Greedy max-min selection; the start point comes from `seed` unless
    given explicitly (ties in the argmax break toward the lowest index)."""
    n = cloud.n
    if not 1 <= k <= n:
        raise ValueError(f"fps: k={k} out of range 1..{n}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    idx = kernels.fps_greedy(np.ascontiguousarray(cloud.positions), k, start)
    return SamplingIndex(idx, seed)


def fps_points(points: np.ndarray, k: int, start: int) -> np.ndarray:
    return kernels.fps_greedy(np.ascontiguousarray(np.asarray(points, dtype=np.float64)), k, start)


def knn_group(query: np.ndarray, cloud: PointCloud, k: int):
    """k nearest reference points per query (ties by index) and the
    neighbor-minus-query offsets."""
    if k > cloud.n:
        raise ValueError(f"knn_group: k={k} exceeds cloud size {cloud.n}")
    query = np.asarray(query, dtype=np.float64)
    idx = kernels.knn(np.ascontiguousarray(query), np.ascontiguousarray(cloud.positions), k)
    offsets = cloud.positions[idx] - query[:, None, :]
    return idx, offsets


def knn_points(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    return kernels.knn(np.ascontiguousarray(np.asarray(query, dtype=np.float64)),
                       np.ascontiguousarray(np.asarray(ref, dtype=np.float64)), k)


def upsample(cloud: PointCloud, factor: int, offset_net=None) -> PointCloud:
    """Each parent spawns `factor` children at bounded learned offsets;
    children inherit the parent color. `offset_net(positions, colors)` must
    return (N, factor, 3) raw offsets (tanh-bounded here); None means zero
    offsets."""
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    n = cloud.n
    if offset_net is None:
        raw = np.zeros((n, factor, 3))
    else:
        raw = np.asarray(offset_net(cloud.positions, cloud.colors), dtype=np.float64)
        if raw.shape != (n, factor, 3):
            raise ValueError(f"offset net returned {raw.shape}, expected {(n, factor, 3)}")
    children = cloud.positions[:, None, :] + UPSAMPLE_OFFSET_MAX * np.tanh(raw)
    colors = np.repeat(cloud.colors, factor, axis=0)
    return PointCloud(children.reshape(-1, 3), colors)


def jitter(cloud: PointCloud, sigma_xyz: float = JITTER_XYZ,
           sigma_rgb: float = JITTER_RGB, seed: int = 0) -> PointCloud:
    if sigma_xyz < 0 or sigma_rgb < 0:
        raise ValueError("jitter sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    pos = cloud.positions + sigma_xyz * rng.standard_normal(cloud.positions.shape)
    col = cloud.colors + sigma_rgb * rng.standard_normal(cloud.colors.shape)
    return PointCloud(np.clip(pos, -POSITION_CLIP, POSITION_CLIP), np.clip(col, 0.0, 1.0))


def chamfer(a: PointCloud | np.ndarray, b: PointCloud | np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance (positions only)."""
    pa = a.positions if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.positions if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer of an empty cloud")
    _, dab = kernels.nn_sq(np.ascontiguousarray(pa), np.ascontiguousarray(pb))
    _, dba = kernels.nn_sq(np.ascontiguousarray(pb), np.ascontiguousarray(pa))
    return float(dab.mean() + dba.mean())


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.maximum((d * d).sum(axis=-1), 0.0))


def emd_hungarian(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.optimize import linear_sum_assignment

    cost = _pairwise_dist(a, b)
    ri, ci = linear_sum_assignment(cost)
    return float(cost[ri, ci].mean())


def sinkhorn_plan(cost: np.ndarray, eps: float, iters: int = SINKHORN_ITERS) -> np.ndarray:
    """Entropic OT plan with uniform marginals (log-domain updates)."""
    n, m = cost.shape
    log_mu = -np.log(n)
    log_nu = -np.log(m)
    f = np.zeros(n)
    g = np.zeros(m)
    mk = -cost / eps
    for _ in range(iters):
        f = eps * (log_mu - _logsumexp(mk + g[None, :] / eps, axis=1))
        g = eps * (log_nu - _logsumexp(mk + f[:, None] / eps, axis=0))
    return np.exp(mk + f[:, None] / eps + g[None, :] / eps)


def _logsumexp(x, axis):
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def emd(a: PointCloud | np.ndarray, b: PointCloud | np.ndarray,
        method: str = "auto") -> float:
    """Optimal-assignment mean distance between equal-size clouds."""
    pa = a.positions if isinstance(a, PointCloud) else np.asarray(a, dtype=np.float64)
    pb = b.positions if isinstance(b, PointCloud) else np.asarray(b, dtype=np.float64)
    if pa.shape[0] != pb.shape[0]:
        raise ValueError(f"emd needs equal sizes, got {pa.shape[0]} vs {pb.shape[0]}")
    if method == "auto":
        method = "exact" if pa.shape[0] <= EMD_EXACT_MAX else "sinkhorn"
    if method == "exact":
        return emd_hungarian(pa, pb)
    if method != "sinkhorn":
        raise ValueError(f"unknown emd method {method!r}")
    cost = _pairwise_dist(pa, pb)
    both = np.concatenate([pa, pb], axis=0)
    diameter = float(np.linalg.norm(both.max(axis=0) - both.min(axis=0)))
    eps = max(SINKHORN_EPS_FRAC * diameter, 1e-9)
    plan = sinkhorn_plan(cost, eps)
    return float((plan * cost).sum())


def emd_is_exact(n: int, method: str = "auto") -> bool:
    return method == "exact" or (method == "auto" and n <= EMD_EXACT_MAX)


# ---------------------------------------------------------------------------
# file formats: text "x y z r g b" per line; binary magic P2GP

CLOUD_BINARY_MAGIC = b"P2GP"


def save_cloud_text(path, cloud: PointCloud):
    rows = np.concatenate([cloud.positions, cloud.colors], axis=1)
    with open(path, "w") as f:
        for r in rows:
            f.write(" ".join(f"{v:.8g}" for v in r) + "\n")


def load_cloud_text(path) -> PointCloud:
    rows = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if rows.ndim != 2 or rows.shape[1] != 6:
        raise ValueError(f"{path}: expected 6 floats per line, got shape {rows.shape}")
    return PointCloud(rows[:, :3], np.clip(rows[:, 3:], 0.0, 1.0))


def save_cloud_binary(path, cloud: PointCloud):
    rows = np.concatenate([cloud.positions, cloud.colors], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(CLOUD_BINARY_MAGIC)
        f.write(struct.pack("<I", cloud.n))
        f.write(rows.tobytes())


def load_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLOUD_BINARY_MAGIC:
            raise ValueError(f"{path}: bad point-cloud magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        rows = np.frombuffer(f.read(4 * 6 * n), dtype="<f4").reshape(n, 6).astype(np.float64)
    return PointCloud(rows[:, :3], np.clip(rows[:, 3:], 0.0, 1.0))
