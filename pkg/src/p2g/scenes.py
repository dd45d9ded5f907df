"""Procedural synthetic scenes: surface-sampled colored point clouds with
ground-truth supervision images rendered from a reference GaussianSet
(tiny isotropic splats at the dense points), so the training signal is
self-consistent with the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussians import Camera, GaussianSet, camera_on_circle, look_at
from .pointcloud import PointCloud, fps
from .renderer import render

SCENE_KINDS = ("sphere", "box", "torus", "union")
SPHERE_RADIUS = 0.8
CAMERA_RADIUS = 2.2
REF_OPACITY = 0.9
BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class GenParams:
    n_dense: int = 4096
    n_input: int = 512
    n_views: int = 12
    resolution: int = 64
    camera_radius: float = CAMERA_RADIUS


@dataclass
class Scene:
    """A generated object with its full pool of posed views."""
    dense: PointCloud
    input_cloud: PointCloud
    images: np.ndarray   # (P, R, R, 3)
    alphas: np.ndarray   # (P, R, R)
    cameras: list[Camera]
    kind: str
    seed: int
    ref_scale: float

    def reference_gaussians(self) -> GaussianSet:
        return reference_gaussians(self.dense, self.ref_scale)


@dataclass
class SceneSample:
    """One training unit: clouds, M posed views, and the conditioning pick."""
    dense: PointCloud
    input_cloud: PointCloud
    images: np.ndarray
    alphas: np.ndarray
    cameras: list[Camera]
    cond_index: int
    scene_id: str
    seed: int

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("a sample needs >= 2 views (1 conditioning + supervision)")


def _color_field(points: np.ndarray, rng: np.random.Generator,
                 base: np.ndarray | None = None) -> np.ndarray:
    """Smooth per-primitive coloring: base tone + sinusoidal variation."""
    if base is None:
        base = rng.uniform(0.25, 0.75, size=3)
    freq = rng.uniform(1.5, 4.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    axes = rng.standard_normal((3, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    wave = np.sin(points @ axes.T * freq + phase)
    return np.clip(base + 0.25 * wave, 0.0, 1.0)


def _sample_sphere(n: int, rng: np.random.Generator, radius: float = SPHERE_RADIUS):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def _sample_box(n: int, rng: np.random.Generator, half: float = 0.62):
    # area-weighted over the six faces (cube: uniform)
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [i for i in range(3) if i != a]
        pts[m, a] = sign[m] * half
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _sample_torus(n: int, rng: np.random.Generator, big: float = 0.55, small: float = 0.22):
    out = np.empty((n, 3))
    got = 0
    while got < n:
        m = 2 * (n - got)
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area density is proportional to big + small*cos(v); rejection-sample v
        keep = rng.uniform(0, big + small, size=m) < (big + small * np.cos(v))
        u, v = u[keep][: n - got], v[keep][: n - got]
        ring = big + small * np.cos(v)
        pts = np.stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)], axis=1)
        out[got:got + len(pts)] = pts
        got += len(pts)
    return out


def _sample_primitive(kind: str, n: int, rng: np.random.Generator):
    if kind == "sphere":
        return _sample_sphere(n, rng)
    if kind == "box":
        return _sample_box(n, rng)
    if kind == "torus":
        return _sample_torus(n, rng)
    raise ValueError(f"unknown primitive {kind!r}")


def surface_cloud(kind: str, n: int, rng: np.random.Generator) -> PointCloud:
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    if kind != "union":
        pts = _sample_primitive(kind, n, rng)
        return PointCloud(pts, _color_field(pts, rng))
    # union: 2-3 scaled/translated primitives, points split by surface share
    k = int(rng.integers(2, 4))
    kinds = rng.choice(["sphere", "box", "torus"], size=k)
    scales = rng.uniform(0.35, 0.55, size=k)
    weights = scales ** 2
    weights /= weights.sum()
    counts = np.maximum((weights * n).astype(int), 8)
    counts[-1] = n - counts[:-1].sum()
    offs = rng.uniform(-0.42, 0.42, size=(k, 3))
    parts, cols = [], []
    for kind_i, s, o, c in zip(kinds, scales, offs, counts):
        pts = _sample_primitive(str(kind_i), int(c), rng) * s + o
        parts.append(pts)
        cols.append(_color_field(pts, rng))
    pts = np.concatenate(parts)
    col = np.concatenate(cols)
    # renormalize into the working radius
    r = np.linalg.norm(pts, axis=1).max()
    if r > 0.85:
        pts = pts * (0.85 / r)
    return PointCloud(pts, col)


def reference_scale(dense: PointCloud) -> float:
    """Isotropic splat stddev from mean nearest-neighbour spacing."""
    from .pointcloud import knn_points

    sub = dense.positions[:: max(1, dense.n // 512)]
    idx = knn_points(sub, dense.positions, 2)
    d = np.linalg.norm(dense.positions[idx[:, 1]] - sub, axis=1)
    return float(np.clip(0.8 * d.mean(), 0.004, 0.05))


def reference_gaussians(dense: PointCloud, scale: float) -> GaussianSet:
    n = dense.n
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet.from_arrays(
        dense.positions, np.full((n, 3), scale), quats,
        np.full(n, REF_OPACITY), dense.colors)


def pose_cameras(n_views: int, resolution: int, rng: np.random.Generator,
                 radius: float = CAMERA_RADIUS) -> list[Camera]:
    """Stratified azimuths, elevations in a band, all looking at the origin."""
    az = (np.arange(n_views) + rng.uniform(0, 1, n_views)) * (2 * np.pi / n_views)
    el = np.deg2rad(rng.uniform(-5.0, 35.0, n_views))
    return [camera_on_circle(a, e, radius, resolution) for a, e in zip(az, el)]


def generate_scene(kind: str, seed: int, params: GenParams | None = None) -> Scene:
    params = params or GenParams()
    rng = np.random.default_rng(seed)
    dense = surface_cloud(kind, params.n_dense, rng)
    input_idx = fps(dense, params.n_input, start=int(rng.integers(dense.n)))
    input_cloud = dense.subset(input_idx.indices)
    cams = pose_cameras(params.n_views, params.resolution, rng, params.camera_radius)
    scale = reference_scale(dense)
    gset = reference_gaussians(dense, scale)
    images = np.empty((params.n_views, params.resolution, params.resolution, 3), dtype=np.float32)
    alphas = np.empty((params.n_views, params.resolution, params.resolution), dtype=np.float32)
    for i, cam in enumerate(cams):
        out = render(gset, cam, background=BACKGROUND)
        images[i] = out.rgb.data
        alphas[i] = out.alpha.data
    return Scene(dense, input_cloud, images, alphas, cams, kind, seed, scale)


def make_sample(scene: Scene, m: int, rng: np.random.Generator) -> SceneSample:
    """Pick M views from the pool; one of them conditions, the rest supervise."""
    if m < 2:
        raise ValueError("M must be >= 2")
    pick = rng.choice(len(scene.cameras), size=m, replace=False)
    cond = int(rng.integers(m))
    return SceneSample(
        scene.dense, scene.input_cloud,
        scene.images[pick], scene.alphas[pick],
        [scene.cameras[i] for i in pick], cond,
        f"{scene.kind}-{scene.seed}", scene.seed)


# ---------------------------------------------------------------------------
# on-disk dataset


def save_scene(path, scene: Scene):
    cams = np.stack([c.world_to_view for c in scene.cameras])
    intr = np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.near]
                     for c in scene.cameras])
    np.savez_compressed(
        path, dense_pos=scene.dense.positions, dense_col=scene.dense.colors,
        input_pos=scene.input_cloud.positions, input_col=scene.input_cloud.colors,
        images=scene.images, alphas=scene.alphas, cams=cams, intr=intr,
        kind=np.bytes_(scene.kind.encode()), seed=np.int64(scene.seed),
        ref_scale=np.float64(scene.ref_scale))


def load_scene(path) -> Scene:
    try:
        z = np.load(path)
        cams = [Camera(w, *intr[:4], int(intr[4]), int(intr[5]), intr[6])
                for w, intr in zip(z["cams"], z["intr"])]
        return Scene(
            PointCloud(z["dense_pos"], z["dense_col"]),
            PointCloud(z["input_pos"], z["input_col"]),
            z["images"], z["alphas"], cams,
            bytes(z["kind"]).decode(), int(z["seed"]), float(z["ref_scale"]))
    except (KeyError, ValueError, OSError) as e:
        raise ValueError(f"{path}: not a valid scene file ({e})") from e


def generate_dataset(out_dir, n_scenes: int, seed: int,
                     params: GenParams | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_scenes):
        kind = SCENE_KINDS[i % len(SCENE_KINDS)]
        scene = generate_scene(kind, seed * 1000 + i, params)
        p = out_dir / f"scene_{i:03d}.npz"
        save_scene(p, scene)
        paths.append(p)
    return paths


def load_dataset(data_dir) -> list[Scene]:
    paths = sorted(Path(data_dir).glob("scene_*.npz"))
    if not paths:
        raise ValueError(f"no scene_*.npz files in {data_dir}")
    return [load_scene(p) for p in paths]
