"""The point-to-Gaussian generator: image patch encoder, multi-scale point
encoder/decoder with fusion blocks (point feature extractor + pose-aware
projection + cross-attention, merged by average aggregation), and
multi-head Gaussian decoding with offset learning.

Geometry bookkeeping (farthest-point sampling, neighbour indices,
interpolation weights) is treated as constant w.r.t. gradients; learning
signal reaches positions through the decoded centers and the point-cloud
loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussians import Camera, GaussianSet, activate_raw_params
from .nn import Conv2d, Linear, Module
from .pointcloud import UPSAMPLE_OFFSET_MAX, PointCloud, fps_points, knn_points
from .projection import FeatureMap, gather_features, multi_view_gather, visibility_zbuffer

TOKEN_DIM = 64
FMAP_CHANNELS = 64
FMAP_STRIDE = 4
PATCH = 8
ATTN_HEADS = 4
CENTER_BOUND = 1.1  # tanh bound for direct center regression (offsets off)


@dataclass
class LevelSpec:
    points: int
    width: int
    k: int


def default_levels(n_points: int = 2048) -> list[LevelSpec]:
    base = [(n_points, 64, 16), (n_points // 4, 128, 16),
            (n_points // 16, 256, 16), (n_points // 64, 512, 16)]
    return [LevelSpec(*t) for t in base]


def single_scale_levels(n_points: int = 2048) -> list[LevelSpec]:
    return [LevelSpec(n_points, 64, 16) for _ in range(4)]


@dataclass
class GeneratorConfig:
    levels: list[LevelSpec] = field(default_factory=default_levels)
    upsample_factor: int = 4
    token_dim: int = TOKEN_DIM
    heads: int = ATTN_HEADS
    patch: int = PATCH
    use_projection: bool = True
    use_attention: bool = True
    multiscale: bool = True
    offsets: bool = True

    def __post_init__(self):
        if not self.multiscale:
            self.levels = single_scale_levels(self.levels[0].points)
        counts = [l.points for l in self.levels]
        if self.multiscale and any(a <= b for a, b in zip(counts, counts[1:])):
            raise ValueError(f"level point counts must strictly decrease: {counts}")

    def manifest(self) -> str:
        lines = ["[architecture]"]
        lines.append("levels = " + ";".join(f"{l.points},{l.width},{l.k}" for l in self.levels))
        for key in ("upsample_factor", "token_dim", "heads", "patch",
                    "use_projection", "use_attention", "multiscale", "offsets"):
            lines.append(f"{key} = {getattr(self, key)}")
        return "\n".join(lines)


@dataclass
class ImageTokens:
    tokens: Tensor          # (V * patches, token_dim)
    views: int
    patches_per_view: int


def _positional_encoding(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-d sin/cos grid encoding, (h*w, dim)."""
    half = dim // 2
    quarter = half // 2
    freqs = np.exp(-np.log(100.0) * np.arange(quarter) / max(quarter - 1, 1))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    parts = []
    for grid in (ys.ravel(), xs.ravel()):
        ang = grid[:, None] * freqs[None, :]
        parts.extend([np.sin(ang), np.cos(ang)])
    enc = np.concatenate(parts, axis=1)
    if enc.shape[1] < dim:
        enc = np.pad(enc, ((0, 0), (0, dim - enc.shape[1])))
    return enc[:, :dim]


class ImageEncoder(Module):
    """Three strided conv stages: a stride-4 pixel-aligned map for the
    projection path and stride-8 patch tokens for attention. A linear
    embedding of the flattened extrinsics tells attention which pose each
    view's tokens came from."""

    def __init__(self, rng: np.random.Generator, token_dim: int = TOKEN_DIM,
                 patch: int = PATCH, with_tokens: bool = True):
        self.conv1 = Conv2d(3, 32, 3, 2, 1, rng)
        self.conv2 = Conv2d(32, FMAP_CHANNELS, 3, 2, 1, rng)
        if with_tokens:
            self.conv3 = Conv2d(FMAP_CHANNELS, token_dim, 3, 2, 1, rng)
            self.cam_embed = Linear(16, token_dim, rng)
        self.with_tokens = with_tokens
        self.token_dim = token_dim
        self.patch = patch

    def _camera_vec(self, cam: Camera) -> np.ndarray:
        w = cam.world_to_view.copy()
        w[:3, 3] *= 0.25  # keep translation in the rotation's range
        return w.reshape(-1)

    def encode_view(self, image: np.ndarray, cam: Camera,
                    add_positional: bool = True):
        h, w = image.shape[:2]
        if h % self.patch or w % self.patch:
            raise ValueError(f"resolution {w}x{h} not divisible by patch {self.patch}")
        x = Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))
        c1 = ad.relu(self.conv1(x))
        c2 = ad.relu(self.conv2(c1))
        fmap = FeatureMap(c2, cam, float(FMAP_STRIDE))
        if not self.with_tokens:
            return None, fmap
        c3 = self.conv3(c2)
        th, tw = c3.shape[1], c3.shape[2]
        tokens = ad.transpose(ad.reshape(c3, (self.token_dim, th * tw)))
        cam_tok = self.cam_embed(Tensor(self._camera_vec(cam).reshape(1, 16)))
        tokens = ad.add(tokens, ad.reshape(cam_tok, (self.token_dim,)))
        if add_positional:
            tokens = ad.add(tokens, Tensor(_positional_encoding(th, tw, self.token_dim)))
        return tokens, fmap

    def __call__(self, images: np.ndarray, cams: list[Camera],
                 add_positional: bool = True):
        per_view = []
        fmaps = []
        for v in range(len(cams)):
            tokens, fmap = self.encode_view(images[v], cams[v], add_positional)
            per_view.append(tokens)
            fmaps.append(fmap)
        if not self.with_tokens:
            return None, fmaps
        all_tokens = per_view[0] if len(per_view) == 1 else ad.concat(per_view, axis=0)
        return ImageTokens(all_tokens, len(cams), per_view[0].shape[0]), fmaps


class PointFeatureExtractor(Module):
    """Local set abstraction: shared per-neighbour transform, max-pool over
    the neighbourhood, residual add."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.feat = Linear(width, width, rng)
        self.offset = Linear(3, width, rng)

    def __call__(self, feats: Tensor, positions: np.ndarray, k: int) -> Tensor:
        n, d = feats.shape
        k = min(k, n)
        idx = knn_points(positions, positions, k)
        rel = (positions[idx] - positions[:, None, :]).reshape(-1, 3)
        pf = self.feat(feats)
        po = self.offset(Tensor(rel))
        h = ad.relu(ad.add(ad.gather_rows(pf, idx.reshape(-1)), po))
        pooled = ad.max_axis(ad.reshape(h, (n, k, d)), axis=1)
        return ad.add(feats, pooled)


class CrossAttention(Module):
    """Multi-head attention with point tokens as queries and image tokens
    as keys/values; no residual here (aggregation combines the branches)."""

    def __init__(self, width: int, token_dim: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.wq = Linear(width, width, rng)
        self.wk = Linear(token_dim, width, rng)
        self.wv = Linear(token_dim, width, rng)
        self.wo = Linear(width, width, rng)
        self.heads = heads
        self.width = width

    @staticmethod
    def _head(x: Tensor, heads: int, h: int) -> Tensor:
        n, d = x.shape
        dh = d // heads
        x3 = ad.transpose(ad.reshape(x, (n, heads, dh)), (1, 0, 2))
        return ad.reshape(ad.gather_rows(x3, np.array([h])), (n, dh))

    def __call__(self, points: Tensor, tokens: Tensor) -> Tensor:
        q = self.wq(points)
        k = self.wk(tokens)
        v = self.wv(tokens)
        dh = self.width // self.heads
        scale = 1.0 / np.sqrt(dh)
        outs = []
        for h in range(self.heads):
            qh = self._head(q, self.heads, h)
            kh = self._head(k, self.heads, h)
            vh = self._head(v, self.heads, h)
            att = ad.softmax(ad.matmul(qh, ad.transpose(kh)) * scale)
            outs.append(ad.matmul(att, vh))
        return self.wo(ad.concat(outs, axis=-1))


def aggregate(branches: list[Tensor]) -> Tensor:
    """Elementwise average of the enabled feature branches."""
    total = branches[0]
    for b in branches[1:]:
        total = ad.add(total, b)
    return total * (1.0 / len(branches))


class APPDownBlock(Module):
    def __init__(self, spec: LevelSpec, cfg: GeneratorConfig, rng: np.random.Generator):
        self.extractor = PointFeatureExtractor(spec.width, rng)
        if cfg.use_attention:
            self.attention = CrossAttention(spec.width, cfg.token_dim, cfg.heads, rng)
        if cfg.use_projection:
            self.proj_fuse = Linear(FMAP_CHANNELS, spec.width, rng)
        self.spec = spec
        self.use_attention = cfg.use_attention
        self.use_projection = cfg.use_projection

    def __call__(self, feats: Tensor, positions: np.ndarray,
                 tokens: ImageTokens | None, fmaps: list[FeatureMap] | None) -> Tensor:
        tp = self.extractor(feats, positions, self.spec.k)
        branches = [tp]
        if self.use_projection:
            masks = [visibility_zbuffer(positions, fm.camera) for fm in fmaps]
            gathered = multi_view_gather(fmaps, masks)
            branches.append(self.proj_fuse(gathered))
        if self.use_attention:
            branches.append(self.attention(tp, tokens.tokens))
        return aggregate(branches)


class APPUpBlock(Module):
    """Inverse-distance interpolation from deep carriers to the skip level,
    concatenated with the skip features and fused."""

    def __init__(self, deep_width: int, skip_width: int, rng: np.random.Generator):
        self.fuse = Linear(deep_width + skip_width, skip_width, rng)

    def __call__(self, deep: Tensor, deep_pos: np.ndarray,
                 skip: Tensor, skip_pos: np.ndarray) -> Tensor:
        interp = interpolate_features(deep, deep_pos, skip_pos)
        return ad.relu(self.fuse(ad.concat([skip, interp], axis=-1)))


def inverse_distance_weights(query_pos: np.ndarray, ref_pos: np.ndarray,
                             k: int = 3, eps: float = 1e-8):
    k = min(k, ref_pos.shape[0])
    idx = knn_points(query_pos, ref_pos, k)
    d = np.linalg.norm(ref_pos[idx] - query_pos[:, None, :], axis=-1)
    w = 1.0 / (d + eps)
    coincident = d < 1e-12
    hit = coincident.any(axis=1)
    w[hit] = coincident[hit].astype(np.float64)
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolate_features(feats: Tensor, src_pos: np.ndarray,
                         dst_pos: np.ndarray, k: int = 3) -> Tensor:
    idx, w = inverse_distance_weights(dst_pos, src_pos, k)
    out = None
    for j in range(idx.shape[1]):
        part = ad.scale_rows(ad.gather_rows(feats, idx[:, j]), w[:, j])
        out = part if out is None else ad.add(out, part)
    return out


class Bottleneck(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.l1 = Linear(width, width, rng)
        self.l2 = Linear(width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.l2(ad.relu(self.l1(x))))


class UpsamplerNet(Module):
    """Deterministic learnable splitting: each parent emits `factor`
    children at tanh-bounded offsets predicted from its position+color.
    Zero-initialized head, so children start on their parents."""

    def __init__(self, factor: int, rng: np.random.Generator, hidden: int = 64):
        self.hidden = Linear(6, hidden, rng)
        self.out = Linear(hidden, factor * 3, rng, zero_init=True)
        self.factor = factor

    def __call__(self, cloud: PointCloud):
        n = cloud.n
        base = np.concatenate([cloud.positions, cloud.colors], axis=1)
        h = ad.relu(self.hidden(Tensor(base)))
        raw = ad.reshape(self.out(h), (n * self.factor, 3))
        parents = Tensor(np.repeat(cloud.positions, self.factor, axis=0))
        positions = ad.add(parents, UPSAMPLE_OFFSET_MAX * ad.tanh(raw))
        colors = np.repeat(cloud.colors, self.factor, axis=0)
        return positions, colors

    def as_offset_net(self):
        """Adapter for pointcloud.upsample: returns raw (N, factor, 3)."""

        def offset_net(positions, colors):
            with ad.no_grad():
                base = np.concatenate([positions, colors], axis=1)
                h = ad.relu(self.hidden(Tensor(base)))
                raw = self.out(h)
            return raw.data.reshape(positions.shape[0], self.factor, 3)

        return offset_net


def _logit(p: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    p = np.clip(p, eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


class GaussianHeads(Module):
    """Five zero-initialized linear heads. At init: centers sit on the base
    points, colors pass the base point colors through, rotation starts at
    identity, scales at the midpoint of their range."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.offset = Linear(width, 3, rng, zero_init=True)
        self.scale = Linear(width, 3, rng, zero_init=True)
        self.quat = Linear(width, 4, rng, zero_init=True, bias_init=(1.0, 0.0, 0.0, 0.0))
        self.opacity = Linear(width, 1, rng, zero_init=True)
        self.color = Linear(width, 3, rng, zero_init=True)

    def __call__(self, tokens: Tensor, base_positions: Tensor,
                 base_colors: np.ndarray, learn_offsets: bool = True) -> GaussianSet:
        n = tokens.shape[0]
        raw_off = self.offset(tokens)
        raw_scale = self.scale(tokens)
        raw_quat = self.quat(tokens)
        raw_opac = ad.reshape(self.opacity(tokens), (n,))
        raw_color = ad.add(self.color(tokens), Tensor(_logit(base_colors)))
        offset, scale, quat, opac, color = activate_raw_params(
            raw_off, raw_scale, raw_quat, raw_opac, raw_color)
        if learn_offsets:
            centers = ad.add(base_positions, offset)
        else:
            centers = CENTER_BOUND * ad.tanh(raw_off)
        return GaussianSet(centers, scale, quat, opac, color)


def content_fps_start(positions: np.ndarray) -> int:
    """Permutation-covariant start: the point farthest from the centroid."""
    d = positions - positions.mean(axis=0)
    return int(np.argmax((d * d).sum(axis=1)))


class PointToGaussianGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.upsampler = UpsamplerNet(cfg.upsample_factor, rng)
        if cfg.use_projection or cfg.use_attention:
            self.image_encoder = ImageEncoder(rng, cfg.token_dim, cfg.patch,
                                              with_tokens=cfg.use_attention)
        self.stem = Linear(6, cfg.levels[0].width, rng)
        self.down_blocks = [APPDownBlock(spec, cfg, rng) for spec in cfg.levels]
        self.expanders = [
            Linear(cfg.levels[i].width, cfg.levels[i + 1].width, rng)
            for i in range(len(cfg.levels) - 1)
        ] if cfg.multiscale else []
        self.bottleneck = Bottleneck(cfg.levels[-1].width, rng)
        widths = [spec.width for spec in cfg.levels]
        self.up_blocks = [
            APPUpBlock(widths[i + 1], widths[i], rng)
            for i in reversed(range(len(widths) - 1))
        ] if cfg.multiscale else []
        self.refine = APPUpBlock(widths[0], widths[0], rng)
        self.heads = GaussianHeads(widths[0], rng)

    def forward(self, cloud: PointCloud, images: np.ndarray, cams: list[Camera]):
        """Returns (GaussianSet, upsampled positions Tensor)."""
        cfg = self.cfg
        positions_t, colors_up = self.upsampler(cloud)
        pos0 = positions_t.data.astype(np.float64)
        if cfg.levels[0].points != pos0.shape[0]:
            raise ValueError(
                f"level-0 expects {cfg.levels[0].points} points, upsampler emitted {pos0.shape[0]}")

        tokens, fmaps = (None, None)
        if cfg.use_projection or cfg.use_attention:
            tokens, fmaps = self.image_encoder(images, cams)
        stem_out = ad.relu(self.stem(ad.concat([positions_t, Tensor(colors_up)], axis=-1)))

        skips = []
        positions = pos0
        feats = stem_out
        for lvl, block in enumerate(self.down_blocks):
            feats = block(feats, positions, tokens, fmaps)
            skips.append((feats, positions))
            if cfg.multiscale and lvl < len(self.down_blocks) - 1:
                nxt = cfg.levels[lvl + 1].points
                idx = fps_points(positions, nxt, content_fps_start(positions))
                feats = ad.relu(self.expanders[lvl](ad.gather_rows(feats, idx)))
                positions = positions[idx]

        feats = self.bottleneck(feats)

        if cfg.multiscale:
            for i, up in enumerate(self.up_blocks):
                skip_feats, skip_pos = skips[len(skips) - 2 - i]
                feats = up(feats, positions, skip_feats, skip_pos)
                positions = skip_pos
        feats = self.refine(feats, positions, stem_out, pos0)

        gset = self.heads(feats, positions_t, colors_up, learn_offsets=cfg.offsets)
        return gset, positions_t
