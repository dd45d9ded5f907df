"""Training objective: photometric + alpha + perceptual-proxy image terms,
plus annealed point-cloud shaping (chamfer + assignment distance) between
the upsampler output and the dense ground-truth cloud.

The perceptual proxy is a stack of three fixed random convolutions
(stride 2, widths 8/16/32, seed-determined, frozen); feature-space MSE
against pretrained-network LPIPS is out of scope, but the proxy keeps the
weighted perceptual pathway differentiable and exercised end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .nn import Module
from .pointcloud import EMD_EXACT_MAX, PointCloud, fps_points
from .renderer import RenderedImage

PERCEPTUAL_WIDTHS = (8, 16, 32)


@dataclass
class LossConfig:
    lambda_lpips: float = 1.0
    lambda_alpha: float = 1.0
    lambda_pc_start: float = 1.0
    lambda_pc_end: float = 0.05
    total_steps: int = 2000
    perceptual_seed: int = 7

    def __post_init__(self):
        if min(self.lambda_lpips, self.lambda_alpha) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.total_steps < 1:
            raise ValueError("schedule needs at least one step")


@dataclass
class LossBreakdown:
    total: float
    rgb_mse: float
    alpha_mse: float
    perceptual: float
    chamfer: float
    emd: float
    lambda_pc: float

    def additivity_gap(self, cfg: LossConfig) -> float:
        recon = (self.rgb_mse + cfg.lambda_lpips * self.perceptual
                 + cfg.lambda_alpha * self.alpha_mse
                 + self.lambda_pc * (self.chamfer + self.emd))
        return abs(self.total - recon)


def lambda_pc(step: int, cfg: LossConfig) -> float:
    """Cosine annealing of the point-cloud weight from start to end."""
    t = min(max(step, 0), cfg.total_steps) / cfg.total_steps
    lo, hi = cfg.lambda_pc_end, cfg.lambda_pc_start
    return lo + (hi - lo) * 0.5 * (1.0 + np.cos(np.pi * t))


class PerceptualProxy(Module):
    """Frozen random conv stack; returns per-stage feature tensors."""

    def __init__(self, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        c_in = 3
        for c_out in PERCEPTUAL_WIDTHS:
            fan = c_in * 9
            w = rng.normal(0.0, np.sqrt(2.0 / fan), size=(c_out, c_in, 3, 3))
            self.weights.append(Tensor(w))
            self.biases.append(Tensor(np.zeros(c_out)))
            c_in = c_out

    def features(self, rgb: Tensor) -> list[Tensor]:
        x = ad.transpose(rgb, (2, 0, 1))
        feats = []
        for w, b in zip(self.weights, self.biases):
            x = ad.relu(ad.conv2d(x, w, b, stride=2, pad=1))
            feats.append(x)
        return feats

    def distance(self, a: Tensor, b: np.ndarray) -> Tensor:
        fa = self.features(a)
        fb = self.features(Tensor(b))
        total = None
        for ta, tb in zip(fa, fb):
            d = ad.sub(ta, tb.detach())
            term = ad.tmean(ad.mul(d, d))
            total = term if total is None else ad.add(total, term)
        return total * (1.0 / len(fa))


def pixel_loss(render: RenderedImage, gt_rgb: np.ndarray, gt_alpha: np.ndarray,
               proxy: PerceptualProxy):
    """Mean-squared photometric and alpha terms plus the perceptual proxy."""
    if render.rgb.shape != gt_rgb.shape or render.alpha.shape != gt_alpha.shape:
        raise ValueError("render and ground truth shapes differ")
    dr = ad.sub(render.rgb, Tensor(gt_rgb))
    rgb_mse = ad.tmean(ad.mul(dr, dr))
    da = ad.sub(render.alpha, Tensor(gt_alpha))
    alpha_mse = ad.tmean(ad.mul(da, da))
    perceptual = proxy.distance(render.rgb, gt_rgb)
    return rgb_mse, alpha_mse, perceptual


def chamfer_loss(pred: Tensor, gt_positions: np.ndarray) -> Tensor:
    """Differentiable symmetric squared chamfer; nearest-neighbour indices
    are held fixed (envelope gradient)."""
    gt = np.asarray(gt_positions, dtype=np.float64)
    pred64 = pred.data.astype(np.float64)
    idx_ab, _ = kernels.nn_sq(np.ascontiguousarray(pred64), np.ascontiguousarray(gt))
    idx_ba, _ = kernels.nn_sq(np.ascontiguousarray(gt), np.ascontiguousarray(pred64))
    d1 = ad.sub(pred, Tensor(gt[idx_ab]))
    term1 = ad.tmean(ad.tsum(ad.mul(d1, d1), axis=1))
    d2 = ad.sub(ad.gather_rows(pred, idx_ba), Tensor(gt))
    term2 = ad.tmean(ad.tsum(ad.mul(d2, d2), axis=1))
    return ad.add(term1, term2)


def emd_loss(pred: Tensor, gt_positions: np.ndarray,
             max_points: int = EMD_EXACT_MAX) -> Tensor:
    """Mean assignment distance on FPS subsets of size min(N, max_points);
    the matching is exact (Hungarian) and held fixed for the gradient."""
    from scipy.optimize import linear_sum_assignment

    gt = np.asarray(gt_positions, dtype=np.float64)
    pred64 = pred.data.astype(np.float64)
    m = min(pred64.shape[0], gt.shape[0], max_points)
    pi = fps_points(pred64, m, 0) if pred64.shape[0] > m else np.arange(pred64.shape[0])
    gi = fps_points(gt, m, 0) if gt.shape[0] > m else np.arange(gt.shape[0])
    pa = pred64[pi]
    gb = gt[gi]
    diff = pa[:, None, :] - gb[None, :, :]
    cost = np.sqrt(np.maximum((diff * diff).sum(axis=-1), 0.0))
    ri, ci = linear_sum_assignment(cost)
    d = ad.sub(ad.gather_rows(pred, pi[ri]), Tensor(gb[ci]))
    return ad.tmean(ad.sqrt_safe(ad.tsum(ad.mul(d, d), axis=1)))


def pc_loss(pred: Tensor, gt_dense: PointCloud):
    """Point-cloud shaping terms for the upsampler output."""
    return chamfer_loss(pred, gt_dense.positions), emd_loss(pred, gt_dense.positions)


def total_loss(renders: list[RenderedImage], gt_rgbs, gt_alphas,
               pred_cloud: Tensor, gt_dense: PointCloud, step: int,
               cfg: LossConfig, proxy: PerceptualProxy):
    """Full objective over the supervision views; returns (loss tensor,
    breakdown with the per-part floats)."""
    inv = 1.0 / len(renders)
    rgb_t = alpha_t = perc_t = None
    for render, gr, ga in zip(renders, gt_rgbs, gt_alphas):
        r, a, p = pixel_loss(render, gr, ga, proxy)
        rgb_t = r if rgb_t is None else ad.add(rgb_t, r)
        alpha_t = a if alpha_t is None else ad.add(alpha_t, a)
        perc_t = p if perc_t is None else ad.add(perc_t, p)
    rgb_t = rgb_t * inv
    alpha_t = alpha_t * inv
    perc_t = perc_t * inv
    cd_t, emd_t = pc_loss(pred_cloud, gt_dense)
    lam = lambda_pc(step, cfg)
    loss = rgb_t + cfg.lambda_lpips * perc_t + cfg.lambda_alpha * alpha_t \
        + lam * (cd_t + emd_t)
    breakdown = LossBreakdown(
        total=loss.item(), rgb_mse=rgb_t.item(), alpha_mse=alpha_t.item(),
        perceptual=perc_t.item(), chamfer=cd_t.item(), emd=emd_t.item(),
        lambda_pc=lam)
    return loss, breakdown
