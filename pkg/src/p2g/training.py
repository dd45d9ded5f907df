"""Training loop, evaluation over turntable views, and the ablation runner.

Per iteration: sample a scene and M views, jitter the input cloud, run the
generator conditioned on V view(s), render the remaining supervision
views, apply the full objective, and take an Adam step. Everything is
seeded; two runs with the same config produce byte-identical metrics CSVs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .config import RunConfig, format_config
from .gaussians import GaussianSet
from .losses import LossConfig, PerceptualProxy, lambda_pc, total_loss
from .metrics import psnr, ssim
from .network import GeneratorConfig, LevelSpec, PointToGaussianGenerator, default_levels
from .nn import Adam, load_checkpoint, load_manifest, manifest_hash, restore_parameters, save_checkpoint
from .pointcloud import jitter
from .renderer import render, turntable_cameras
from .scenes import BACKGROUND, GenParams, Scene, generate_dataset, load_dataset

METRIC_COLUMNS = ("step", "split", "psnr", "ssim", "perceptual", "rgb_mse",
                  "alpha_mse", "cd", "emd", "lambda_pc")


class NumericFailure(RuntimeError):
    """Raised when the loss goes non-finite; CLI maps it to exit code 3."""


def generator_config(cfg: RunConfig) -> GeneratorConfig:
    n0 = cfg.data.n_input * cfg.model.upsample_factor
    return GeneratorConfig(
        levels=default_levels(n0),
        upsample_factor=cfg.model.upsample_factor,
        token_dim=cfg.model.token_dim,
        heads=cfg.model.heads,
        patch=cfg.model.patch,
        use_projection=cfg.ablation.projection,
        use_attention=cfg.ablation.attention,
        multiscale=cfg.ablation.multiscale,
        offsets=cfg.ablation.offsets,
    )


def parse_generator_manifest(text: str) -> GeneratorConfig:
    vals = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("["):
            continue
        k, v = (s.strip() for s in line.split("=", 1))
        vals[k] = v
    levels = [LevelSpec(*(int(x) for x in part.split(",")))
              for part in vals["levels"].split(";")]
    as_bool = lambda s: s == "True"
    return GeneratorConfig(
        levels=levels, upsample_factor=int(vals["upsample_factor"]),
        token_dim=int(vals["token_dim"]), heads=int(vals["heads"]),
        patch=int(vals["patch"]), use_projection=as_bool(vals["use_projection"]),
        use_attention=as_bool(vals["use_attention"]),
        multiscale=as_bool(vals["multiscale"]), offsets=as_bool(vals["offsets"]))


def ensure_dataset(cfg: RunConfig, base_dir: Path) -> list[Scene]:
    data_dir = Path(cfg.data.dir)
    if not data_dir.is_absolute():
        data_dir = base_dir / data_dir
    if not list(data_dir.glob("scene_*.npz")):
        generate_dataset(data_dir, cfg.data.scenes, cfg.data.seed,
                         GenParams(cfg.data.n_dense, cfg.data.n_input,
                                   cfg.data.n_views, cfg.data.resolution))
    return load_dataset(data_dir)


def _fmt(x: float) -> str:
    return f"{x:.8g}"


def _view_metrics(renders, gt_rgbs, gt_alphas, proxy):
    ps, ss, pc = [], [], []
    for r, gr in zip(renders, gt_rgbs):
        ps.append(psnr(r.rgb.data, gr))
        ss.append(ssim(r.rgb.data, gr))
        with ad.no_grad():
            pc.append(proxy.distance(Tensor(r.rgb.data.copy()), gr).item())
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(pc))


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_csv: Path
    final_psnr: float
    psnr_history: list[tuple[int, float]]  # (step, train psnr) at log points


def train(cfg: RunConfig, out_dir) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes = ensure_dataset(cfg, out_dir)
    gcfg = generator_config(cfg)
    model = PointToGaussianGenerator(gcfg, seed=cfg.model.seed)
    opt = Adam(model.parameters(), lr=cfg.train.lr)
    proxy = PerceptualProxy()
    loss_cfg = LossConfig(total_steps=cfg.train.iterations)
    rng = np.random.default_rng(cfg.train.seed)
    v_cond = cfg.ablation.views
    m = cfg.train.m_views
    pool = len(scenes[0].cameras)
    if v_cond + m - 1 > pool:
        raise ValueError(f"view pool {pool} too small for V={v_cond}, M={m}")

    rows = []
    history = []
    final_psnr = 0.0
    save_config_echo(out_dir, cfg)
    for step in range(cfg.train.iterations):
        scene = scenes[int(rng.integers(len(scenes)))]
        perm = rng.permutation(pool)
        cond_views = perm[:v_cond]
        sup_views = perm[v_cond:v_cond + m - 1]
        cloud = jitter(scene.input_cloud, cfg.train.jitter_xyz, cfg.train.jitter_rgb,
                       seed=int(rng.integers(2 ** 31)))
        gt_rgbs = [scene.images[s].astype(np.float32) for s in sup_views]
        gt_alphas = [scene.alphas[s].astype(np.float32) for s in sup_views]
        with Tape():
            gset, up_pos = model.forward(
                cloud, scene.images[cond_views],
                [scene.cameras[i] for i in cond_views])
            renders = [render(gset, scene.cameras[s], background=BACKGROUND)
                       for s in sup_views]
            loss, parts = total_loss(renders, gt_rgbs, gt_alphas, up_pos,
                                     scene.dense, step, loss_cfg, proxy)
            if not np.isfinite(parts.total):
                dump = out_dir / f"nan_dump_step{step}.npz"
                np.savez(dump, step=step, scene=scene.seed,
                         cond=cond_views, sup=sup_views,
                         centers=gset.centers.data, scales=gset.scales.data,
                         opacities=gset.opacities.data)
                raise NumericFailure(f"non-finite loss at step {step}; dump at {dump}")
            backward(loss)
        opt.step()

        if step % cfg.train.log_interval == 0 or step == cfg.train.iterations - 1:
            p, s, perc = _view_metrics(renders, gt_rgbs, gt_alphas, proxy)
            rows.append([step, "train", _fmt(p), _fmt(s), _fmt(perc),
                         _fmt(parts.rgb_mse), _fmt(parts.alpha_mse),
                         _fmt(parts.chamfer), _fmt(parts.emd), _fmt(parts.lambda_pc)])
            history.append((step, p))
            final_psnr = p
            if cfg.train.stop_at_psnr > 0 and p >= cfg.train.stop_at_psnr:
                break
        if cfg.train.eval_interval > 0 and step and step % cfg.train.eval_interval == 0:
            snap = _eval_snapshot(model, scenes[0], proxy, cfg)
            rows.append([step, "eval", _fmt(snap[0]), _fmt(snap[1]), _fmt(snap[2]),
                         "0", "0", "0", "0", _fmt(lambda_pc(step, loss_cfg))])

    ckpt = out_dir / "model.p2gc"
    save_checkpoint(ckpt, model.named_parameters(), manifest=gcfg.manifest())
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, rows)
    return TrainResult(ckpt, csv_path, final_psnr, history)


def save_config_echo(out_dir: Path, cfg: RunConfig):
    (Path(out_dir) / "config_used.txt").write_text(format_config(cfg))


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def _eval_snapshot(model, scene: Scene, proxy, cfg: RunConfig, k: int = 4):
    with ad.no_grad():
        gset, _ = model.forward(scene.input_cloud, scene.images[:1], scene.cameras[:1])
        cams = turntable_cameras(k, 2.2, 15.0, cfg.data.resolution)
        ref = scene.reference_gaussians()
        ps, ss, pc = [], [], []
        for cam in cams:
            out = render(gset, cam, background=BACKGROUND)
            gt = render(ref, cam, background=BACKGROUND)
            ps.append(psnr(out.rgb.data, gt.rgb.data))
            ss.append(ssim(out.rgb.data, gt.rgb.data))
            pc.append(proxy.distance(Tensor(out.rgb.data.copy()), gt.rgb.data).item())
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(pc))


def load_model(ckpt_path) -> tuple[PointToGaussianGenerator, GeneratorConfig]:
    manifest = load_manifest(ckpt_path)
    if manifest is None:
        raise ValueError(f"{ckpt_path}: missing .manifest sidecar")
    body = "\n".join(l for l in manifest.splitlines() if not l.startswith("hash"))
    stored_hash = [l.split("=")[1].strip() for l in manifest.splitlines()
                   if l.startswith("hash")]
    gcfg = parse_generator_manifest(body)
    if not stored_hash or manifest_hash(gcfg.manifest()) != stored_hash[0]:
        raise ValueError(f"{ckpt_path}: architecture hash mismatch")
    model = PointToGaussianGenerator(gcfg, seed=0)
    restore_parameters(model, load_checkpoint(ckpt_path))
    return model, gcfg


def evaluate(ckpt_path, data_dir, k_views: int = 32, out_csv=None,
             gt_reference: bool = False, camera_radius: float = 2.2,
             elevation_deg: float = 15.0):
    """Mean PSNR/SSIM/perceptual over K turntable views per scene."""
    scenes = load_dataset(data_dir)
    proxy = PerceptualProxy()
    model = None
    if not gt_reference:
        model, _ = load_model(ckpt_path)
    resolution = scenes[0].cameras[0].width
    cams = turntable_cameras(k_views, camera_radius, elevation_deg, resolution)
    rows = []
    per_scene = []
    for i, scene in enumerate(scenes):
        ref = scene.reference_gaussians()
        with ad.no_grad():
            if gt_reference:
                gset = ref
            else:
                gset, _ = model.forward(scene.input_cloud, scene.images[:1],
                                        scene.cameras[:1])
            ps, ss, pc = [], [], []
            for cam in cams:
                out = render(gset, cam, background=BACKGROUND)
                gt = render(ref, cam, background=BACKGROUND)
                ps.append(psnr(out.rgb.data, gt.rgb.data))
                ss.append(ssim(out.rgb.data, gt.rgb.data))
                pc.append(proxy.distance(Tensor(out.rgb.data.copy()), gt.rgb.data).item())
        row = (f"{scene.kind}-{scene.seed}", float(np.mean(ps)), float(np.mean(ss)),
               float(np.mean(pc)))
        per_scene.append(row)
        rows.append([i, "eval", _fmt(row[1]), _fmt(row[2]), _fmt(row[3]),
                     "0", "0", "0", "0", "0"])
    mean_psnr = float(np.mean([r[1] for r in per_scene]))
    mean_ssim = float(np.mean([r[2] for r in per_scene]))
    mean_perc = float(np.mean([r[3] for r in per_scene]))
    rows.append(["mean", "eval", _fmt(mean_psnr), _fmt(mean_ssim), _fmt(mean_perc),
                 "0", "0", "0", "0", "0"])
    if out_csv is not None:
        write_metrics_csv(out_csv, rows)
    return {"per_scene": per_scene, "psnr": mean_psnr, "ssim": mean_ssim,
            "perceptual": mean_perc}


STANDARD_ARMS = {
    "extractor": {"projection": False, "attention": False},
    "proj": {"projection": True, "attention": False},
    "att": {"projection": False, "attention": True},
    "full": {},
    "v4": {"views": 4},
    "single-scale": {"multiscale": False},
    "no-offsets": {"offsets": False},
}


def apply_arm(cfg: RunConfig, overrides: dict) -> RunConfig:
    out = cfg.copy()
    for key, val in overrides.items():
        if not hasattr(out.ablation, key):
            raise ValueError(f"unknown ablation switch {key!r}")
        setattr(out.ablation, key, val)
    return out


def ablate(cfg: RunConfig, arm_names: list[str], out_dir, k_views: int = 16):
    """Train each arm under identical seeds/budget and compare eval metrics."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shared = cfg.copy()
    shared.data.dir = str((out_dir / "data").resolve())  # arms share one dataset
    results = {}
    for name in arm_names:
        if name not in STANDARD_ARMS:
            raise ValueError(f"unknown arm {name!r}; choose from {sorted(STANDARD_ARMS)}")
        arm_cfg = apply_arm(shared, STANDARD_ARMS[name])
        arm_dir = out_dir / f"arm_{name}"
        tr = train(arm_cfg, arm_dir)
        ev = evaluate(tr.checkpoint, _data_dir_of(arm_cfg, arm_dir), k_views,
                      out_csv=arm_dir / "eval.csv")
        results[name] = ev
    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "psnr", "ssim", "perceptual", "delta_psnr_vs_first"])
        first = arm_names[0]
        for name in arm_names:
            ev = results[name]
            w.writerow([name, _fmt(ev["psnr"]), _fmt(ev["ssim"]), _fmt(ev["perceptual"]),
                        _fmt(ev["psnr"] - results[first]["psnr"])])
    return results, table_path


def _data_dir_of(cfg: RunConfig, base_dir) -> Path:
    d = Path(cfg.data.dir)
    return d if d.is_absolute() else Path(base_dir) / d
