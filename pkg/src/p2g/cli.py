"""Command-line surface.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
P2G_THREADS bounds kernel parallelism; P2G_BACKEND selects numba/numpy.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2g",
                                description="Point-to-Gaussian image-to-3D pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--dense", type=int, default=4096)
    g.add_argument("--input", type=int, default=512)
    g.add_argument("--views", type=int, default=12)

    t = sub.add_parser("train", help="train a generator from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on turntable views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--views", type=int, default=32)
    e.add_argument("--out", default=None, help="optional metrics CSV path")
    e.add_argument("--gt-reference", action="store_true",
                   help="evaluate the reference gaussians against their own renders")

    a = sub.add_parser("ablate", help="train and compare ablation arms")
    a.add_argument("--config", required=True)
    a.add_argument("--arms", required=True,
                   help="comma-separated arm names (extractor,proj,att,full,v4,...)")
    a.add_argument("--out", required=True)

    r = sub.add_parser("render", help="run the generator on a cloud + image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--cloud", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--camera", default=None, help="camera spec file (optional)")
    r.add_argument("--views", type=int, default=8)

    sub.add_parser("selftest", help="run the oracle/gradient self checks")
    return p


def _load_cloud(path: Path):
    from .pointcloud import load_cloud_binary, load_cloud_text

    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"P2GP":
        return load_cloud_binary(path)
    return load_cloud_text(path)


def _camera_spec(path, resolution: int):
    """Conditioning pose + turntable parameters; defaults when absent."""
    spec = {"cond_azimuth": 0.0, "cond_elevation": 15.0, "cond_radius": 2.2,
            "radius": 2.0, "elevation": 15.0}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in spec:
                raise ValueError(f"{path}:{lineno}: unknown camera key {k!r}")
            spec[k] = float(v)
    return spec


def _cmd_render(args) -> int:
    from .gaussians import camera_on_circle, save_gaussians_binary
    from .imgio import read_image, write_image
    from .renderer import render
    from .training import load_model
    from . import autodiff as ad

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_model(args.ckpt)
    cloud = _load_cloud(Path(args.cloud))
    rgb, _ = read_image(args.image)
    resolution = rgb.shape[0]
    spec = _camera_spec(args.camera, resolution)
    cond_cam = camera_on_circle(np.deg2rad(spec["cond_azimuth"]),
                                np.deg2rad(spec["cond_elevation"]),
                                spec["cond_radius"], resolution)
    with ad.no_grad():
        gset, _ = model.forward(cloud, rgb[None].astype(np.float32), [cond_cam])
        from .renderer import turntable_cameras

        cams = turntable_cameras(args.views, spec["radius"], spec["elevation"], resolution)
        for i, cam in enumerate(cams):
            out = render(gset, cam)
            write_image(out_dir / f"view_{i:03d}.png", out.rgb.data, out.alpha.data)
    save_gaussians_binary(out_dir / "gaussians.p2gg", gset)
    print(f"wrote {args.views} views and gaussians.p2gg to {out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK

    try:
        if args.command == "gen-data":
            from .scenes import GenParams, generate_dataset

            paths = generate_dataset(args.out, args.scenes, args.seed,
                                     GenParams(args.dense, args.input,
                                               args.views, args.resolution))
            print(f"wrote {len(paths)} scenes to {args.out}")
            return EXIT_OK

        if args.command == "train":
            from .config import load_config
            from .training import train

            result = train(load_config(args.config), args.out)
            print(f"checkpoint: {result.checkpoint}")
            print(f"metrics:    {result.metrics_csv}")
            print(f"final train psnr: {result.final_psnr:.2f}")
            return EXIT_OK

        if args.command == "eval":
            from .training import evaluate

            res = evaluate(args.ckpt, args.data, args.views, out_csv=args.out,
                           gt_reference=args.gt_reference)
            for name, p, s, c in res["per_scene"]:
                print(f"{name:>16}  psnr={p:7.3f}  ssim={s:6.4f}  perceptual={c:.5f}")
            print(f"{'mean':>16}  psnr={res['psnr']:7.3f}  ssim={res['ssim']:6.4f}  "
                  f"perceptual={res['perceptual']:.5f}")
            return EXIT_OK

        if args.command == "ablate":
            from .config import load_config
            from .training import ablate

            arms = [a.strip() for a in args.arms.split(",") if a.strip()]
            if not arms:
                print("no arms given", file=sys.stderr)
                return EXIT_USAGE
            results, table = ablate(load_config(args.config), arms, args.out)
            for name in arms:
                print(f"{name:>14}  psnr={results[name]['psnr']:7.3f}")
            print(f"table: {table}")
            return EXIT_OK

        if args.command == "render":
            return _cmd_render(args)

        if args.command == "selftest":
            from .selftest import run_selftest

            results = run_selftest()
            failed = False
            for name, ok, detail in results:
                print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
                failed |= not ok
            return EXIT_NUMERIC if failed else EXIT_OK

    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        from .training import NumericFailure

        if isinstance(e, NumericFailure):
            print(f"numeric failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        raise

    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
