"""``cpi`` command line: info, correlate, refocus, synth, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import (
    bench_budget_sweep,
    bench_correlation_scaling,
    bench_paths,
    bench_refocus_scaling,
)
from .engine import MemoryBudget, default_worker_count
from .errors import CPIError
from .frame_io import FrameLayout, Roi, scan_dataset, write_pgm
from .pipeline import DEFAULT_BUDGET, RunConfig, preview_first_file, run_pipeline
from .refocus import CLAMP, SKIP, RefocusMap
from .synth import SceneSpec, default_layout, double_slit, generate_dataset


def parse_layout(text: str) -> tuple:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"layout must look like 512x256, got {text!r}") from None


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _str_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _dataset_flags(p):
    p.add_argument("--input", help="dataset directory (or gamma container for refocus)")
    p.add_argument("--layout", type=parse_layout, default=(512, 256), metavar="WxH")
    p.add_argument("--frames-per-file", type=int, default=512)
    p.add_argument("--bit-order", choices=("lsb", "msb"), default="lsb")
    p.add_argument("--roi-a", type=Roi.parse, metavar="X,Y,W,H")
    p.add_argument("--roi-b", type=Roi.parse, metavar="X,Y,W,H")


def _compute_flags(p):
    p.add_argument("--output", help="output directory")
    p.add_argument("--path", choices=("naive", "packed"), default="packed")
    p.add_argument("--budget", type=MemoryBudget.parse, default=MemoryBudget(DEFAULT_BUDGET),
                   metavar="BYTES[k|M|G]")
    p.add_argument("--workers", type=int, default=None, help="default: $CPI_WORKERS or CPU count")
    p.add_argument("--seed", type=int, default=0)


def _refocus_flags(p):
    p.add_argument("--alpha-start", type=float)
    p.add_argument("--alpha-end", type=float)
    p.add_argument("--planes", type=int)
    p.add_argument("--boundary", choices=("skip", "clamp"), default="skip")
    p.add_argument("--map", type=RefocusMap.parse, default=None, metavar="x0,x1,u0,u1,c0,c1",
                   help="arm-A coordinate: (x0+x1*a)*x + (u0+u1*a)*u + (c0+c1*a)")
    p.add_argument("--format", choices=("raw", "pgm"), default="raw")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpi", description="Correlation plenoptic imaging pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("info", help="scan a dataset and print its manifest")
    _dataset_flags(p)
    p.add_argument("--output", help="write manifest.json and a cumulative preview here")

    p = sub.add_parser("correlate", help="compute gamma, optionally refocus")
    _dataset_flags(p)
    _compute_flags(p)
    _refocus_flags(p)
    p.add_argument("--counts", action="store_true", help="also dump the raw integer counts")

    p = sub.add_parser("refocus", help="refocus a stored gamma container")
    p.add_argument("--input", required=True, help="gamma container (.cpit)")
    _compute_flags(p)
    _refocus_flags(p)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("--output", required=True)
    p.add_argument("--scene", help="JSON scene parameters (as written to scene.json)")
    p.add_argument("--size", type=int, default=64, help="Roi side in pixels")
    p.add_argument("--mask", choices=("double-slit", "ones", "zeros"), default="double-slit")
    p.add_argument("--true-alpha", type=float, default=1.4)
    p.add_argument("--frames", type=int, default=2048)
    p.add_argument("--grain", type=float, default=2.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aperture", type=float, default=64.0)
    p.add_argument("--frames-per-file", type=int, default=512)
    p.add_argument("--bit-order", choices=("lsb", "msb"), default="lsb")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="timing benchmarks")
    p.add_argument("scenario", choices=("correlation", "refocus", "budget", "paths"))
    _dataset_flags(p)
    _compute_flags(p)
    _refocus_flags(p)
    p.add_argument("--report", help="FILE.json or FILE.csv")
    p.add_argument("--file-counts", type=_int_list, default=[1, 2, 4, 8])
    p.add_argument("--plane-counts", type=_int_list, default=[10, 26, 100])
    p.add_argument("--budgets", type=_str_list, default=["64k", "256k", "1M", "4M"])
    p.add_argument("--files", type=int, help="files used by budget/paths scenarios")
    p.add_argument("--control-files", type=int, default=11)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--size", type=int, default=16, help="Roi side of the synthetic dataset")
    return parser


def _alphas(args):
    if args.planes is None and args.alpha_start is None and args.alpha_end is None:
        return None
    start = 1.0 if args.alpha_start is None else args.alpha_start
    end = start if args.alpha_end is None else args.alpha_end
    planes = args.planes or 1
    return tuple(float(a) for a in np.linspace(start, end, planes))


def config_from_args(args) -> RunConfig:
    kw = {"subcommand": args.subcommand, "input": getattr(args, "input", None)}
    if hasattr(args, "layout"):
        w, h = args.layout
        kw["layout"] = FrameLayout(w, h, args.frames_per_file, args.bit_order)
        kw["roi_a"], kw["roi_b"] = args.roi_a, args.roi_b
    if hasattr(args, "path"):
        kw.update(
            output=args.output,
            path=args.path,
            budget=args.budget,
            workers=args.workers or default_worker_count(),
            seed=args.seed,
        )
    if hasattr(args, "planes"):
        kw.update(
            alphas=_alphas(args),
            boundary=SKIP if args.boundary == "skip" else CLAMP,
            rmap=args.map or RefocusMap(),
            fmt=args.format,
        )
    if hasattr(args, "counts"):
        kw["write_counts"] = args.counts
    if args.subcommand == "bench":
        kw.update(report=args.report, scene_size=args.size, synthesize=not args.input)
    return RunConfig(**kw)


def _info(args, config: RunConfig) -> int:
    manifest = scan_dataset(config.input, config.layout, config.roi_a, config.roi_b)
    print(f"files: {manifest.n_files}")
    print(f"frames per file: {manifest.frames_per_file}")
    print(f"N_TOT: {manifest.n_tot}")
    print(f"layout: {json.dumps(manifest.layout.to_dict())}")
    print(f"roi A: {manifest.roi_a}  roi B: {manifest.roi_b}")
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        manifest.to_json(out / "manifest.json")
        maxval = write_pgm(out / "preview.pgm", preview_first_file(manifest))
        print(f"preview: {out / 'preview.pgm'} (max {maxval})")
    return 0


def scene_from_args(args) -> SceneSpec:
    params = {
        "true_alpha": args.true_alpha,
        "speckle_grain_px": args.grain,
        "threshold": args.threshold,
        "frames": args.frames,
        "seed": args.seed,
        "aperture_px": args.aperture,
    }
    mask_kind, size = args.mask, args.size
    if args.scene:
        saved = json.loads(Path(args.scene).read_text())
        params.update(saved["params"])
        mask_kind, size = saved.get("mask", mask_kind), saved.get("size", size)
    shape = (size, size)
    if mask_kind == "double-slit":
        mask = double_slit(shape, slit_width=max(1, size // 16), separation=max(2, size * 3 // 16))
    elif mask_kind == "ones":
        mask = np.ones(shape)
    else:
        mask = np.zeros(shape)
    return SceneSpec(mask, **params), mask_kind, size


def _synth(args) -> int:
    scene, mask_kind, size = scene_from_args(args)
    layout, roi_a, roi_b = default_layout(scene, args.frames_per_file, args.bit_order)
    manifest, truth = generate_dataset(scene, layout, args.output, roi_a, roi_b)
    scene_doc = {"params": scene.params(), "mask": mask_kind, "size": size}
    (Path(args.output) / "scene.json").write_text(json.dumps(scene_doc, indent=2))
    print(f"wrote {manifest.n_files} files ({manifest.n_tot} frames) to {args.output}")
    print(
        f"layout: {layout.width_px}x{layout.height_px}  "
        f"--roi-a {roi_a.x0},{roi_a.y0},{roi_a.width},{roi_a.height}  "
        f"--roi-b {roi_b.x0},{roi_b.y0},{roi_b.width},{roi_b.height}"
    )
    print(f"true alpha: {truth.true_alpha}")
    return 0


def _bench(args, config: RunConfig) -> int:
    if args.scenario == "correlation":
        report = bench_correlation_scaling(args.file_counts, config, args.repetitions)
    elif args.scenario == "refocus":
        report = bench_refocus_scaling(
            args.plane_counts, config, control_files=args.control_files,
            repetitions=args.repetitions,
        )
    elif args.scenario == "budget":
        report = bench_budget_sweep(args.budgets, config, args.files, args.repetitions)
    else:
        report = bench_paths(config, args.files, args.repetitions)
    for r in report.records:
        print(
            f"{r.scenario:32s} {r.parameter:>12g}  median {r.median_s:.4f}s  "
            f"min {r.min_s:.4f}s  tiles {r.tiles}  {r.path}"
        )
    print(json.dumps(report.summary))
    if args.report:
        print(f"report: {report.write(args.report)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.subcommand == "synth":
            return _synth(args)
        config = config_from_args(args)
        if args.subcommand == "info":
            return _info(args, config)
        if args.subcommand == "bench":
            return _bench(args, config)
        status, _ = run_pipeline(config)
        return status
    except (CPIError, OSError, ValueError, AssertionError) as exc:
        print(f"error: {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
