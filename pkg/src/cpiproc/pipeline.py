"""scan -> correlate -> refocus -> write, with per-stage error attribution."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import correlation as corr
from .engine import ExecutionStats, MemoryBudget, WorkerPolicy
from .errors import CPIError, MissingGamma
from .frame_io import (
    DatasetManifest,
    FrameLayout,
    PackedFrameChunk,
    Roi,
    cumulative_preview,
    pack_streams,
    read_bin_file,
    scan_dataset,
    split_roi,
)
from .refocus import RefocusMap, RefocusSpec, refocus_stack, write_stack

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 256 << 20
DEFAULT_BLOCK_FRAMES = 4096


@dataclass
class RunConfig:
    subcommand: str = "correlate"
    input: str | None = None
    output: str | None = None
    layout: FrameLayout = field(default_factory=FrameLayout)
    roi_a: Roi | None = None
    roi_b: Roi | None = None
    path: str = "packed"
    budget: MemoryBudget = field(default_factory=lambda: MemoryBudget(DEFAULT_BUDGET))
    workers: int = 1
    alphas: tuple | None = None
    boundary: str = "skip_and_renormalize"
    rmap: RefocusMap = field(default_factory=RefocusMap)
    seed: int = 0
    fmt: str = "raw"
    report: str | None = None
    block_frames: int = DEFAULT_BLOCK_FRAMES
    write_counts: bool = False
    scene_size: int = 16
    synthesize: bool = False

    def __post_init__(self):
        if self.path not in ("naive", "packed"):
            raise ValueError(f"path must be naive or packed, got {self.path!r}")
        w, h = self.layout.width_px, self.layout.height_px
        if self.roi_a is None:
            self.roi_a = Roi(0, 0, w // 2, h)
        if self.roi_b is None:
            self.roi_b = Roi(w // 2, 0, w - w // 2, h)

    @property
    def policy(self) -> WorkerPolicy:
        return WorkerPolicy(self.workers)

    def check(self):
        """Cross-field consistency."""
        if self.subcommand == "refocus":
            if not self.input:
                raise MissingGamma("refocus needs a gamma container as --input")
            if not self.alphas:
                raise ValueError("refocus needs --planes/--alpha-start/--alpha-end")
        if self.subcommand in ("correlate", "info") and not self.input:
            raise ValueError(f"{self.subcommand} needs --input")


class StageError(CPIError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def load_roi_chunks(manifest: DatasetManifest):
    """Read every file once; returns lists of A and B chunks (I/O only)."""
    chunks_a, chunks_b = [], []
    for chunk in manifest.iter_chunks():
        a, b = split_roi(chunk, manifest.roi_a, manifest.roi_b)
        chunks_a.append(a)
        chunks_b.append(b)
    return chunks_a, chunks_b


def read_raw(manifest: DatasetManifest) -> list:
    return [read_bin_file(p, manifest.layout) for p in manifest.file_paths]


def _blocks(chunks_a, chunks_b, block_frames):
    """Group consecutive chunks into aligned pixel-stream blocks."""
    blocks_a, blocks_b = [], []
    group_a, group_b, n = [], [], 0
    for a, b in zip(chunks_a, chunks_b):
        group_a.append(a)
        group_b.append(b)
        n += a.frame_count
        if n >= block_frames:
            blocks_a.append(pack_streams(np.concatenate([c.unpack() for c in group_a])))
            blocks_b.append(pack_streams(np.concatenate([c.unpack() for c in group_b])))
            group_a, group_b, n = [], [], 0
    if group_a:
        blocks_a.append(pack_streams(np.concatenate([c.unpack() for c in group_a])))
        blocks_b.append(pack_streams(np.concatenate([c.unpack() for c in group_b])))
    return blocks_a, blocks_b


def correlate_raw(
    raw_chunks,
    roi_a: Roi,
    roi_b: Roi,
    path: str = "packed",
    budget: MemoryBudget | None = None,
    policy: WorkerPolicy | None = None,
    block_frames: int = DEFAULT_BLOCK_FRAMES,
    stats: ExecutionStats | None = None,
) -> corr.CorrelationTensor:
    """Correlate in-memory frame chunks: split, unpack/transpose, correlate.

    This is the compute span the benchmarks time; file reads happen before.
    """
    pairs = [split_roi(c, roi_a, roi_b) for c in raw_chunks]
    if path == "naive":
        a = np.concatenate([p[0].unpack() for p in pairs])
        b = np.concatenate([p[1].unpack() for p in pairs])
        return corr.correlate_naive(a, b)
    blocks_a, blocks_b = _blocks([p[0] for p in pairs], [p[1] for p in pairs], block_frames)
    pa, pb = roi_a.pixel_count, roi_b.pixel_count
    budget = budget or MemoryBudget(DEFAULT_BUDGET)
    plan = corr.plan_correlation(pa, pb, budget)
    return corr.correlate_packed(
        blocks_a, blocks_b, plan, policy or WorkerPolicy(1), budget=budget, stats=stats
    )


def correlate_dataset(manifest: DatasetManifest, config: RunConfig) -> corr.CorrelationTensor:
    return correlate_raw(
        read_raw(manifest),
        manifest.roi_a,
        manifest.roi_b,
        config.path,
        config.budget,
        config.policy,
        config.block_frames,
    )


def provenance(manifest: DatasetManifest, config: RunConfig) -> dict:
    return {
        "roi_a": manifest.roi_a.to_dict(),
        "roi_b": manifest.roi_b.to_dict(),
        "n_files": manifest.n_files,
        "files": [Path(p).name for p in manifest.file_paths],
        "path": config.path,
    }


def run_pipeline(config: RunConfig, out=print) -> tuple:
    """Returns ``(exit_status, artifacts)``; artifacts maps names to paths."""
    artifacts = {}
    timings = {}
    stage = "config"
    try:
        config.check()
        outdir = Path(config.output or ".")
        outdir.mkdir(parents=True, exist_ok=True)

        if config.subcommand == "refocus":
            stage = "load"
            tensor = corr.read_gamma(config.input)
        else:
            stage = "scan"
            manifest = scan_dataset(config.input, config.layout, config.roi_a, config.roi_b)
            artifacts["manifest"] = str(outdir / "manifest.json")
            manifest.to_json(artifacts["manifest"])
            out(f"files: {manifest.n_files}  N_TOT: {manifest.n_tot}")

            stage = "correlate"
            raw = read_raw(manifest)
            t0 = time.perf_counter()
            tensor = correlate_raw(
                raw,
                manifest.roi_a,
                manifest.roi_b,
                config.path,
                config.budget,
                config.policy,
                config.block_frames,
            )
            timings["correlate_s"] = time.perf_counter() - t0
            del raw

            stage = "write"
            artifacts["gamma"] = str(outdir / "gamma.cpit")
            corr.write_gamma(artifacts["gamma"], tensor, provenance(manifest, config))
            if config.write_counts and tensor.counts is not None:
                artifacts["counts"] = str(outdir / "counts.cpit")
                corr.write_counts(artifacts["counts"], tensor.counts)
            out(
                f"gamma dims (j,k,m,n): {tensor.dims}  tiles: {tensor.meta.get('tiles', 1)}  "
                f"correlate: {timings['correlate_s']:.3f}s"
            )

        if config.alphas:
            stage = "refocus"
            spec = RefocusSpec(tuple(config.alphas), boundary_policy=config.boundary)
            t0 = time.perf_counter()
            stack = refocus_stack(tensor, spec, config.rmap, config.budget, config.policy)
            timings["refocus_s"] = time.perf_counter() - t0
            stage = "write"
            artifacts["stack"] = str(
                write_stack(outdir / "stack", stack, config.rmap, spec, config.fmt)
            )
            out(f"planes: {len(stack.planes)}  refocus: {timings['refocus_s']:.3f}s")

        summary = {"artifacts": artifacts, "timings": timings}
        (outdir / "run_summary.json").write_text(json.dumps(summary, indent=2))
        return 0, artifacts
    except Exception as exc:  # noqa: BLE001 - reported with its stage
        err = StageError(stage, exc)
        log.debug("stage failure", exc_info=True)
        out(f"error: {err}")
        return 1, {**artifacts, "error": err}


def preview_first_file(manifest: DatasetManifest) -> np.ndarray:
    first: PackedFrameChunk = read_bin_file(manifest.file_paths[0], manifest.layout)
    return cumulative_preview([first])
