"""Wall-clock benchmarks over the correlate and refocus stages.

Timers bracket compute only: files are read into memory before the clock
starts and nothing is written while it runs. Every point is repeated at least
three times; the median is the headline figure, min and mean ride along.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
from scipy.stats import linregress

from . import correlation as corr
from .engine import ExecutionStats, MemoryBudget, WorkerPolicy, parse_size
from .errors import EmptyDataset, InsufficientFiles, MissingGamma
from .frame_io import DatasetManifest, scan_dataset
from .pipeline import RunConfig, correlate_raw, read_raw
from .refocus import RefocusSpec, refocus_stack
from .synth import SceneSpec, default_layout, generate_dataset

MIN_REPETITIONS = 3

RECORD_FIELDS = (
    "scenario",
    "parameter",
    "repetitions",
    "min_s",
    "median_s",
    "mean_s",
    "bytes",
    "frames",
    "tiles",
    "budget_bytes",
    "workers",
    "path",
    "checksum",
    "machine",
)

REPORT_SCHEMA = {
    "type": "object",
    "required": ["scenario", "machine", "records", "summary"],
    "properties": {
        "scenario": {"type": "string"},
        "machine": {"type": "object"},
        "summary": {"type": "object"},
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(RECORD_FIELDS) + ["times_s"],
                "properties": {
                    "scenario": {"type": "string"},
                    "parameter": {"type": "number"},
                    "repetitions": {"type": "integer", "minimum": MIN_REPETITIONS},
                    "times_s": {
                        "type": "array",
                        "minItems": MIN_REPETITIONS,
                        "items": {"type": "number", "exclusiveMinimum": 0},
                    },
                    "min_s": {"type": "number", "exclusiveMinimum": 0},
                    "median_s": {"type": "number", "exclusiveMinimum": 0},
                    "mean_s": {"type": "number", "exclusiveMinimum": 0},
                    "bytes": {"type": "integer", "minimum": 0},
                    "frames": {"type": "integer", "minimum": 0},
                    "tiles": {"type": "integer", "minimum": 1},
                    "budget_bytes": {"type": "integer", "minimum": 1},
                    "workers": {"type": "integer", "minimum": 1},
                    "path": {"type": "string"},
                    "checksum": {"type": ["string", "null"]},
                    "machine": {"type": "string"},
                },
            },
        },
    },
}


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def machine_id(desc: dict | None = None) -> str:
    d = desc or machine_descriptor()
    return f"{d['platform']} {d['machine']} cpus={d['cpu_count']} py{d['python']}"


@dataclass
class BenchRecord:
    scenario: str
    parameter: float
    times_s: list
    bytes: int
    frames: int
    tiles: int
    budget_bytes: int
    workers: int
    path: str = "packed"
    checksum: str | None = None
    machine: str = ""

    def __post_init__(self):
        if len(self.times_s) < MIN_REPETITIONS:
            raise ValueError(f"need >= {MIN_REPETITIONS} repetitions, got {len(self.times_s)}")
        if min(self.times_s) <= 0:
            raise ValueError("timings must be strictly positive")

    @property
    def repetitions(self) -> int:
        return len(self.times_s)

    @property
    def min_s(self) -> float:
        return min(self.times_s)

    @property
    def median_s(self) -> float:
        return statistics.median(self.times_s)

    @property
    def mean_s(self) -> float:
        return statistics.fmean(self.times_s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            repetitions=self.repetitions, min_s=self.min_s, median_s=self.median_s, mean_s=self.mean_s
        )
        return d


@dataclass
class BenchReport:
    scenario: str
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    machine: dict = field(default_factory=machine_descriptor)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "machine": self.machine,
            "summary": self.summary,
            "records": [r.to_dict() for r in self.records],
        }

    def validate(self):
        jsonschema.validate(self.to_dict(), REPORT_SCHEMA)

    def to_json(self) -> str:
        self.validate()
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        self.validate()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(RECORD_FIELDS), lineterminator="\n")
        writer.writeheader()
        for r in self.records:
            d = r.to_dict()
            writer.writerow({k: d[k] for k in RECORD_FIELDS})
        return buf.getvalue()

    def write(self, path):
        """Format follows the suffix: ``.json`` or ``.csv``."""
        path = Path(path)
        if path.suffix == ".json":
            text = self.to_json()
        elif path.suffix == ".csv":
            text = self.to_csv()
        else:
            raise ValueError(f"report must end in .json or .csv, got {path.name}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path

    def medians(self) -> list:
        return [r.median_s for r in self.records]


def linear_fit(xs, ys) -> dict | None:
    """Least-squares line with R^2; None when fewer than two distinct x values."""
    if len(set(xs)) < 2:
        return None
    fit = linregress(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    return {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.rvalue**2}


def _time(fn, repetitions: int):
    times, result = [], None
    for _ in range(max(MIN_REPETITIONS, repetitions)):
        t0 = time.perf_counter()
        result = fn()
        times.append(max(time.perf_counter() - t0, 1e-9))
    return times, result


def synthetic_manifest(directory, n_files: int, size: int, seed: int = 0, frames_per_file: int = 512):
    """Random-mask synthetic dataset of ``n_files`` files with ``size`` x ``size`` Rois."""
    rng = np.random.default_rng(seed)
    mask = (rng.random((size, size)) < 0.5).astype(float)
    scene = SceneSpec(mask, true_alpha=1.2, frames=n_files * frames_per_file, seed=seed)
    layout, roi_a, roi_b = default_layout(scene, frames_per_file)
    manifest, _ = generate_dataset(scene, layout, directory, roi_a, roi_b)
    return manifest


class _Dataset:
    """The config's dataset, or a throwaway synthetic one when none is given."""

    def __init__(self, config: RunConfig, n_files: int):
        self._tmp = None
        if not config.input and not config.synthesize:
            raise EmptyDataset("no --input dataset and synthesis not requested")
        if config.input:
            self.manifest = scan_dataset(config.input, config.layout, config.roi_a, config.roi_b)
        else:
            self._tmp = tempfile.TemporaryDirectory(prefix="cpi-bench-")
            self.manifest = synthetic_manifest(
                self._tmp.name, n_files, config.scene_size, config.seed
            )
        if self.manifest.n_files < n_files:
            self.close()
            raise InsufficientFiles(
                f"need {n_files} files, dataset has {self.manifest.n_files}"
            )

    def close(self):
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self) -> DatasetManifest:
        return self.manifest

    def __exit__(self, *exc):
        self.close()


def _correlate_once(raw, manifest, config, stats=None):
    return correlate_raw(
        raw,
        manifest.roi_a,
        manifest.roi_b,
        config.path,
        config.budget,
        config.policy,
        config.block_frames,
        stats,
    )


def bench_correlation_scaling(file_counts, config: RunConfig, repetitions: int = MIN_REPETITIONS):
    """Correlate wall time against the number of input files, plus a linear fit."""
    counts = [int(c) for c in file_counts]
    if not counts:
        raise ValueError("file_counts is empty")
    if min(counts) < 1:
        raise ValueError("file counts must be >= 1")
    mid = machine_id()
    report = BenchReport("correlation_scaling")
    with _Dataset(config, max(counts)) as manifest:
        all_raw = read_raw(manifest.subset(max(counts)))
        _correlate_once(all_raw[:1], manifest, config)  # warm the kernels
        for n in counts:
            raw = all_raw[:n]
            times, tensor = _time(lambda: _correlate_once(raw, manifest, config), repetitions)
            report.records.append(
                BenchRecord(
                    "correlation_scaling",
                    n,
                    times,
                    n * manifest.layout.file_bytes,
                    n * manifest.frames_per_file,
                    int(tensor.meta.get("tiles", 1)),
                    config.budget.bytes,
                    config.workers,
                    config.path,
                    tensor.checksum(),
                    mid,
                )
            )
    report.summary = {"fit": linear_fit(counts, report.medians()), "x": "files"}
    return report


def _gamma_from(config: RunConfig, n_files: int):
    with _Dataset(config, n_files) as manifest:
        return _correlate_once(read_raw(manifest.subset(n_files)), manifest, config)


def bench_refocus_scaling(
    plane_counts,
    config: RunConfig,
    gamma=None,
    control_files: int | None = 11,
    repetitions: int = MIN_REPETITIONS,
):
    """Refocus wall time against the number of planes.

    ``gamma`` may be a tensor or a container path; otherwise it is correlated
    from ``control_files`` files of the config's dataset. When the dataset is
    available, the first point is re-timed on a gamma built from twice as many
    files and the ratio of medians is reported.
    """
    counts = [int(c) for c in plane_counts]
    if not counts:
        raise ValueError("plane_counts is empty")
    if isinstance(gamma, (str, os.PathLike)):
        gamma = corr.read_gamma(gamma)
    have_data = bool(config.input) or config.synthesize
    if gamma is None and not have_data:
        raise MissingGamma("no gamma and no dataset to correlate")
    if gamma is None:
        gamma = _gamma_from(config, control_files)

    alphas = config.alphas or (0.8, 1.2)
    lo, hi = min(alphas), max(alphas)
    mid = machine_id()
    report = BenchReport("refocus_scaling")
    refocus_stack(gamma, RefocusSpec.linspace(lo, hi, 1, boundary_policy=config.boundary))

    def point(g, n, label):
        spec = RefocusSpec.linspace(lo, hi, n, boundary_policy=config.boundary)
        stats = ExecutionStats()
        times, _ = _time(
            lambda: refocus_stack(g, spec, config.rmap, config.budget, config.policy, stats),
            repetitions,
        )
        return BenchRecord(
            label,
            n,
            times,
            int(g.gamma.nbytes),
            int(g.n_tot),
            max(1, stats.tiles_run // len(times)),
            config.budget.bytes,
            config.workers,
            config.path,
            None,
            mid,
        )

    for n in counts:
        report.records.append(point(gamma, n, "refocus_scaling"))
    report.summary = {"fit": linear_fit(counts, report.medians()), "x": "planes"}

    if have_data and control_files:
        doubled = _gamma_from(config, 2 * control_files)
        base = point(gamma, counts[0], "refocus_files_control_base")
        twice = point(doubled, counts[0], "refocus_files_control_doubled")
        report.records += [base, twice]
        report.summary["files_control"] = {
            "files": [control_files, 2 * control_files],
            "planes": counts[0],
            "ratio": twice.median_s / base.median_s,
        }
    return report


def bench_budget_sweep(budgets, config: RunConfig, n_files: int | None = None,
                       repetitions: int = MIN_REPETITIONS):
    """Correlate under each budget; checksums must agree across all of them."""
    sizes = [parse_size(b) for b in budgets]
    if not sizes:
        raise ValueError("budgets is empty")
    mid = machine_id()
    report = BenchReport("budget_sweep")
    with _Dataset(config, n_files or 1) as manifest:
        m = manifest.subset(n_files) if n_files else manifest
        raw = read_raw(m)
        pa, pb = m.roi_a.pixel_count, m.roi_b.pixel_count
        for b in sizes:
            corr.plan_correlation(pa, pb, MemoryBudget(b))  # BudgetTooSmall before timing
        for b in sizes:
            cfg = _with(config, budget=MemoryBudget(b))
            times, tensor = _time(lambda: _correlate_once(raw, m, cfg), repetitions)
            report.records.append(
                BenchRecord(
                    "budget_sweep",
                    b,
                    times,
                    m.n_files * m.layout.file_bytes,
                    m.n_tot,
                    int(tensor.meta["tiles"]),
                    b,
                    config.workers,
                    "packed",
                    tensor.checksum(),
                    mid,
                )
            )
    sums = {r.checksum for r in report.records}
    report.summary = {
        "checksums_identical": len(sums) == 1,
        "tiles": [r.tiles for r in report.records],
    }
    if len(sums) != 1:
        raise AssertionError(f"gamma differs across budgets: {sorted(sums)}")
    return report


def bench_paths(config: RunConfig, n_files: int | None = None, repetitions: int = MIN_REPETITIONS):
    """Naive and packed correlate on the same data; records the speedup."""
    mid = machine_id()
    report = BenchReport("path_comparison")
    with _Dataset(config, n_files or 1) as manifest:
        m = manifest.subset(n_files) if n_files else manifest
        raw = read_raw(m)
        _correlate_once(raw[:1], m, config)
        checks = {}
        for path in ("naive", "packed"):
            cfg = _with(config, path=path)
            times, tensor = _time(lambda: _correlate_once(raw, m, cfg), repetitions)
            checks[path] = tensor.checksum()
            report.records.append(
                BenchRecord(
                    "path_comparison",
                    m.n_tot,
                    times,
                    m.n_files * m.layout.file_bytes,
                    m.n_tot,
                    int(tensor.meta.get("tiles", 1)),
                    config.budget.bytes,
                    config.workers,
                    path,
                    tensor.checksum(),
                    mid,
                )
            )
    naive, packed = report.records
    report.summary = {
        "speedup": naive.median_s / packed.median_s,
        "identical": checks["naive"] == checks["packed"],
    }
    return report


def _with(config: RunConfig, **changes) -> RunConfig:
    return replace(config, **changes)
