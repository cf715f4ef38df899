"""Refocused axial images from a correlation tensor.

Each output image integrates ``gamma`` along a family of lines selected by a
refocusing parameter ``alpha``. For output pixel ``(x, y)`` and angular sample
``(u, v)`` the four tensor coordinates are affine in ``(x, u)`` and ``(y, v)``::

    j = cA_x + ax(alpha) * x + au(alpha) * u + ac(alpha)      (A column)
    k = cB_x + bx(alpha) * x + bu(alpha) * u + bc(alpha)      (B column)

and likewise ``m``/``n`` from ``(y, v)`` with the same coefficients, where
``x, u`` are measured from the grid centres and ``c*`` are the arm centres.
Every coefficient is itself ``c0 + c1 * alpha``. The default map is
``j = alpha * x + (1 - alpha) * u``, ``k = u``, which is the identity at
``alpha = 1``.

Coordinates are generated inside the kernel loop; nothing of size
(pixels x angular samples) is ever allocated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .engine import (
    ExecutionStats,
    MemoryBudget,
    WorkerPolicy,
    execute_map_reduce,
    plan_tiles,
)
from .errors import DegenerateAlpha, EmptyAngularGrid
from .frame_io import write_pgm

SKIP = "skip_and_renormalize"
CLAMP = "clamp"
_POLICY_ALIASES = {"skip": SKIP, "clamp": CLAMP, SKIP: SKIP}

DEFAULT_A = (0.0, 1.0, 1.0, -1.0, 0.0, 0.0)
DEFAULT_B = (0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class RefocusMap:
    """Coefficient sextuples ``(x0, x1, u0, u1, c0, c1)`` for each arm.

    ``coord = (x0 + x1*alpha) * x + (u0 + u1*alpha) * u + (c0 + c1*alpha)``,
    relative to the arm centre. ``center_a``/``center_b`` are (column, row)
    origins; ``None`` means the image centre.
    """

    a: tuple = DEFAULT_A
    b: tuple = DEFAULT_B
    center_a: tuple | None = None
    center_b: tuple | None = None

    def __post_init__(self):
        if len(self.a) != 6 or len(self.b) != 6:
            raise ValueError("map coefficients must be sextuples")
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))

    @classmethod
    def parse(cls, text: str) -> "RefocusMap":
        """A-arm sextuple ``"x0,x1,u0,u1,c0,c1"``; the B arm keeps its default."""
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError(f"--map needs six coefficients, got {text!r}")
        return cls(a=tuple(vals))

    def coefficients(self, alpha: float) -> tuple:
        """(ax, au, ac, bx, bu, bc) at ``alpha``."""
        ax = self.a[0] + self.a[1] * alpha
        au = self.a[2] + self.a[3] * alpha
        ac = self.a[4] + self.a[5] * alpha
        bx = self.b[0] + self.b[1] * alpha
        bu = self.b[2] + self.b[3] * alpha
        bc = self.b[4] + self.b[5] * alpha
        return ax, au, ac, bx, bu, bc

    def check_alpha(self, alpha: float):
        ax, _, _, bx, _, _ = self.coefficients(alpha)
        if not math.isfinite(alpha):
            raise DegenerateAlpha(f"alpha {alpha} is not finite")
        if ax == 0.0 and bx == 0.0:
            raise DegenerateAlpha(f"alpha={alpha}: coordinates do not depend on the output pixel")

    def centers(self, dims) -> tuple:
        """(cAx, cAy, cBx, cBy) for a tensor of dims (j, k, m, n)."""
        wa, wb, ha, hb = dims
        ca = self.center_a if self.center_a is not None else ((wa - 1) / 2, (ha - 1) / 2)
        cb = self.center_b if self.center_b is not None else ((wb - 1) / 2, (hb - 1) / 2)
        return float(ca[0]), float(ca[1]), float(cb[0]), float(cb[1])

    def to_dict(self) -> dict:
        return {
            "a": list(self.a),
            "b": list(self.b),
            "center_a": None if self.center_a is None else list(self.center_a),
            "center_b": None if self.center_b is None else list(self.center_b),
            "form": "(x0 + x1*alpha) * x + (u0 + u1*alpha) * u + (c0 + c1*alpha)",
        }


@dataclass(frozen=True)
class Grid:
    width: int
    height: int
    spacing: float = 1.0

    def offsets(self):
        """Centred sample positions along x and y."""
        xs = (np.arange(self.width) - (self.width - 1) / 2) * self.spacing
        ys = (np.arange(self.height) - (self.height - 1) / 2) * self.spacing
        return xs, ys

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "spacing": self.spacing}


@dataclass(frozen=True)
class RefocusSpec:
    alphas: tuple
    output_grid: Grid | None = None  # default: A image lattice
    angular_grid: Grid | None = None  # default: B image lattice
    boundary_policy: str = SKIP

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.alphas or not all(math.isfinite(a) for a in self.alphas):
            raise ValueError("alphas must be a non-empty list of finite values")
        policy = _POLICY_ALIASES.get(self.boundary_policy)
        if policy is None:
            raise ValueError(f"unknown boundary policy {self.boundary_policy!r}")
        object.__setattr__(self, "boundary_policy", policy)

    @classmethod
    def linspace(cls, start, end, planes, **kw) -> "RefocusSpec":
        return cls(tuple(np.linspace(start, end, planes).tolist()), **kw)

    def grids(self, dims) -> tuple:
        wa, wb, ha, hb = dims
        out = self.output_grid or Grid(wa, ha)
        ang = self.angular_grid or Grid(wb, hb)
        return out, ang

    def to_dict(self) -> dict:
        return {
            "alphas": list(self.alphas),
            "output_grid": None if self.output_grid is None else self.output_grid.to_dict(),
            "angular_grid": None if self.angular_grid is None else self.angular_grid.to_dict(),
            "boundary_policy": self.boundary_policy,
        }


@dataclass
class RefocusedStack:
    planes: list
    alphas: list
    plane_meta: list = field(default_factory=list)

    def as_array(self) -> np.ndarray:
        return np.stack(self.planes)


@njit(nogil=True, cache=True)
def _axis(c, dim, clamp):
    """(lo, hi, t, ok) for one axis; hi == lo when the coordinate is on a node."""
    if clamp:
        if c < 0.0:
            c = 0.0
        elif c > dim - 1:
            c = float(dim - 1)
    elif not (c >= 0.0 and c <= dim - 1):
        return 0, 0, 0.0, False
    lo = int(math.floor(c))
    t = c - lo
    if t == 0.0:
        return lo, lo, 0.0, True
    return lo, lo + 1, t, True


@njit(nogil=True, cache=True)
def _interp4(g, cj, ck, cm, cn, clamp):
    """Multilinear value at (cj, ck, cm, cn); ok is False if a needed corner is outside."""
    j0, j1, tj, okj = _axis(cj, g.shape[0], clamp)
    k0, k1, tk, okk = _axis(ck, g.shape[1], clamp)
    m0, m1, tm, okm = _axis(cm, g.shape[2], clamp)
    n0, n1, tn, okn = _axis(cn, g.shape[3], clamp)
    if not (okj and okk and okm and okn):
        return 0.0, False
    val = 0.0
    for a in range(2 if j1 != j0 else 1):
        wj = (1.0 - tj) if a == 0 else tj
        jj = j0 + a
        for b in range(2 if k1 != k0 else 1):
            wk = (1.0 - tk) if b == 0 else tk
            kk = k0 + b
            for c in range(2 if m1 != m0 else 1):
                wm = (1.0 - tm) if c == 0 else tm
                mm = m0 + c
                for d in range(2 if n1 != n0 else 1):
                    wn = (1.0 - tn) if d == 0 else tn
                    val += wj * wk * wm * wn * g[jj, kk, mm, n0 + d]
    return val, True


@njit(nogil=True, cache=True)
def _refocus_kernel(g, coef, centers, xs, ys, us, vs, clamp, out):
    ax, au, ac, bx, bu, bc = coef[0], coef[1], coef[2], coef[3], coef[4], coef[5]
    cax, cay, cbx, cby = centers[0], centers[1], centers[2], centers[3]
    min_cnt = us.size * vs.size
    max_cnt = 0
    total = 0
    for iy in range(ys.size):
        y = ys[iy]
        for ix in range(xs.size):
            x = xs[ix]
            acc = 0.0
            cnt = 0
            for iv in range(vs.size):
                v = vs[iv]
                cm = cay + ax * y + au * v + ac
                cn = cby + bx * y + bu * v + bc
                for iu in range(us.size):
                    u = us[iu]
                    cj = cax + ax * x + au * u + ac
                    ck = cbx + bx * x + bu * u + bc
                    val, ok = _interp4(g, cj, ck, cm, cn, clamp)
                    if ok:
                        acc += val
                        cnt += 1
            out[iy, ix] = acc / cnt if cnt > 0 else 0.0
            total += cnt
            if cnt < min_cnt:
                min_cnt = cnt
            if cnt > max_cnt:
                max_cnt = cnt
    return min_cnt, max_cnt, total


def _as_array(gamma) -> np.ndarray:
    g = getattr(gamma, "gamma", gamma)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.ndim != 4 or g.size == 0:
        raise ValueError("gamma must be a non-empty 4D tensor")
    return g


def interp4(gamma, coord, boundary_policy: str = SKIP) -> float:
    """Multilinear interpolation of gamma at a (j, k, m, n) point.

    Under ``skip_and_renormalize`` a point whose needed corners leave the
    tensor yields NaN; under ``clamp`` coordinates are clamped per axis.
    """
    g = _as_array(gamma)
    clamp = _POLICY_ALIASES[boundary_policy] == CLAMP
    val, ok = _interp4(g, *(float(c) for c in coord), clamp)
    return val if ok else float("nan")


def corner_weights(frac) -> np.ndarray:
    """The 16 multilinear weights for fractional offsets (tj, tk, tm, tn)."""
    w = np.ones(1)
    for t in frac:
        w = np.multiply.outer(w, np.array([1.0 - t, t])).ravel()
    return w


def _plane(g, alpha, rmap: RefocusMap, spec: RefocusSpec, out=None):
    rmap.check_alpha(alpha)
    out_grid, ang_grid = spec.grids(g.shape)
    xs, ys = out_grid.offsets()
    us, vs = ang_grid.offsets()
    if us.size == 0 or vs.size == 0:
        raise EmptyAngularGrid("angular grid has no samples")
    if out is None:
        out = np.empty((ys.size, xs.size), dtype=np.float64)
    coef = np.array(rmap.coefficients(alpha), dtype=np.float64)
    centers = np.array(rmap.centers(g.shape), dtype=np.float64)
    lo, hi, total = _refocus_kernel(
        g, coef, centers, xs, ys, us, vs, spec.boundary_policy == CLAMP, out
    )
    meta = {
        "alpha": float(alpha),
        "min_samples": int(lo),
        "max_samples": int(hi),
        "mean_samples": total / out.size,
    }
    return out, meta


def refocus_plane(gamma, alpha: float, rmap: RefocusMap, spec: RefocusSpec) -> np.ndarray:
    """Mean of interpolated gamma over the angular grid, for every output pixel."""
    return _plane(_as_array(gamma), alpha, rmap, spec)[0]


def refocus_stack(
    gamma,
    spec: RefocusSpec,
    rmap: RefocusMap | None = None,
    budget: MemoryBudget | None = None,
    policy: WorkerPolicy | None = None,
    stats: ExecutionStats | None = None,
) -> RefocusedStack:
    """One plane per alpha; planes are the tiling unit.

    Tile buffers in flight never exceed ``budget`` bytes in total, on top of
    gamma and the assembled output.
    """
    g = _as_array(gamma)
    rmap = rmap or RefocusMap()
    for a in spec.alphas:
        rmap.check_alpha(a)
    out_grid, ang_grid = spec.grids(g.shape)
    if ang_grid.width < 1 or ang_grid.height < 1:
        raise EmptyAngularGrid("angular grid has no samples")
    plane_bytes = out_grid.width * out_grid.height * 8
    n = len(spec.alphas)
    budget = budget or MemoryBudget(n * plane_bytes)
    policy = policy or WorkerPolicy(1)
    plan = plan_tiles([n], plane_bytes, budget)

    planes = [None] * n
    metas = [None] * n

    def task(tile):
        ((s, e),) = tile
        buf = np.empty((e - s, out_grid.height, out_grid.width))
        tile_meta = []
        for i in range(s, e):
            _, meta = _plane(g, spec.alphas[i], rmap, spec, out=buf[i - s])
            tile_meta.append(meta)
        return s, buf, tile_meta

    def combine(acc, result):
        s, buf, tile_meta = result
        for off in range(buf.shape[0]):
            planes[s + off] = buf[off]
            metas[s + off] = tile_meta[off]
        return acc + 1

    execute_map_reduce(plan, policy, task, combine, 0, budget=budget, stats=stats)
    return RefocusedStack(planes, list(spec.alphas), metas)


def sharpness(image) -> float:
    """Gradient energy over squared mean intensity.

    ``(mean(dx**2) + mean(dy**2)) / mean(image)**2`` with forward differences;
    0 for a constant image. If the mean is exactly zero the mean square is
    used as the normalizer instead.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    energy = 0.0
    if img.shape[1] > 1:
        energy += float(np.mean(np.diff(img, axis=1) ** 2))
    if img.shape[0] > 1:
        energy += float(np.mean(np.diff(img, axis=0) ** 2))
    if energy == 0.0:
        return 0.0
    norm = float(img.mean()) ** 2
    if norm == 0.0:
        norm = float(np.mean(img**2))
    return energy / norm


def write_stack(
    directory,
    stack: RefocusedStack,
    rmap: RefocusMap,
    spec: RefocusSpec,
    fmt: str = "raw",
) -> Path:
    """Raw little-endian float64 planes plus ``stack.json``; optional 16-bit PGMs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (alpha, plane) in enumerate(zip(stack.alphas, stack.planes)):
        name = f"plane_{i:04d}_alpha_{alpha:.6f}.raw"
        np.ascontiguousarray(plane, dtype="<f8").tofile(directory / name)
        entry = {"index": i, "alpha": alpha, "file": name}
        if i < len(stack.plane_meta) and stack.plane_meta[i]:
            entry.update({k: v for k, v in stack.plane_meta[i].items() if k != "alpha"})
        entries.append(entry)
    h, w = stack.planes[0].shape
    manifest = {
        "dims": {"width": w, "height": h},
        "dtype": "float64-le",
        "alphas": list(stack.alphas),
        "map": rmap.to_dict(),
        "boundary_policy": spec.boundary_policy,
        "planes": entries,
    }
    if fmt == "pgm":
        lo = float(min(p.min() for p in stack.planes))
        hi = float(max(p.max() for p in stack.planes))
        scale = 65535.0 / (hi - lo) if hi > lo else 0.0
        for e, plane in zip(entries, stack.planes):
            pgm = e["file"].replace(".raw", ".pgm")
            write_pgm(directory / pgm, np.rint((plane - lo) * scale))
            e["pgm"] = pgm
        manifest["pgm_scaling"] = {"min": lo, "max": hi, "maxval": 65535}
    elif fmt != "raw":
        raise ValueError(f"unknown format {fmt!r}")
    path = directory / "stack.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_stack(directory) -> RefocusedStack:
    directory = Path(directory)
    manifest = json.loads((directory / "stack.json").read_text())
    h, w = manifest["dims"]["height"], manifest["dims"]["width"]
    planes = [np.fromfile(directory / e["file"], dtype="<f8").reshape(h, w) for e in manifest["planes"]]
    return RefocusedStack(planes, manifest["alphas"], manifest["planes"])
