"""Four-dimensional correlation tensor of two binary image sequences.

For frames ``A^i`` (arm A) and ``B^i`` (arm B)::

    gamma[j, k, m, n] = <A_jm B_kn> - <A_jm><B_kn>

where ``<.>`` averages over all ``n_tot`` frames, ``(j, m)`` is the
(column, row) of an A pixel and ``(k, n)`` the (column, row) of a B pixel.

Two routes produce it. :func:`correlate_naive` accumulates per-frame outer
products in double precision. :func:`correlate_packed` works on
:class:`~cpiproc.frame_io.PixelBitStreamBlock` data, where the product of two
binary pixels over 64 frames is ``popcount(word_a & word_b)``. Both routes
end in the same integer counts and share :func:`finalize`, so their results
are bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit, types
from numba.extending import intrinsic
from scipy.linalg.blas import dger

from .engine import (
    ExecutionStats,
    MemoryBudget,
    TilePlan,
    WorkerPolicy,
    execute_map_reduce,
    plan_tiles,
)
from .errors import (
    AlignmentMismatch,
    DimMismatch,
    FormatError,
    LengthMismatch,
    ZeroFrames,
)
from .frame_io import PixelBitStreamBlock

COUNT_BYTES = 8


@intrinsic
def _popcount64(typingctx, x):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        return builder.ctpop(args[0])

    return sig, codegen


@njit(nogil=True, cache=True)
def and_popcount_accumulate(words_a, words_b, out):
    """out[p, q] += sum_w popcount(words_a[p, w] & words_b[q, w])."""
    n_a, n_words = words_a.shape
    n_b = words_b.shape[0]
    for p in range(n_a):
        for q in range(n_b):
            s = np.uint64(0)
            for w in range(n_words):
                s += _popcount64(words_a[p, w] & words_b[q, w])
            out[p, q] += s


@njit(nogil=True, cache=True)
def stream_popcounts(words):
    n, n_words = words.shape
    out = np.zeros(n, dtype=np.uint64)
    for p in range(n):
        s = np.uint64(0)
        for w in range(n_words):
            s += _popcount64(words[p, w])
        out[p] = s
    return out


@dataclass
class CooccurrenceCounts:
    """Integer sufficient statistics of the correlation.

    ``counts[p, q]`` is the number of frames where A-pixel ``p`` and B-pixel
    ``q`` both fired; pixels are linearized row-major (``p = m * width + j``).
    """

    counts: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray
    n_tot: int
    shape_a: tuple  # (height, width)
    shape_b: tuple

    @classmethod
    def zeros(cls, shape_a, shape_b) -> "CooccurrenceCounts":
        pa = shape_a[0] * shape_a[1]
        pb = shape_b[0] * shape_b[1]
        return cls(
            np.zeros((pa, pb), dtype=np.uint64),
            np.zeros(pa, dtype=np.uint64),
            np.zeros(pb, dtype=np.uint64),
            0,
            tuple(shape_a),
            tuple(shape_b),
        )

    def copy(self) -> "CooccurrenceCounts":
        return CooccurrenceCounts(
            self.counts.copy(),
            self.marginal_a.copy(),
            self.marginal_b.copy(),
            self.n_tot,
            self.shape_a,
            self.shape_b,
        )

    def check_bounds(self) -> bool:
        """Inclusion-exclusion bounds on every pair count."""
        c = self.counts.astype(np.int64)
        ma = self.marginal_a.astype(np.int64)[:, None]
        mb = self.marginal_b.astype(np.int64)[None, :]
        upper = np.minimum(ma, mb)
        lower = ma + mb - self.n_tot
        return bool(
            np.all(c >= 0)
            and np.all(c <= upper)
            and np.all(upper <= self.n_tot)
            and np.all(c >= lower)
        )

    def __eq__(self, other):
        if not isinstance(other, CooccurrenceCounts):
            return NotImplemented
        return (
            self.n_tot == other.n_tot
            and self.shape_a == other.shape_a
            and self.shape_b == other.shape_b
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.marginal_a, other.marginal_a)
            and np.array_equal(self.marginal_b, other.marginal_b)
        )


@dataclass
class CorrelationTensor:
    """``gamma`` has axes (j, k, m, n): A column, B column, A row, B row."""

    gamma: np.ndarray
    n_tot: int
    counts: CooccurrenceCounts | None = None
    meta: dict = field(default_factory=dict)

    INDEX_CONVENTION = "gamma[j,k,m,n]: j,m = A column,row; k,n = B column,row"

    @property
    def dims(self) -> tuple:
        return self.gamma.shape

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.gamma).tobytes()).hexdigest()


def pair_matrix_to_tensor(mat: np.ndarray, shape_a, shape_b) -> np.ndarray:
    """(p, q) matrix -> (j, k, m, n) tensor."""
    ha, wa = shape_a
    hb, wb = shape_b
    return np.ascontiguousarray(mat.reshape(ha, wa, hb, wb).transpose(1, 3, 0, 2))


def tensor_to_pair_matrix(t: np.ndarray) -> np.ndarray:
    wa, wb, ha, hb = t.shape
    return np.ascontiguousarray(t.transpose(2, 0, 3, 1)).reshape(ha * wa, hb * wb)


def finalize(counts: CooccurrenceCounts) -> CorrelationTensor:
    """Turn integer counts into gamma with one shared ``inv = 1 / n_tot``."""
    if counts.n_tot < 1:
        raise ZeroFrames("cannot normalize a correlation over zero frames")
    inv = 1.0 / counts.n_tot
    mean_a = counts.marginal_a.astype(np.float64) * inv
    mean_b = counts.marginal_b.astype(np.float64) * inv
    g = counts.counts.astype(np.float64) * inv
    g -= np.multiply.outer(mean_a, mean_b)
    gamma = pair_matrix_to_tensor(g, counts.shape_a, counts.shape_b)
    return CorrelationTensor(
        gamma,
        counts.n_tot,
        counts,
        {"index_convention": CorrelationTensor.INDEX_CONVENTION},
    )


def correlate_naive(images_a, images_b) -> CorrelationTensor:
    """Reference route: per-frame rank-1 updates in double precision, frame order."""
    a = np.asarray(images_a)
    b = np.asarray(images_b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimMismatch("expected (frames, height, width) stacks")
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(f"{a.shape[0]} A frames vs {b.shape[0]} B frames")
    n = a.shape[0]
    if n < 1:
        raise ZeroFrames("no frames")
    shape_a, shape_b = a.shape[1:], b.shape[1:]
    fa = a.reshape(n, -1).astype(np.float64)
    fb = b.reshape(n, -1).astype(np.float64)
    prod = np.zeros((fa.shape[1], fb.shape[1]), dtype=np.float64, order="F")
    sum_a = np.zeros(fa.shape[1])
    sum_b = np.zeros(fb.shape[1])
    for i in range(n):
        prod = dger(1.0, fa[i], fb[i], a=prod, overwrite_a=True)
        sum_a += fa[i]
        sum_b += fb[i]
    counts = CooccurrenceCounts(
        prod.astype(np.uint64),
        sum_a.astype(np.uint64),
        sum_b.astype(np.uint64),
        n,
        tuple(shape_a),
        tuple(shape_b),
    )
    return finalize(counts)


def _check_pair(block_a: PixelBitStreamBlock, block_b: PixelBitStreamBlock):
    if block_a.frames_in_block != block_b.frames_in_block:
        raise AlignmentMismatch(
            f"A block holds {block_a.frames_in_block} frames, B block {block_b.frames_in_block}"
        )
    if block_a.words_per_pixel != block_b.words_per_pixel:
        raise AlignmentMismatch("A and B blocks differ in words per pixel")


def accumulate_chunk(
    acc: CooccurrenceCounts, block_a: PixelBitStreamBlock, block_b: PixelBitStreamBlock
) -> CooccurrenceCounts:
    """Add one aligned pair of frame blocks into ``acc`` (in place) and return it."""
    _check_pair(block_a, block_b)
    if (block_a.roi_height, block_a.roi_width) != acc.shape_a or (
        block_b.roi_height,
        block_b.roi_width,
    ) != acc.shape_b:
        raise AlignmentMismatch("block roi shape differs from the accumulator")
    and_popcount_accumulate(block_a.words, block_b.words, acc.counts)
    acc.marginal_a += stream_popcounts(block_a.words)
    acc.marginal_b += stream_popcounts(block_b.words)
    acc.n_tot += block_a.frames_in_block
    return acc


def plan_correlation(pixels_a: int, pixels_b: int, budget: MemoryBudget) -> TilePlan:
    """Tiles of contiguous A pixels against all B pixels."""
    return plan_tiles([pixels_a, pixels_b], COUNT_BYTES, budget, splittable=1)


def correlate_packed(
    streams_a: Sequence[PixelBitStreamBlock],
    streams_b: Sequence[PixelBitStreamBlock],
    plan: TilePlan | None = None,
    policy: WorkerPolicy | None = None,
    budget: MemoryBudget | None = None,
    stats: ExecutionStats | None = None,
) -> CorrelationTensor:
    """Bit-packed route over aligned block sequences, one engine task per tile."""
    streams_a = list(streams_a)
    streams_b = list(streams_b)
    if len(streams_a) != len(streams_b):
        raise AlignmentMismatch(f"{len(streams_a)} A blocks vs {len(streams_b)} B blocks")
    if not streams_a:
        raise ZeroFrames("no frame blocks")
    for ba, bb in zip(streams_a, streams_b):
        _check_pair(ba, bb)
    shape_a = (streams_a[0].roi_height, streams_a[0].roi_width)
    shape_b = (streams_b[0].roi_height, streams_b[0].roi_width)
    for ba, bb in zip(streams_a, streams_b):
        if (ba.roi_height, ba.roi_width) != shape_a or (bb.roi_height, bb.roi_width) != shape_b:
            raise AlignmentMismatch("blocks disagree on roi shape")
    pa, pb = streams_a[0].pixel_count, streams_b[0].pixel_count
    if plan is None:
        plan = plan_correlation(pa, pb, budget or MemoryBudget(pa * pb * COUNT_BYTES))
    if tuple(plan.problem_dims) != (pa, pb):
        raise AlignmentMismatch(f"plan covers {plan.problem_dims}, pair space is {(pa, pb)}")
    policy = policy or WorkerPolicy(1)

    acc = CooccurrenceCounts.zeros(shape_a, shape_b)

    def task(tile):
        (p0, p1), (q0, q1) = tile
        local = np.zeros((p1 - p0, q1 - q0), dtype=np.uint64)
        for ba, bb in zip(streams_a, streams_b):
            and_popcount_accumulate(ba.words[p0:p1], bb.words[q0:q1], local)
        return tile, local

    def combine(counts, result):
        ((p0, p1), (q0, q1)), local = result
        counts[p0:p1, q0:q1] = local
        return counts

    execute_map_reduce(plan, policy, task, combine, acc.counts, budget=budget, stats=stats)
    for ba, bb in zip(streams_a, streams_b):
        acc.marginal_a += stream_popcounts(ba.words)
        acc.marginal_b += stream_popcounts(bb.words)
        acc.n_tot += ba.frames_in_block
    out = finalize(acc)
    out.meta["tiles"] = plan.n_tiles
    return out


# -- container files ---------------------------------------------------------

MAGIC = b"CPIT"
VERSION = 1
HEADER_BYTES = 64
DTYPE_CODES = {1: np.dtype("<f8"), 2: np.dtype("<u8")}
_HEADER = struct.Struct("<4sI4IQI")


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def _write_container(path, data: np.ndarray, n_tot: int, code: int, sidecar: dict):
    header = _HEADER.pack(MAGIC, VERSION, *data.shape, n_tot, code)
    header = header.ljust(HEADER_BYTES, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype=DTYPE_CODES[code]).tobytes())
    meta = {
        "format": "CPIT",
        "version": VERSION,
        "dims": {"j": data.shape[0], "k": data.shape[1], "m": data.shape[2], "n": data.shape[3]},
        "n_tot": n_tot,
        "dtype": "float64-le" if code == 1 else "uint64-le",
        "order": "row-major, n fastest",
        **sidecar,
    }
    _sidecar(path).write_text(json.dumps(meta, indent=2))


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
    if len(raw) < HEADER_BYTES or raw[:4] != MAGIC:
        raise FormatError(f"{path} is not a CPIT container")
    magic, version, j, k, m, n, n_tot, code = _HEADER.unpack(raw[: _HEADER.size])
    if version != VERSION or code not in DTYPE_CODES:
        raise FormatError(f"{path}: unsupported version {version} or dtype code {code}")
    return {"version": version, "dims": (j, k, m, n), "n_tot": n_tot, "dtype_code": code}


def _read_container(path):
    h = read_header(path)
    data = np.fromfile(path, dtype=DTYPE_CODES[h["dtype_code"]], offset=HEADER_BYTES)
    if data.size != np.prod(h["dims"]):
        raise FormatError(f"{path}: payload has {data.size} values, header says {h['dims']}")
    return h, data.reshape(h["dims"])


def write_gamma(path, tensor: CorrelationTensor, provenance: dict | None = None):
    """Write gamma as a CPIT v1 container plus a ``.json`` sidecar."""
    _write_container(
        path,
        tensor.gamma,
        tensor.n_tot,
        1,
        {"index_convention": CorrelationTensor.INDEX_CONVENTION, **(provenance or {})},
    )


def read_gamma(path) -> CorrelationTensor:
    h, data = _read_container(path)
    if h["dtype_code"] != 1:
        raise FormatError(f"{path} holds counts, not gamma")
    meta = {}
    if _sidecar(path).exists():
        meta = json.loads(_sidecar(path).read_text())
    return CorrelationTensor(np.ascontiguousarray(data), h["n_tot"], None, meta)


def write_counts(path, counts: CooccurrenceCounts, provenance: dict | None = None):
    """Audit dump: pair counts in the gamma layout, marginals in the sidecar."""
    t = pair_matrix_to_tensor(counts.counts, counts.shape_a, counts.shape_b)
    _write_container(
        path,
        t,
        counts.n_tot,
        2,
        {
            "marginal_a": counts.marginal_a.tolist(),
            "marginal_b": counts.marginal_b.tolist(),
            **(provenance or {}),
        },
    )


def read_counts(path) -> CooccurrenceCounts:
    h, data = _read_container(path)
    if h["dtype_code"] != 2:
        raise FormatError(f"{path} holds gamma, not counts")
    meta = json.loads(_sidecar(path).read_text())
    wa, wb, ha, hb = h["dims"]
    return CooccurrenceCounts(
        tensor_to_pair_matrix(data),
        np.asarray(meta["marginal_a"], dtype=np.uint64),
        np.asarray(meta["marginal_b"], dtype=np.uint64),
        h["n_tot"],
        (ha, wa),
        (hb, wb),
    )
