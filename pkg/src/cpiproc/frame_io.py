"""Reading, validating and re-laying-out raw 1-bit SPAD frame files.

A ``.bin`` file has no header: frames follow each other, each frame is a
sequence of rows, each row packs ``width / 8`` bytes with one bit per pixel.
Within a byte, ``lsb_first`` maps bit ``i`` of byte ``b`` to column
``8 * b + i``; ``msb_first`` maps the most significant bit to the lowest column.

Frames are consumed in two layouts:

* :class:`PackedFrameChunk` keeps the acquisition (frame-major) layout.
* :class:`PixelBitStreamBlock` is the transpose: for every pixel, one packed
  bit sequence across frames stored in little-endian ``uint64`` words, bit
  ``f % 64`` of word ``f // 64`` holding frame ``f``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import EmptyDataset, LayoutMismatch, RoiOutOfBounds, SizeMismatch

WORD_BITS = 64

_BITORDER = {"lsb_first": "little", "msb_first": "big"}
_BITORDER_ALIASES = {"lsb": "lsb_first", "msb": "msb_first"}


@dataclass(frozen=True)
class FrameLayout:
    width_px: int = 512
    height_px: int = 256
    frames_per_file: int = 512
    bit_order: str = "lsb_first"

    def __post_init__(self):
        order = _BITORDER_ALIASES.get(self.bit_order, self.bit_order)
        if order not in _BITORDER:
            raise ValueError(f"unknown bit order {self.bit_order!r}")
        object.__setattr__(self, "bit_order", order)
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("frame dimensions must be positive")
        if self.frames_per_file < 0:
            raise ValueError("frames_per_file must be non-negative")

    @property
    def row_stride_bytes(self) -> int:
        return -(-self.width_px // 8)

    @property
    def frame_bytes(self) -> int:
        return self.height_px * self.row_stride_bytes

    @property
    def file_bytes(self) -> int:
        return self.frames_per_file * self.frame_bytes

    @property
    def numpy_bitorder(self) -> str:
        return _BITORDER[self.bit_order]

    def check_sensor(self):
        """Raw sensor files need both dimensions to be multiples of 8."""
        if self.width_px % 8 or self.height_px % 8:
            raise LayoutMismatch(
                f"sensor layout {self.width_px}x{self.height_px} is not a multiple of 8"
            )

    def same_geometry(self, other: "FrameLayout") -> bool:
        return (self.width_px, self.height_px, self.bit_order) == (
            other.width_px,
            other.height_px,
            other.bit_order,
        )

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "frames_per_file": self.frames_per_file,
            "bit_order": self.bit_order,
            "row_stride_bytes": self.row_stride_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameLayout":
        return cls(d["width_px"], d["height_px"], d["frames_per_file"], d["bit_order"])


@dataclass(frozen=True)
class Roi:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise RoiOutOfBounds(f"empty roi {self}")
        if self.x0 < 0 or self.y0 < 0:
            raise RoiOutOfBounds(f"negative roi origin {self}")

    @classmethod
    def parse(cls, text: str) -> "Roi":
        """Parse ``"X,Y,W,H"``."""
        parts = [int(p) for p in text.split(",")]
        if len(parts) != 4:
            raise ValueError(f"roi needs X,Y,W,H, got {text!r}")
        return cls(*parts)

    def check_inside(self, layout: FrameLayout):
        if self.x0 + self.width > layout.width_px or self.y0 + self.height > layout.height_px:
            raise RoiOutOfBounds(
                f"roi {self} exceeds {layout.width_px}x{layout.height_px} frame"
            )

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Roi":
        return cls(d["x0"], d["y0"], d["width"], d["height"])


@dataclass
class PackedFrameChunk:
    """Frames in acquisition layout: ``bits`` has shape (frames, rows, stride)."""

    layout: FrameLayout
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        expected = (self.layout.height_px, self.layout.row_stride_bytes)
        if self.bits.ndim != 3 or self.bits.shape[1:] != expected:
            raise LayoutMismatch(
                f"bits of shape {self.bits.shape} do not match layout rows/stride {expected}"
            )

    @property
    def frame_count(self) -> int:
        return self.bits.shape[0]

    def to_bytes(self) -> bytes:
        return self.bits.tobytes()

    def unpack(self) -> np.ndarray:
        """Frames as a (frames, height, width) uint8 array of 0/1."""
        px = np.unpackbits(self.bits, axis=2, bitorder=self.layout.numpy_bitorder)
        return px[:, :, : self.layout.width_px]

    @classmethod
    def from_pixels(cls, frames: np.ndarray, bit_order: str = "lsb_first") -> "PackedFrameChunk":
        """Pack a (frames, height, width) array of 0/1 values."""
        frames = np.asarray(frames)
        if frames.ndim != 3:
            raise ValueError("expected a (frames, height, width) array")
        n, h, w = frames.shape
        layout = FrameLayout(w, h, n, bit_order)
        bits = np.packbits(frames != 0, axis=2, bitorder=layout.numpy_bitorder)
        return cls(layout, bits)


def parse_bin_file(data, layout: FrameLayout) -> PackedFrameChunk:
    """Interpret raw bytes as whole frames of ``layout``; no bit is touched."""
    buf = np.frombuffer(data, dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    buf = buf.reshape(-1)
    if buf.size % layout.frame_bytes:
        raise SizeMismatch(
            f"{buf.size} bytes is not a whole number of {layout.frame_bytes}-byte frames"
        )
    n = buf.size // layout.frame_bytes
    return PackedFrameChunk(layout, buf.reshape(n, layout.height_px, layout.row_stride_bytes))


def read_bin_file(path, layout: FrameLayout) -> PackedFrameChunk:
    try:
        return parse_bin_file(np.fromfile(path, dtype=np.uint8), layout)
    except SizeMismatch as exc:
        raise SizeMismatch(str(exc), path=str(path)) from None


def extract_roi(chunk: PackedFrameChunk, roi: Roi) -> PackedFrameChunk:
    layout = chunk.layout
    roi.check_inside(layout)
    rows = slice(roi.y0, roi.y0 + roi.height)
    sub_layout = FrameLayout(roi.width, roi.height, chunk.frame_count, layout.bit_order)
    if roi.x0 % 8 == 0 and roi.width % 8 == 0:
        # byte-aligned columns keep their in-byte position under either bit order
        b0 = roi.x0 // 8
        bits = chunk.bits[:, rows, b0 : b0 + roi.width // 8]
        return PackedFrameChunk(sub_layout, np.ascontiguousarray(bits))
    px = chunk.unpack()[:, rows, roi.x0 : roi.x0 + roi.width]
    bits = np.packbits(px, axis=2, bitorder=layout.numpy_bitorder)
    return PackedFrameChunk(sub_layout, bits)


def split_roi(chunk: PackedFrameChunk, roi_a: Roi, roi_b: Roi):
    """Cut the A and B sub-images out of every frame of ``chunk``."""
    return extract_roi(chunk, roi_a), extract_roi(chunk, roi_b)


@dataclass
class PixelBitStreamBlock:
    """Pixel-major packed streams; ``words`` has shape (pixels, ceil(frames/64))."""

    words: np.ndarray
    frames_in_block: int
    roi_width: int
    roi_height: int

    @property
    def pixel_count(self) -> int:
        return self.words.shape[0]

    @property
    def words_per_pixel(self) -> int:
        return self.words.shape[1]

    def pixel_index(self, j: int, m: int) -> int:
        return m * self.roi_width + j

    def popcounts(self) -> np.ndarray:
        """Number of set frames per pixel."""
        as_bytes = self.words.view(np.uint8).reshape(self.pixel_count, -1)
        return np.unpackbits(as_bytes, axis=1).sum(axis=1, dtype=np.uint64)

    def to_frames(self) -> np.ndarray:
        """Inverse transposition: (frames, height, width) uint8 array."""
        as_bytes = self.words.astype("<u8", copy=False).view(np.uint8)
        bits = np.unpackbits(as_bytes.reshape(self.pixel_count, -1), axis=1, bitorder="little")
        bits = bits[:, : self.frames_in_block]
        return np.ascontiguousarray(bits.T).reshape(
            self.frames_in_block, self.roi_height, self.roi_width
        )


def pack_streams(pixels: np.ndarray, frames_in_block: int | None = None) -> PixelBitStreamBlock:
    """Transpose a (frames, height, width) 0/1 array into pixel bit streams."""
    n, h, w = pixels.shape
    if frames_in_block is None:
        frames_in_block = n
    if n > frames_in_block:
        raise LayoutMismatch(f"{n} frames exceed the declared block of {frames_in_block}")
    n_words = -(-frames_in_block // WORD_BITS)
    streams = np.zeros((h * w, n_words * WORD_BITS), dtype=np.uint8)
    streams[:, :n] = pixels.reshape(n, h * w).T
    packed = np.packbits(streams, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64, copy=False)
    return PixelBitStreamBlock(np.ascontiguousarray(words), frames_in_block, w, h)


def transpose_to_bitstreams(
    chunks: Sequence[PackedFrameChunk], frames_in_block: int | None = None
) -> PixelBitStreamBlock:
    """Concatenate chunks along frames and transpose to per-pixel streams.

    Pixel ``p = m * width + j`` for column ``j`` and row ``m``. Padding bits
    past the last frame are zero.
    """
    chunks = list(chunks)
    if not chunks:
        raise LayoutMismatch("no chunks to transpose")
    first = chunks[0].layout
    for c in chunks[1:]:
        if not c.layout.same_geometry(first):
            raise LayoutMismatch(f"chunk layout {c.layout} differs from {first}")
    pixels = np.concatenate([c.unpack() for c in chunks], axis=0)
    return pack_streams(pixels, frames_in_block)


def cumulative_preview(
    chunks: Iterable[PackedFrameChunk], layout: FrameLayout | None = None
) -> np.ndarray:
    """Per-pixel count of frames in which the pixel fired, shape (height, width)."""
    acc = None
    for c in chunks:
        if layout is None:
            layout = c.layout
        elif not c.layout.same_geometry(layout):
            raise LayoutMismatch(f"chunk layout {c.layout} differs from {layout}")
        part = c.unpack().sum(axis=0, dtype=np.int64)
        acc = part if acc is None else acc + part
    if acc is None:
        if layout is None:
            raise LayoutMismatch("an empty preview needs an explicit layout")
        acc = np.zeros((layout.height_px, layout.width_px), dtype=np.int64)
    return acc


def write_pgm(path, image: np.ndarray) -> int:
    """Write a 16-bit binary PGM, clamping values to [0, 65535]. Returns maxval."""
    img = np.clip(np.asarray(image), 0, 65535).astype(">u2")
    maxval = int(max(1, img.max(initial=0)))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(img.tobytes())
    return maxval


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5":
        raise ValueError(f"not a binary PGM: {magic}")
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)


@dataclass
class DatasetManifest:
    file_paths: list
    layout: FrameLayout
    roi_a: Roi
    roi_b: Roi
    extra: dict = field(default_factory=dict)

    @property
    def n_files(self) -> int:
        return len(self.file_paths)

    @property
    def frames_per_file(self) -> int:
        return self.layout.frames_per_file

    @property
    def n_tot(self) -> int:
        return self.n_files * self.frames_per_file

    def subset(self, n_files: int) -> "DatasetManifest":
        return DatasetManifest(list(self.file_paths[:n_files]), self.layout, self.roi_a, self.roi_b)

    def iter_chunks(self) -> Iterator[PackedFrameChunk]:
        for path in self.file_paths:
            yield read_bin_file(path, self.layout)

    def iter_roi_chunks(self) -> Iterator[tuple]:
        for chunk in self.iter_chunks():
            yield split_roi(chunk, self.roi_a, self.roi_b)

    def to_dict(self) -> dict:
        return {
            "layout": self.layout.to_dict(),
            "roi_a": self.roi_a.to_dict(),
            "roi_b": self.roi_b.to_dict(),
            "file_paths": [str(p) for p in self.file_paths],
            "n_files": self.n_files,
            "frames_per_file": self.frames_per_file,
            "n_tot": self.n_tot,
            **self.extra,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        known = {"layout", "roi_a", "roi_b", "file_paths", "n_files", "frames_per_file", "n_tot"}
        return cls(
            list(d["file_paths"]),
            FrameLayout.from_dict(d["layout"]),
            Roi.from_dict(d["roi_a"]),
            Roi.from_dict(d["roi_b"]),
            {k: v for k, v in d.items() if k not in known},
        )

    @classmethod
    def from_json(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scan_dataset(directory, layout: FrameLayout, roi_a: Roi, roi_b: Roi) -> DatasetManifest:
    """List the ``.bin`` files of ``directory`` in lexicographic order and check sizes.

    Global frame ``i`` is frame ``i % frames_per_file`` of file ``i // frames_per_file``.
    """
    layout.check_sensor()
    roi_a.check_inside(layout)
    roi_b.check_inside(layout)
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyDataset(f"{directory} is not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix == ".bin" and p.is_file())
    if not paths:
        raise EmptyDataset(f"no .bin files in {directory}")
    for p in paths:
        size = os.path.getsize(p)
        if size != layout.file_bytes:
            raise SizeMismatch(
                f"size {size} bytes, expected {layout.file_bytes} "
                f"({layout.frames_per_file} frames of {layout.frame_bytes} bytes)",
                path=str(p),
            )
    return DatasetManifest([str(p) for p in paths], layout, roi_a, roi_b)
