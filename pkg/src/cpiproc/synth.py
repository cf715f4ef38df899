"""Synthetic correlated binary datasets with a known refocusing parameter.

Model, per frame ``i``:

* a speckle field ``S_i``: uniform noise from Philox4x64 keyed by
  ``(seed, i)``, box-averaged over ``round(grain)`` pixels;
* a random angle ``theta_i`` uniform in ``[-aperture, aperture]^2``;
* arm B sees ``S_i`` directly; arm A sees ``S_i`` displaced by
  ``(alpha0 - 1) * theta_i`` and is shadowed by the object mask displaced by
  ``(alpha0 - 1)**2 / alpha0 * theta_i``;
* both arms are binarized at one level per scene: the ``threshold`` quantile
  of B's field pooled over calibration frames. A per-frame quantile would
  fix the number of firing B pixels in every frame, which forces every row
  of the correlation to sum to zero and cancels the refocused signal.

Averaged over frames, A-pixel ``j`` correlates with B-pixel ``k`` with a
strength following ``mask((j - (1 - alpha0) * k) / alpha0)`` (centre-relative
coordinates), which is exactly the line family the default refocusing map
integrates at ``alpha = alpha0``. At ``alpha0 = 1`` there is no disparity and,
with an all-ones mask, both arms are identical.

Noise words are converted to doubles as ``(word >> 11) * 2**-53`` so the data
do not depend on numpy's distribution code, only on the Philox bit stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, RoiMismatch
from .frame_io import DatasetManifest, FrameLayout, Roi

_TWO_M53 = 2.0**-53


@dataclass
class SceneSpec:
    object_mask: np.ndarray
    true_alpha: float = 1.0
    speckle_grain_px: float = 2.0
    threshold: float = 0.5
    frames: int = 512
    seed: int = 0
    aperture_px: float = 64.0

    def __post_init__(self):
        self.object_mask = np.asarray(self.object_mask, dtype=np.float64)
        if self.object_mask.ndim != 2:
            raise ValueError("object_mask must be 2D")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.true_alpha == 0 or not math.isfinite(self.true_alpha):
            raise ValueError("true_alpha must be finite and non-zero")
        if self.speckle_grain_px < 1:
            raise ValueError("speckle grain must be >= 1 px")

    @property
    def shape(self) -> tuple:
        return self.object_mask.shape

    def params(self) -> dict:
        return {
            "true_alpha": self.true_alpha,
            "speckle_grain_px": self.speckle_grain_px,
            "threshold": self.threshold,
            "frames": self.frames,
            "seed": self.seed,
            "aperture_px": self.aperture_px,
        }


@dataclass
class GroundTruth:
    true_alpha: float
    object_mask: np.ndarray
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "true_alpha": self.true_alpha,
            "object_mask": self.object_mask.tolist(),
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(d["true_alpha"], np.asarray(d["object_mask"], dtype=np.float64), d["params"])

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> "GroundTruth":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other):
        return (
            isinstance(other, GroundTruth)
            and self.true_alpha == other.true_alpha
            and np.array_equal(self.object_mask, other.object_mask)
            and self.params == other.params
        )


def _uniforms(words: np.ndarray) -> np.ndarray:
    return (words >> np.uint64(11)).astype(np.float64) * _TWO_M53


def _stream(seed: int, frame_index: int) -> np.random.Philox:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, frame_index], dtype=np.uint64)
    return np.random.Philox(key=key)


def _box_width(grain: float) -> int:
    return max(1, int(round(grain)))


def _box_average(noise: np.ndarray, w: int) -> np.ndarray:
    """Mean over every w x w window, summed in a fixed order."""
    if w == 1:
        return noise.copy()
    c = np.zeros((noise.shape[0] + 1, noise.shape[1] + 1))
    c[1:, 1:] = noise.cumsum(axis=0).cumsum(axis=1)
    s = c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]
    return s / (w * w)


def speckle_field(seed: int, frame_index: int, dims, grain: float, pad: int = 0) -> np.ndarray:
    """Positive smooth random field of shape ``dims + 2 * pad``.

    Deterministic in all arguments; correlation length is about ``grain`` px.
    """
    h, w = dims
    bw = _box_width(grain)
    gen = _stream(seed, frame_index)
    gen.random_raw(2)  # reserved for the frame angle
    nh, nw = h + 2 * pad + bw - 1, w + 2 * pad + bw - 1
    noise = _uniforms(gen.random_raw(nh * nw)).reshape(nh, nw)
    return _box_average(noise, bw)


def frame_angle(seed: int, frame_index: int, aperture: float) -> tuple:
    words = _stream(seed, frame_index).random_raw(2)
    u = _uniforms(words)
    return (2.0 * u[0] - 1.0) * aperture, (2.0 * u[1] - 1.0) * aperture


def _bilinear(field_: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample ``field_`` at fractional (rows, cols); exact on integer positions."""
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    tr = rows - r0
    tc = cols - c0
    r1 = np.minimum(r0 + 1, field_.shape[0] - 1)
    c1 = np.minimum(c0 + 1, field_.shape[1] - 1)
    top = field_[r0[:, None], c0[None, :]] * (1.0 - tc)[None, :] + field_[r0[:, None], c1[None, :]] * tc[None, :]
    bot = field_[r1[:, None], c0[None, :]] * (1.0 - tc)[None, :] + field_[r1[:, None], c1[None, :]] * tc[None, :]
    return top * (1.0 - tr)[:, None] + bot * tr[:, None]


def _mask_sample(mask: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear mask lookup with zero transmission outside."""
    padded = np.pad(mask, 1)
    rr = np.clip(rows + 1, 0, padded.shape[0] - 1)
    cc = np.clip(cols + 1, 0, padded.shape[1] - 1)
    return _bilinear(padded, rr, cc)


CALIBRATION_FRAMES = 64
_CALIBRATION_SEED_OFFSET = 0x5EED


def binarization_level(scene: SceneSpec) -> float:
    """``threshold`` quantile of B's field over dedicated calibration frames."""
    h, w = scene.shape
    key = scene.seed ^ _CALIBRATION_SEED_OFFSET
    pooled = np.concatenate(
        [
            speckle_field(key, i, (h, w), scene.speckle_grain_px).ravel()
            for i in range(CALIBRATION_FRAMES)
        ]
    )
    rank = min(pooled.size - 1, int(math.floor(scene.threshold * pooled.size)))
    return float(np.partition(pooled, rank)[rank])


def generate_frames(scene: SceneSpec, start: int = 0, count: int | None = None, level=None):
    """Frames ``start .. start+count`` of both arms as (count, h, w) uint8 arrays."""
    count = scene.frames - start if count is None else count
    h, w = scene.shape
    a0 = scene.true_alpha
    speckle_gain = a0 - 1.0
    mask_gain = (a0 - 1.0) ** 2 / a0
    pad = int(math.ceil(abs(speckle_gain) * scene.aperture_px)) + 1
    if level is None:
        level = binarization_level(scene)
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    opaque_mask = not np.any(scene.object_mask)
    a_out = np.zeros((count, h, w), dtype=np.uint8)
    b_out = np.zeros((count, h, w), dtype=np.uint8)
    for n in range(count):
        i = start + n
        field_ = speckle_field(scene.seed, i, (h, w), scene.speckle_grain_px, pad)
        b_field = field_[pad : pad + h, pad : pad + w]
        b_out[n] = b_field >= level
        if opaque_mask:
            continue
        ty, tx = frame_angle(scene.seed, i, scene.aperture_px)
        a_field = _bilinear(field_, rows + pad - speckle_gain * ty, cols + pad - speckle_gain * tx)
        shadow = _mask_sample(scene.object_mask, rows - mask_gain * ty, cols - mask_gain * tx)
        a_out[n] = (a_field >= level) & (shadow >= 0.5)
    return a_out, b_out


def double_slit(shape, slit_width: int = 4, separation: int = 12, length: int | None = None):
    """Two vertical transmitting slits centred in ``shape``."""
    h, w = shape
    length = h // 2 if length is None else length
    mask = np.zeros(shape)
    cx = w // 2
    top = (h - length) // 2
    for centre in (cx - separation // 2, cx + separation // 2):
        lo = centre - slit_width // 2
        mask[top : top + length, lo : lo + slit_width] = 1.0
    return mask


def default_layout(scene: SceneSpec, frames_per_file: int = 512, bit_order="lsb_first"):
    """Side-by-side A|B frame with 8-aligned dimensions, plus the two Rois."""
    h, w = scene.shape
    width = 2 * w
    fw = -(-width // 8) * 8
    fh = -(-h // 8) * 8
    layout = FrameLayout(fw, fh, frames_per_file, bit_order)
    return layout, Roi(0, 0, w, h), Roi(w, 0, w, h)


def generate_dataset(
    scene: SceneSpec,
    layout: FrameLayout,
    directory,
    roi_a: Roi | None = None,
    roi_b: Roi | None = None,
    batch: int = 512,
):
    """Write the scene as ``frames_NNNNNN.bin`` files plus manifest and ground truth.

    Returns ``(DatasetManifest, GroundTruth)``.
    """
    h, w = scene.shape
    if roi_a is None or roi_b is None:
        _, da, db = default_layout(scene, layout.frames_per_file, layout.bit_order)
        roi_a, roi_b = roi_a or da, roi_b or db
    for roi in (roi_a, roi_b):
        if (roi.height, roi.width) != (h, w):
            raise RoiMismatch(f"roi {roi} does not match the {w}x{h} object mask")
        roi.check_inside(layout)
    layout.check_sensor()
    fpf = layout.frames_per_file
    if fpf < 1 or scene.frames % fpf:
        raise RoiMismatch(f"{scene.frames} frames do not fill whole files of {fpf}")
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    order = layout.numpy_bitorder
    level = binarization_level(scene)
    paths = []
    for f in range(scene.frames // fpf):
        path = directory / f"frames_{f:06d}.bin"
        try:
            with open(path, "wb") as fh:
                for s in range(0, fpf, batch):
                    n = min(batch, fpf - s)
                    a, b = generate_frames(scene, f * fpf + s, n, level)
                    full = np.zeros((n, layout.height_px, layout.width_px), dtype=np.uint8)
                    full[:, roi_a.y0 : roi_a.y0 + h, roi_a.x0 : roi_a.x0 + w] = a
                    full[:, roi_b.y0 : roi_b.y0 + h, roi_b.x0 : roi_b.x0 + w] = b
                    fh.write(np.packbits(full, axis=2, bitorder=order).tobytes())
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        paths.append(str(path))
    truth = GroundTruth(scene.true_alpha, scene.object_mask.copy(), scene.params())
    manifest = DatasetManifest(paths, layout, roi_a, roi_b, {"synthetic": scene.params()})
    manifest.to_json(directory / "manifest.json")
    truth.to_json(directory / "ground_truth.json")
    return manifest, truth
