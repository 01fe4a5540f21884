"""Contrastive visual attention and attention-guided image refinement.

Pipeline: divide positive-prompt attention by negative-prompt attention,
fuse a layer range with increasing weights, keep the top-p fraction of
visual tokens, label 8-connected regions, keep the K strongest, then mask,
crop and resize the image to those regions.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from promptcd.distribution import InvalidInputError

DEFAULT_LAYERS = (20, 25)
DEFAULT_TOP_P = 0.3
DEFAULT_K = 1
DEFAULT_EPSILON = 1e-6

RAW_MAGIC = b"ATTN"
_RAW_HEADER = struct.Struct("<4sIII")

_EIGHT_NEIGHBOURS = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class AttentionStack:
    """Per-layer nonnegative attention over an ``height x width`` grid of visual tokens."""

    data: np.ndarray = field(repr=False)  # (layers, height, width)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or 0 in arr.shape:
            raise InvalidInputError(f"attention must be (layers, height, width), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or (arr < 0).any():
            raise InvalidInputError("attention entries must be finite and nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def layers(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    # -- file formats -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "height": self.height,
            "width": self.width,
            "data": self.data.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AttentionStack":
        try:
            l, h, w = int(doc["layers"]), int(doc["height"]), int(doc["width"])
            flat = np.asarray(doc["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed attention document: {exc}") from exc
        if flat.ndim != 1 or flat.size != l * h * w:
            raise InvalidInputError(f"attention data has {flat.size} values, expected {l}*{h}*{w}")
        return cls(flat.reshape(l, h, w))

    def to_raw(self) -> bytes:
        header = _RAW_HEADER.pack(RAW_MAGIC, self.layers, self.height, self.width)
        return header + self.data.astype("<f4").tobytes()

    @classmethod
    def from_raw(cls, blob: bytes) -> "AttentionStack":
        if len(blob) < _RAW_HEADER.size:
            raise InvalidInputError("raw attention file shorter than its header")
        magic, l, h, w = _RAW_HEADER.unpack_from(blob)
        if magic != RAW_MAGIC:
            raise InvalidInputError(f"bad magic {magic!r}")
        body = blob[_RAW_HEADER.size:]
        if len(body) != 4 * l * h * w:
            raise InvalidInputError(f"raw attention body has {len(body)} bytes, expected {4 * l * h * w}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(l, h, w))

    @classmethod
    def load(cls, path: str | Path) -> "AttentionStack":
        blob = Path(path).read_bytes()
        if blob[:4] == RAW_MAGIC:
            return cls.from_raw(blob)
        try:
            doc = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"{path}: neither raw ATTN nor JSON") from exc
        return cls.from_json(doc)

    def save(self, path: str | Path, raw: bool = False) -> None:
        if raw:
            Path(path).write_bytes(self.to_raw())
        else:
            Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")


@dataclass(frozen=True)
class FusionSpec:
    """Inclusive layer range and one weight per layer in it."""

    lo: int
    hi: int
    weights: tuple[float, ...]

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise InvalidInputError(f"bad layer range [{self.lo}, {self.hi}]")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size != self.hi - self.lo + 1:
            raise InvalidInputError("need exactly one weight per fused layer")
        if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInputError("fusion weights must be nonnegative and sum to 1")
        if (np.diff(w) < 0).any():
            raise InvalidInputError("fusion weights must be nondecreasing with depth")

    @classmethod
    def ramp(cls, lo: int = DEFAULT_LAYERS[0], hi: int = DEFAULT_LAYERS[1]) -> "FusionSpec":
        """Linear ramp ``w_l`` proportional to ``l - lo + 1``."""
        raw = np.arange(1, hi - lo + 2, dtype=np.float64)
        return cls(lo, hi, tuple(raw / raw.sum()))


@dataclass(frozen=True)
class Region:
    pixels: np.ndarray = field(repr=False)  # (n, 2) array of (row, col)
    box: tuple[int, int, int, int]  # x0, y0, x1, y1; half-open, grid coords
    score: float


@dataclass(frozen=True)
class RegionSet:
    mask: np.ndarray = field(repr=False)
    components: tuple[Region, ...]

    def __len__(self) -> int:
        return len(self.components)


@dataclass(frozen=True)
class RefineSpec:
    top_p: float = DEFAULT_TOP_P
    k_regions: int = DEFAULT_K
    epsilon: float = DEFAULT_EPSILON
    pad: int = 0
    target_w: int = 336
    target_h: int = 336
    threshold_mode: Literal["proportion", "value"] = "proportion"

    def __post_init__(self):
        if not 0 < self.top_p <= 1:
            raise InvalidInputError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.k_regions < 1:
            raise InvalidInputError("k_regions must be >= 1")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if self.pad < 0 or self.target_w < 1 or self.target_h < 1:
            raise InvalidInputError("pad must be >= 0 and target dims >= 1")
        if self.threshold_mode not in ("proportion", "value"):
            raise InvalidInputError(f"unknown threshold mode {self.threshold_mode!r}")


def contrast_attention(pos: AttentionStack, neg: AttentionStack, epsilon: float = DEFAULT_EPSILON) -> AttentionStack:
    if pos.data.shape != neg.data.shape:
        raise InvalidInputError(f"attention shapes differ: {pos.data.shape} vs {neg.data.shape}")
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    return AttentionStack(pos.data / (neg.data + epsilon))


def fuse_layers(a: AttentionStack, spec: FusionSpec) -> np.ndarray:
    if spec.hi >= a.layers:
        raise InvalidInputError(f"layer range [{spec.lo}, {spec.hi}] outside stack of {a.layers} layers")
    w = np.asarray(spec.weights)
    return np.tensordot(w, a.data[spec.lo : spec.hi + 1], axes=1)


def percentile_threshold(s: np.ndarray, top_p: float) -> tuple[float, np.ndarray]:
    """Smallest ``tau`` keeping at least ``ceil(top_p * N)`` cells; ties at ``tau`` are kept."""
    if not 0 < top_p <= 1:
        raise InvalidInputError(f"top_p must be in (0, 1], got {top_p}")
    s = np.asarray(s, dtype=np.float64)
    n = s.size
    # round before ceil so 0.3 * 100 counts as 30, not 31
    keep = min(n, max(1, math.ceil(round(top_p * n, 9))))
    tau = float(np.sort(s, axis=None)[n - keep])
    return tau, s >= tau


def value_threshold(s: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Alternative reading of the sweep parameter: keep cells with ``s / max(s) >= tau``."""
    s = np.asarray(s, dtype=np.float64)
    peak = s.max()
    norm = s / peak if peak > 0 else np.zeros_like(s)
    return float(tau * peak), norm >= tau


def connected_components(mask: np.ndarray, scores: np.ndarray | None = None) -> RegionSet:
    """8-connected regions, strongest cumulative score first (ties: raster order)."""
    mask = np.asarray(mask, dtype=bool)
    scores = np.ones(mask.shape) if scores is None else np.asarray(scores, dtype=np.float64)
    if scores.shape != mask.shape:
        raise InvalidInputError("scores and mask shapes differ")
    labels, count = ndimage.label(mask, structure=_EIGHT_NEIGHBOURS)
    regions = []
    # ndimage numbers labels in raster order of each component's first pixel
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows, cols = np.nonzero(labels[sl] == lab)
        rows = rows + sl[0].start
        cols = cols + sl[1].start
        regions.append(
            Region(
                pixels=np.stack([rows, cols], axis=1),
                box=(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop),
                score=float(scores[rows, cols].sum()),
            )
        )
    regions.sort(key=lambda r: -r.score)
    return RegionSet(mask=mask, components=tuple(regions))


def select_regions(rs: RegionSet, k: int) -> np.ndarray:
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    out = np.zeros(rs.mask.shape, dtype=bool)
    for region in rs.components[:k]:
        out[region.pixels[:, 0], region.pixels[:, 1]] = True
    return out


def _cell_edges(pixels: int, cells: int) -> np.ndarray:
    """Pixel start offsets of each grid cell plus the end; the last cell takes the remainder."""
    block = pixels // cells
    edges = np.arange(cells + 1) * block
    edges[-1] = pixels
    return edges


def upscale_mask(m: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = m.shape
    if width < w or height < h:
        raise InvalidInputError(f"image {width}x{height} smaller than token grid {w}x{h}")
    ys = np.repeat(np.arange(h), np.diff(_cell_edges(height, h)))
    xs = np.repeat(np.arange(w), np.diff(_cell_edges(width, w)))
    return m[np.ix_(ys, xs)]


def _resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    return np.asarray(Image.fromarray(img).resize((width, height), Image.BILINEAR))


def refine_image(img: np.ndarray, m_star: np.ndarray, spec: RefineSpec) -> tuple[np.ndarray, dict]:
    """Black out everything outside the regions, crop to their padded box, resize.

    Returns the refined image and a dict with ``crop_box`` (pixel x0, y0, x1,
    y1, half-open) and ``empty_mask``. An empty mask passes the whole image
    through, resized, with ``empty_mask`` set.
    """
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("image must be an (H, W, 3) RGB array")
    height, width = img.shape[:2]
    m_star = np.asarray(m_star, dtype=bool)
    if not m_star.any():
        return _resize(img, spec.target_w, spec.target_h), {
            "crop_box": [0, 0, width, height],
            "empty_mask": True,
        }
    pixel_mask = upscale_mask(m_star, width, height)
    masked = np.where(pixel_mask[..., None], img, 0).astype(np.uint8)
    rows = np.flatnonzero(pixel_mask.any(axis=1))
    cols = np.flatnonzero(pixel_mask.any(axis=0))
    x0 = max(0, cols[0] - spec.pad)
    y0 = max(0, rows[0] - spec.pad)
    x1 = min(width, cols[-1] + 1 + spec.pad)
    y1 = min(height, rows[-1] + 1 + spec.pad)
    crop = masked[y0:y1, x0:x1]
    return _resize(np.ascontiguousarray(crop), spec.target_w, spec.target_h), {
        "crop_box": [int(x0), int(y0), int(x1), int(y1)],
        "empty_mask": False,
    }


def carve(
    pos: AttentionStack,
    neg: AttentionStack,
    img: np.ndarray,
    fusion: FusionSpec | None = None,
    spec: RefineSpec = RefineSpec(),
) -> tuple[np.ndarray, dict]:
    """Full refinement pipeline; returns the refined image and diagnostics."""
    if fusion is None:
        fusion = FusionSpec.ramp()
    contrast = contrast_attention(pos, neg, spec.epsilon)
    fused = fuse_layers(contrast, fusion)
    if spec.threshold_mode == "proportion":
        tau, mask = percentile_threshold(fused, spec.top_p)
    else:
        tau, mask = value_threshold(fused, spec.top_p)
    regions = connected_components(mask, fused)
    m_star = select_regions(regions, spec.k_regions)
    refined, info = refine_image(img, m_star, spec)
    x0, y0, x1, y1 = info["crop_box"]
    diagnostics = {
        "tau": tau,
        "retained_frac": float(mask.mean()),
        "components": len(regions),
        "boxes": [list(r.box) for r in regions.components[: spec.k_regions]],
        "crop_box": info["crop_box"],
        "crop_area": int((x1 - x0) * (y1 - y0)),
        "empty_mask": info["empty_mask"],
        "top_p": spec.top_p,
    }
    return refined, diagnostics


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")
