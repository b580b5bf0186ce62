"""Sign extraction from a road image and its colour-coded segmentation image.

Coordinates follow image convention: origin top-left, ``x`` to the right,
``y`` downward. Arrays are indexed ``[y, x]``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatch, RegionOutOfBounds, UnknownLabel

log = logging.getLogger(__name__)

SIGN_LABEL = "traffic_sign"
# Cityscapes palette colour for traffic signs
DEFAULT_COLOR_MAP: dict[str, tuple[int, int, int]] = {SIGN_LABEL: (220, 220, 0)}

# clockwise neighbourhood starting east, as (dy, dx); y grows downward
_NEIGHBOURS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


@dataclass(frozen=True)
class ExtractionConfig:
    label: str = SIGN_LABEL
    color_map: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_COLOR_MAP))
    tolerance: int = 0
    min_area: int = 64
    padding: int = 4
    fill: tuple[int, int, int] = (0, 0, 0)
    fill_holes: bool = True


@dataclass(frozen=True)
class MaskImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    class_color_map: dict[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_COLOR_MAP))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class Contour:
    """Outer border of one 8-connected component, as ``(x, y)`` pixels in tracing order."""

    points: tuple[tuple[int, int], ...]

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return min(xs), min(ys), max(xs), max(ys)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SignRegion:
    bbox: tuple[int, int, int, int]  # x_min, y_min, x_max, y_max, inclusive
    center: tuple[int, int]
    area_px: int

    @classmethod
    def from_bbox(cls, bbox, area_px: int | None = None) -> SignRegion:
        x0, y0, x1, y1 = (int(v) for v in bbox)
        if x1 < x0 or y1 < y0:
            raise ValueError(f"degenerate bbox {bbox}")
        if area_px is None:
            area_px = (x1 - x0 + 1) * (y1 - y0 + 1)
        return cls((x0, y0, x1, y1), (_half_up_mid(x0, x1), _half_up_mid(y0, y1)), int(area_px))

    @property
    def width(self) -> int:
        return self.bbox[2] - self.bbox[0] + 1

    @property
    def height(self) -> int:
        return self.bbox[3] - self.bbox[1] + 1

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "center": list(self.center), "area_px": self.area_px}


def _half_up_mid(a: int, b: int) -> int:
    # floor((a + b) / 2 + 0.5) without float rounding
    return (a + b + 1) // 2


@dataclass(frozen=True)
class SignCrop:
    pixels: np.ndarray  # (H, W, 3) uint8
    image_id: str
    region: SignRegion
    index: int = 0


@dataclass
class Extraction:
    """Everything produced for one road image."""

    image_id: str
    regions: list[SignRegion]
    composite: np.ndarray
    crops: list[SignCrop]
    contours: list[Contour] = field(repr=False, default_factory=list)


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")


def binarize_mask(mask: MaskImage, label: str = SIGN_LABEL, tolerance: int = 0) -> np.ndarray:
    """Boolean foreground map of pixels coloured ``label``.

    With ``tolerance`` 0 a pixel is foreground only on an exact colour match;
    otherwise every channel may differ by up to ``tolerance``.
    """
    if label not in mask.class_color_map:
        raise UnknownLabel(f"label {label!r} is not in the mask colour map {sorted(mask.class_color_map)}")
    color = np.asarray(mask.class_color_map[label], dtype=np.int16)
    px = mask.pixels[..., :3].astype(np.int16)
    if tolerance <= 0:
        return np.all(px == color, axis=-1)
    return np.all(np.abs(px - color) <= tolerance, axis=-1)


def _follow_border(f: list[int], width: int, start: int, from_pos: int, nbd: int, offsets: list[int]) -> list[int]:
    """Border following step of Suzuki & Abe (1985) on a padded, flattened image.

    ``f`` is mutated in place: traced pixels get ``nbd`` or ``-nbd`` when
    their east neighbour is background and was examined.
    """
    d0 = offsets.index(from_pos - start)
    first = -1
    for k in range(8):
        d = (d0 + k) & 7  # clockwise
        if f[start + offsets[d]] != 0:
            first = start + offsets[d]
            break
    if first < 0:
        f[start] = -nbd
        return [start]

    points = []
    prev, cur = first, start
    while True:
        d = offsets.index(prev - cur)
        east_zero = False
        nxt = -1
        for k in range(1, 9):
            dd = (d - k) & 7  # counter-clockwise
            q = cur + offsets[dd]
            if f[q] != 0:
                nxt = q
                break
            if dd == 0:
                east_zero = True
        if east_zero:
            f[cur] = -nbd
        elif f[cur] == 1:
            f[cur] = nbd
        points.append(cur)
        if nxt == start and cur == first:
            return points
        prev, cur = cur, nxt


def trace_contours(mask: np.ndarray) -> list[Contour]:
    """Outer borders of every 8-connected foreground component.

    Hole borders are traced (so their pixels are not mistaken for new outer
    borders) but not returned. Contours come out in raster order of their
    topmost-leftmost pixel, which is where the scan first meets them.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    if not mask.any():
        return []
    pw = w + 2
    padded = np.zeros((h + 2, pw), dtype=np.int8)
    padded[1:-1, 1:-1] = mask
    f = padded.ravel().astype(int).tolist()
    offsets = [dy * pw + dx for dy, dx in _NEIGHBOURS]

    # only pixels with a background west or east neighbour can start a border;
    # background pixels never change, so this set is fixed up front
    fg = padded.astype(bool)
    cand = fg & (~np.roll(fg, 1, axis=1) | ~np.roll(fg, -1, axis=1))
    starts = np.flatnonzero(cand.ravel()).tolist()

    contours = []
    nbd = 1
    for p in starts:
        v = f[p]
        if v == 1 and f[p - 1] == 0:
            nbd += 1
            pts = _follow_border(f, pw, p, p - 1, nbd, offsets)
            contours.append(Contour(tuple((q % pw - 1, q // pw - 1) for q in pts)))
        elif v >= 1 and f[p + 1] == 0:
            nbd += 1
            _follow_border(f, pw, p, p + 1, nbd, offsets)
    return contours


def contour_fill(contour: Contour) -> np.ndarray:
    """Boolean mask of the pixels enclosed by ``contour``, cropped to its bbox.

    The border is 8-connected, so it blocks every 4-connected background path;
    filling holes with the default cross structure is exact.
    """
    x0, y0, x1, y1 = contour.bbox
    grid = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
    pts = np.asarray(contour.points)
    grid[pts[:, 1] - y0, pts[:, 0] - x0] = True
    return ndimage.binary_fill_holes(grid)


def regions_from_contours(contours: list[Contour], min_area: int = 64) -> list[SignRegion]:
    """One region per contour whose enclosed pixel count reaches ``min_area``.

    ``area_px`` counts every pixel inside the outer border, holes included.
    """
    out = []
    for c in contours:
        area = int(contour_fill(c).sum())
        if area < min_area:
            continue
        out.append(SignRegion.from_bbox(c.bbox, area))
    return out


def compose_foreground(road: np.ndarray, mask: np.ndarray, fill=(0, 0, 0)) -> np.ndarray:
    if road.shape[:2] != mask.shape:
        raise DimensionMismatch(f"road image {road.shape[:2]} vs mask {mask.shape}")
    out = np.empty_like(road)
    out[...] = np.asarray(fill, dtype=road.dtype)
    out[mask] = road[mask]
    return out


def crop_sign(composite: np.ndarray, region: SignRegion, padding: int = 4, image_id: str = "", index: int = 0) -> SignCrop:
    h, w = composite.shape[:2]
    x0, y0, x1, y1 = region.bbox
    if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
        raise RegionOutOfBounds(f"bbox {region.bbox} outside image {w}x{h}")
    padding = max(0, int(padding))
    cx0, cy0 = max(0, x0 - padding), max(0, y0 - padding)
    cx1, cy1 = min(w - 1, x1 + padding), min(h - 1, y1 + padding)
    patch = composite[cy0 : cy1 + 1, cx0 : cx1 + 1].copy()
    return SignCrop(patch, image_id, region, index)


def extract_signs(image_id: str, road: np.ndarray, mask: MaskImage, cfg: ExtractionConfig | None = None) -> Extraction:
    """Regions, background-removed composite and padded crops for one road image."""
    cfg = cfg or ExtractionConfig()
    if road.shape[:2] != mask.shape:
        raise DimensionMismatch(f"{image_id}: road image {road.shape[:2]} vs mask {mask.shape}")
    binary = binarize_mask(mask, cfg.label, cfg.tolerance)
    contours = trace_contours(binary)
    kept_contours, regions = [], []
    for c in contours:
        filled = contour_fill(c)
        area = int(filled.sum())
        if area >= cfg.min_area:
            kept_contours.append((c, filled))
            regions.append(SignRegion.from_bbox(c.bbox, area))

    fg = np.zeros_like(binary)
    for c, filled in kept_contours:
        x0, y0, x1, y1 = c.bbox
        if cfg.fill_holes:
            fg[y0 : y1 + 1, x0 : x1 + 1] |= filled
        else:
            fg[y0 : y1 + 1, x0 : x1 + 1] |= filled & binary[y0 : y1 + 1, x0 : x1 + 1]
    composite = compose_foreground(road, fg, cfg.fill)
    crops = [crop_sign(composite, r, cfg.padding, image_id, i) for i, r in enumerate(regions)]
    return Extraction(image_id, regions, composite, crops, [c for c, _ in kept_contours])


def select_target(regions: list[SignRegion], hint: SignRegion | None = None) -> SignRegion | None:
    """Pick the region a manifest entry refers to.

    With a hint, the region overlapping it most wins (the hint itself if none
    overlaps); without one, the largest region, earliest in raster order on ties.
    """
    if hint is not None:
        best, best_overlap = None, 0
        hx0, hy0, hx1, hy1 = hint.bbox
        for r in regions:
            x0, y0, x1, y1 = r.bbox
            ow = min(x1, hx1) - max(x0, hx0) + 1
            oh = min(y1, hy1) - max(y0, hy0) + 1
            if ow > 0 and oh > 0 and ow * oh > best_overlap:
                best, best_overlap = r, ow * oh
        return best or hint
    if not regions:
        return None
    if len(regions) > 1:
        log.debug("%d candidate regions, using the largest", len(regions))
    return max(regions, key=lambda r: (r.area_px, -regions.index(r)))


def crop_name(image_id: str, index: int) -> str:
    return f"{image_id}_{index}.png"


def write_extraction(ex: Extraction, out_dir: str | Path, width: int, height: int) -> list[Path]:
    """Write crops as ``{image_id}_{index}.png`` plus a ``{image_id}.regions.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for crop in ex.crops:
        p = out_dir / crop_name(ex.image_id, crop.index)
        save_png(crop.pixels, p)
        written.append(p)
    sidecar = {
        "version": 1,
        "image_id": ex.image_id,
        "width": width,
        "height": height,
        "regions": [dict(index=i, **r.to_json()) for i, r in enumerate(ex.regions)],
    }
    (out_dir / f"{ex.image_id}.regions.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return written
