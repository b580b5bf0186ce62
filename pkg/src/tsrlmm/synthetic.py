"""Small generated datasets for offline end-to-end runs.

Everything is drawn with Pillow from a seed: template signs, road scenes with
colour-coded segmentation masks, the manifest/catalog/groups files, and a mock
script whose recognition rules echo each sample's ground-truth name.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import (
    ClassRef,
    DatasetManifest,
    ManifestEntry,
    TemplateCatalog,
    load_template_catalog,
    make_groups,
    save_manifest,
    save_similarity_groups,
    save_template_catalog,
)
from .extraction import DEFAULT_COLOR_MAP, ExtractionConfig, SIGN_LABEL, SignRegion
from .lmm import ImagePart, MockRule, MockScript

RED, WHITE, BLUE, YELLOW, BLACK = (200, 20, 30), (245, 245, 245), (20, 60, 180), (250, 200, 0), (15, 15, 15)
ROAD_COLOR = (128, 64, 128)


@dataclass(frozen=True)
class SignStyle:
    class_id: str
    name: str
    shape: str
    fill: tuple[int, int, int]
    border: tuple[int, int, int]
    glyph: str
    description: tuple[str, str, str]


STYLES = (
    SignStyle("keep_right", "Keep right", "circle", BLUE, BLUE, "arrow", ("circle", "blue", "white arrow pointing down-right")),
    SignStyle("no_entry", "No entry", "circle", RED, RED, "bar", ("circle", "red with a white bar", "one horizontal white bar")),
    SignStyle("no_parking", "No parking", "circle", BLUE, RED, "slash", ("circle", "blue inside a red ring", "one red diagonal slash")),
    SignStyle("pedestrian_crossing", "Pedestrian crossing", "triangle_up", WHITE, RED, "dot", ("upward triangle", "white inside a red border", "black walking figure")),
    SignStyle("priority_road", "Priority road", "diamond", YELLOW, WHITE, "", ("diamond", "yellow inside a white border", "plain yellow centre")),
    SignStyle("speed_30", "Speed limit (30km/h)", "circle", WHITE, RED, "30", ("circle", "white inside a red ring", 'black number "30"')),
    SignStyle("speed_50", "Speed limit (50km/h)", "circle", WHITE, RED, "50", ("circle", "white inside a red ring", 'black number "50"')),
    SignStyle("speed_80", "Speed limit (80km/h)", "circle", WHITE, RED, "80", ("circle", "white inside a red ring", 'black number "80"')),
    SignStyle("stop", "Stop", "octagon", RED, WHITE, "STOP", ("octagon", "red with a white border", 'white word "STOP"')),
    SignStyle("yield", "Yield", "triangle_down", WHITE, RED, "", ("downward triangle", "white inside a red border", "no symbol")),
)
GROUPS = (("speed_30", "speed_50", "speed_80"), ("no_entry", "stop"), ("no_parking", "keep_right"), ("pedestrian_crossing", "yield"))


def _polygon(shape: str, s: int) -> list[tuple[float, float]] | None:
    c = (s - 1) / 2
    r = s / 2 - 0.5
    if shape == "octagon":
        return [(c + r * math.cos(math.pi / 8 + k * math.pi / 4), c + r * math.sin(math.pi / 8 + k * math.pi / 4)) for k in range(8)]
    if shape == "diamond":
        return [(c, 0), (s - 1, c), (c, s - 1), (0, c)]
    if shape == "triangle_up":
        return [(c, 0), (s - 1, s - 1), (0, s - 1)]
    if shape == "triangle_down":
        return [(0, 0), (s - 1, 0), (c, s - 1)]
    return None


def draw_sign(style: SignStyle, size: int) -> Image.Image:
    """RGBA image of the sign; alpha marks sign pixels exactly (no antialiasing)."""
    im = Image.new("RGBA", (size, size), (0, 0, 0, 0))
    d = ImageDraw.Draw(im)
    bw = max(1, size // 10)
    poly = _polygon(style.shape, size)
    if poly is None:
        d.ellipse((0, 0, size - 1, size - 1), fill=style.border + (255,))
        d.ellipse((bw, bw, size - 1 - bw, size - 1 - bw), fill=style.fill + (255,))
    else:
        d.polygon(poly, fill=style.border + (255,))
        c = (size - 1) / 2
        inner = [(c + (x - c) * (1 - 2.6 * bw / size), c + (y - c) * (1 - 2.6 * bw / size)) for x, y in poly]
        d.polygon(inner, fill=style.fill + (255,))
    c = size // 2
    if style.glyph == "bar":
        d.rectangle((size // 5, c - size // 10, size - 1 - size // 5, c + size // 10), fill=WHITE + (255,))
    elif style.glyph == "slash":
        d.line((size // 4, size // 4, size - 1 - size // 4, size - 1 - size // 4), fill=RED + (255,), width=bw)
    elif style.glyph == "arrow":
        d.line((size // 3, size // 3, size - 1 - size // 3, size - 1 - size // 3), fill=WHITE + (255,), width=bw)
    elif style.glyph == "dot":
        d.ellipse((c - bw, c - bw + size // 8, c + bw, c + bw + size // 8), fill=BLACK + (255,))
    elif style.glyph:
        color = WHITE if style.fill == RED else BLACK
        d.text((c, c), style.glyph, fill=color + (255,), anchor="mm")
    # hard alpha so mask and pixels agree exactly
    a = np.asarray(im)[..., 3]
    arr = np.asarray(im).copy()
    arr[..., 3] = np.where(a > 0, 255, 0)
    return Image.fromarray(arr, "RGBA")


def _road_background(w: int, h: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    sky = np.linspace(170, 215, h // 2, dtype=np.float64)[:, None, None] * np.array([0.8, 0.9, 1.0])
    road = np.full((h - h // 2, 1, 3), 90.0)
    img = np.concatenate([np.broadcast_to(sky, (h // 2, w, 3)), np.broadcast_to(road, (h - h // 2, w, 3))], axis=0)
    img = np.clip(img + rng.normal(0, 6, img.shape), 0, 255).astype(np.uint8)
    mask = np.zeros((h, w, 3), dtype=np.uint8)
    mask[h // 2 :] = ROAD_COLOR
    return img, mask


def _paste(img: np.ndarray, mask: np.ndarray, sign: Image.Image, x: int, y: int, color) -> SignRegion:
    arr = np.asarray(sign)
    alpha = arr[..., 3] > 0
    s = arr.shape[0]
    img[y : y + s, x : x + s][alpha] = arr[..., :3][alpha]
    mask[y : y + s, x : x + s][alpha] = color
    ys, xs = np.nonzero(alpha)
    return SignRegion.from_bbox((x + xs.min(), y + ys.min(), x + xs.max(), y + ys.max()), int(alpha.sum()))


@dataclass
class SyntheticDataset:
    root: Path
    catalog_path: Path
    groups_path: Path
    manifest_path: Path
    mock_script_path: Path
    catalog: TemplateCatalog
    manifest: DatasetManifest


def make_synthetic_dataset(
    out_dir: str | Path,
    n_classes: int = 10,
    n_images: int = 20,
    seed: int = 0,
    precropped: bool = False,
    size: tuple[int, int] = (200, 150),
    extraction: ExtractionConfig | None = None,
    dataset_id: str | None = None,
) -> SyntheticDataset:
    """Write a synthetic dataset under ``out_dir`` and return its paths.

    Classes are taken in id order from :data:`STYLES`; samples cycle through
    them. Every third road image also holds a smaller distractor sign, and its
    entry carries a region hint for the target.
    """
    if not 2 <= n_classes <= len(STYLES):
        raise ValueError(f"n_classes must be within 2..{len(STYLES)}")
    root = Path(out_dir).resolve()
    for sub in ("templates", "images", "masks", "crops"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    styles = STYLES[:n_classes]
    rng = random.Random(seed)
    nrng = np.random.default_rng(seed)

    for st in styles:
        tpl = Image.new("RGB", (96, 96), WHITE)
        tpl.paste(draw_sign(st, 80), (8, 8), draw_sign(st, 80))
        tpl.save(root / "templates" / f"{st.class_id}.png")
    catalog_path = root / "catalog.json"
    refs = [ClassRef(st.class_id, st.name, "synthetic") for st in styles]
    save_template_catalog(
        TemplateCatalog(tuple(refs), {st.class_id: root / "templates" / f"{st.class_id}.png" for st in styles}),
        catalog_path,
    )
    catalog = load_template_catalog(catalog_path)
    ids = set(catalog.ids)
    groups = make_groups([[m for m in grp if m in ids] for grp in GROUPS if sum(m in ids for m in grp) >= 2], catalog)
    groups_path = root / "groups.json"
    save_similarity_groups(groups, groups_path)

    w, h = size
    sign_color = DEFAULT_COLOR_MAP[SIGN_LABEL]
    entries = []
    for i in range(n_images):
        st = styles[i % n_classes]
        image_id = f"syn{i:04d}"
        cls = catalog.get(st.class_id)
        if precropped:
            s = rng.randint(28, 48)
            crop = np.full((s + 8, s + 8, 3), 40, dtype=np.uint8)
            crop = np.clip(crop + nrng.normal(0, 4, crop.shape), 0, 255).astype(np.uint8)
            sign = draw_sign(st, s)
            arr = np.asarray(sign)
            a = arr[..., 3] > 0
            crop[4 : 4 + s, 4 : 4 + s][a] = arr[..., :3][a]
            path = root / "crops" / f"{image_id}.png"
            Image.fromarray(crop).save(path)
            entries.append(ManifestEntry(image_id, cls, precropped_sign_path=path))
            continue
        img, mask = _road_background(w, h, nrng)
        s = rng.randint(30, 44)
        x = rng.randint(4, w // 2 - s - 4)
        y = rng.randint(4, h // 2 - s // 2)
        target = _paste(img, mask, draw_sign(st, s), x, y, sign_color)
        hint = None
        if i % 3 == 2:
            other = styles[(i + 3) % n_classes]
            ds = rng.randint(14, 20)
            _paste(img, mask, draw_sign(other, ds), rng.randint(w // 2 + 10, w - ds - 4), rng.randint(4, h // 2 - ds), sign_color)
            hint = target
        # sensor noise over everything, so no two crops are pixel-identical
        img = np.clip(img.astype(np.int16) + nrng.integers(-3, 4, img.shape), 0, 255).astype(np.uint8)
        ip, mp = root / "images" / f"{image_id}.png", root / "masks" / f"{image_id}.png"
        Image.fromarray(img).save(ip)
        Image.fromarray(mask).save(mp)
        entries.append(ManifestEntry(image_id, cls, ip, mp, region_hint=hint))

    manifest = DatasetManifest(dataset_id or ("synthetic-crops" if precropped else "synthetic-road"), tuple(entries))
    manifest_path = root / "manifest.json"
    save_manifest(manifest, manifest_path)

    script = echo_script(manifest, catalog, groups, extraction)
    script_path = root / "mock_script.json"
    script.save(script_path)
    return SyntheticDataset(root, catalog_path, groups_path, manifest_path, script_path, catalog, manifest)


def echo_script(manifest: DatasetManifest, catalog: TemplateCatalog, groups, extraction: ExtractionConfig | None = None, road_max_side: int = 768) -> MockScript:
    """Mock rules that answer every sample with its true class first.

    Recognition rules key on the digest of the crop the pipeline will send,
    context rules on the digest of the (downscaled) road image, and
    characteristic rules on the class name quoted in the prompt.
    """
    from .evaluation import prepare_entry

    styles = {s.class_id: s for s in STYLES}
    rules = []
    for e in manifest.entries:
        p = prepare_entry(e, extraction, manifest.mask_colors)
        truth = e.ground_truth_class
        others = [catalog.get(c) for c in sorted(groups.co_members(truth.class_id))]
        others += [c for c in catalog.classes if c != truth and c not in others]
        answer = "\n".join(f"{n}. {c.display_name}" for n, c in enumerate([truth, *others[:4]], start=1))
        rules.append(MockRule(answer, stage="recognize", image_digest=ImagePart.from_array(p.crop.pixels).digest))
        if p.road is not None:
            cand = "; ".join(c.display_name for c in [truth, *others[:1]])
            rules.append(
                MockRule(
                    f"Background: a synthetic street under a pale sky, the sign stands beside the road.\nCandidates: {cand}",
                    stage="context",
                    image_digest=ImagePart.from_array(p.road, road_max_side).digest,
                )
            )
    for c in catalog.classes:
        st = styles.get(c.class_id)
        if st is None:
            continue
        shape, color, comp = st.description
        rules.append(
            MockRule(f"Shape: {shape}\nColor: {color}\nComposition: {comp}", stage="characteristic", contains=f'"{c.display_name}"')
        )
    return MockScript(rules)
