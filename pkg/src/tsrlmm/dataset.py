"""Dataset manifests, template catalogs and similarity groups.

All three are small JSON documents carrying ``"version": 1``. Relative paths
inside them are resolved against the directory of the file that names them.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import (
    DuplicateClassId,
    MissingFile,
    MissingTemplateImage,
    SchemaViolation,
    SingletonGroup,
    UnresolvedClass,
)
from .extraction import SignRegion

FORMAT_VERSION = 1
CLASS_ID_RE = re.compile(r"^[a-z0-9_-]+$")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm")


@dataclass(frozen=True, order=True)
class ClassRef:
    class_id: str
    display_name: str
    country: str = ""

    def __post_init__(self) -> None:
        if not CLASS_ID_RE.match(self.class_id):
            raise SchemaViolation(f"class_id {self.class_id!r} must match [a-z0-9_-]+")
        if not self.display_name.strip():
            raise SchemaViolation(f"class {self.class_id!r} has an empty display_name")


@dataclass(frozen=True)
class TemplateCatalog:
    """Template signs of one country, ordered by ``class_id``."""

    classes: tuple[ClassRef, ...]
    template_paths: dict[str, Path]

    def __post_init__(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateClassId(f"duplicate class ids: {', '.join(dupes)}")
        if len(ids) < 2:
            raise SchemaViolation("a catalog needs at least two classes")
        if ids != sorted(ids):
            object.__setattr__(self, "classes", tuple(sorted(self.classes)))
        missing = [i for i in ids if i not in self.template_paths]
        if missing:
            raise MissingTemplateImage(f"no template image for {', '.join(missing)}")

    def __len__(self) -> int:
        return len(self.classes)

    def __contains__(self, class_id: object) -> bool:
        return any(c.class_id == class_id for c in self.classes)

    @property
    def ids(self) -> list[str]:
        return [c.class_id for c in self.classes]

    def get(self, class_id: str) -> ClassRef:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise UnresolvedClass(f"class {class_id!r} is not in the catalog")


@dataclass(frozen=True)
class SimilarityGroups:
    groups: tuple[tuple[str, ...], ...] = ()

    def pairs(self) -> list[tuple[str, str]]:
        """Every unordered co-member pair, sorted, without duplicates."""
        out = set()
        for g in self.groups:
            for i, u in enumerate(g):
                for v in g[i + 1 :]:
                    out.add((u, v) if u < v else (v, u))
        return sorted(out)

    def co_members(self, class_id: str) -> set[str]:
        out: set[str] = set()
        for g in self.groups:
            if class_id in g:
                out.update(g)
        out.discard(class_id)
        return out


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    ground_truth_class: ClassRef
    road_image_path: Path | None = None
    mask_image_path: Path | None = None
    precropped_sign_path: Path | None = None
    region_hint: SignRegion | None = None

    @property
    def has_road_image(self) -> bool:
        return self.road_image_path is not None


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: str


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    entries: tuple[ManifestEntry, ...]
    mask_colors: dict[str, tuple[int, int, int]] | None = None

    @property
    def has_road_images(self) -> bool:
        return bool(self.entries) and all(e.has_road_image for e in self.entries)

    def ground_truth(self) -> list[GroundTruth]:
        return [GroundTruth(e.image_id, e.ground_truth_class.class_id) for e in self.entries]

    def subset(self, image_ids: Iterable[str]) -> DatasetManifest:
        keep = set(image_ids)
        return DatasetManifest(
            self.dataset_id,
            tuple(e for e in self.entries if e.image_id in keep),
            self.mask_colors,
        )


def _read_json(path: Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"{path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path}: top level must be an object")
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaViolation(f"{path}: expected version {FORMAT_VERSION}, got {doc.get('version')!r}")
    return doc


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p).resolve()


def _rel(base: Path, p: Path | None) -> str | None:
    if p is None:
        return None
    return Path(os.path.relpath(p, base)).as_posix()


def load_template_catalog(path: str | Path) -> TemplateCatalog:
    path = Path(path)
    doc = _read_json(path)
    base = path.parent.resolve()
    raw = doc.get("classes")
    if not isinstance(raw, list):
        raise SchemaViolation(f"{path}: 'classes' must be a list")
    country = doc.get("country", "")
    classes, templates = [], {}
    seen: set[str] = set()
    for i, item in enumerate(raw):
        try:
            ref = ClassRef(item["class_id"], item["display_name"], item.get("country", country))
            tpl = item["template"]
        except (KeyError, TypeError) as e:
            raise SchemaViolation(f"{path}: class entry {i} is malformed ({e})") from e
        if ref.class_id in seen:
            raise DuplicateClassId(f"{path}: duplicate class id {ref.class_id!r}")
        seen.add(ref.class_id)
        tpl_path = _resolve(base, tpl)
        if not tpl_path.is_file():
            raise MissingTemplateImage(f"{path}: template for {ref.class_id!r} not found at {tpl_path}")
        classes.append(ref)
        templates[ref.class_id] = tpl_path
    return TemplateCatalog(tuple(sorted(classes)), templates)


def save_template_catalog(catalog: TemplateCatalog, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    doc = {
        "version": FORMAT_VERSION,
        "classes": [
            {
                "class_id": c.class_id,
                "display_name": c.display_name,
                "country": c.country,
                "template": _rel(base, catalog.template_paths[c.class_id]),
            }
            for c in catalog.classes
        ],
    }
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_similarity_groups(path: str | Path, catalog: TemplateCatalog) -> SimilarityGroups:
    doc = _read_json(Path(path))
    raw = doc.get("groups", [])
    if not isinstance(raw, list):
        raise SchemaViolation(f"{path}: 'groups' must be a list")
    return make_groups(raw, catalog)


def make_groups(raw: Iterable[Iterable[str]], catalog: TemplateCatalog) -> SimilarityGroups:
    groups = []
    for g in raw:
        members = tuple(sorted(set(g)))
        for m in members:
            if m not in catalog:
                raise UnresolvedClass(f"similarity group member {m!r} is not in the catalog")
        if len(members) < 2:
            raise SingletonGroup(f"group {list(members)} has fewer than two distinct members")
        groups.append(members)
    return SimilarityGroups(tuple(groups))


def save_similarity_groups(groups: SimilarityGroups, path: str | Path) -> None:
    doc = {"version": FORMAT_VERSION, "groups": [list(g) for g in groups.groups]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _region_from_json(obj: Any, where: str) -> SignRegion:
    try:
        bbox = tuple(int(v) for v in obj["bbox"])
        if len(bbox) != 4:
            raise ValueError("bbox needs 4 values")
        return SignRegion.from_bbox(bbox, obj.get("area_px"))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaViolation(f"{where}: malformed region_hint ({e})") from e


def _parse_entry(item: Any, base: Path, catalog: TemplateCatalog, where: str) -> ManifestEntry:
    if not isinstance(item, dict) or "image_id" not in item or "class_id" not in item:
        raise SchemaViolation(f"{where}: entries need 'image_id' and 'class_id'")
    road = _resolve(base, item.get("road_image"))
    mask = _resolve(base, item.get("mask_image"))
    crop = _resolve(base, item.get("precropped_sign"))
    hint = _region_from_json(item["region_hint"], where) if item.get("region_hint") else None
    image_id = str(item["image_id"])
    if crop is not None and (road is not None or mask is not None):
        raise SchemaViolation(f"{where} ({image_id}): precropped_sign excludes road_image/mask_image")
    if crop is None:
        if road is None:
            raise SchemaViolation(f"{where} ({image_id}): needs road_image or precropped_sign")
        if mask is None and hint is None:
            raise SchemaViolation(f"{where} ({image_id}): road_image needs mask_image or region_hint")
    elif hint is not None:
        raise SchemaViolation(f"{where} ({image_id}): region_hint only applies to road images")
    if mask is not None and road is None:
        raise SchemaViolation(f"{where} ({image_id}): mask_image without road_image")
    try:
        cls = catalog.get(item["class_id"])
    except UnresolvedClass as e:
        raise UnresolvedClass(f"{where} ({image_id}): {e}") from None
    return ManifestEntry(image_id, cls, road, mask, crop, hint)


def load_manifest(path: str | Path, catalog: TemplateCatalog, check_files: bool = True) -> DatasetManifest:
    """Load and validate a manifest; ground-truth ids are resolved in ``catalog``."""
    path = Path(path)
    doc = _read_json(path)
    base = path.parent.resolve()
    raw = doc.get("entries")
    if not isinstance(raw, list):
        raise SchemaViolation(f"{path}: 'entries' must be a list")
    entries = []
    seen: set[str] = set()
    for i, item in enumerate(raw):
        entry = _parse_entry(item, base, catalog, f"{path} entry {i}")
        if entry.image_id in seen:
            raise SchemaViolation(f"{path} entry {i}: duplicate image_id {entry.image_id!r}")
        seen.add(entry.image_id)
        if check_files:
            for p in (entry.road_image_path, entry.mask_image_path, entry.precropped_sign_path):
                if p is not None and not p.is_file():
                    raise MissingFile(f"{path} entry {i} ({entry.image_id}): {p} does not exist")
        entries.append(entry)
    colors = doc.get("mask_colors")
    if colors is not None:
        colors = {k: tuple(int(c) for c in v) for k, v in colors.items()}
    return DatasetManifest(str(doc.get("dataset_id", path.stem)), tuple(entries), colors)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    entries = []
    for e in manifest.entries:
        item: dict[str, Any] = {"image_id": e.image_id, "class_id": e.ground_truth_class.class_id}
        for key, p in (
            ("road_image", e.road_image_path),
            ("mask_image", e.mask_image_path),
            ("precropped_sign", e.precropped_sign_path),
        ):
            if p is not None:
                item[key] = _rel(base, p)
        if e.region_hint is not None:
            item["region_hint"] = {"bbox": list(e.region_hint.bbox), "area_px": e.region_hint.area_px}
        entries.append(item)
    doc: dict[str, Any] = {"version": FORMAT_VERSION, "dataset_id": manifest.dataset_id}
    if manifest.mask_colors is not None:
        doc["mask_colors"] = {k: list(v) for k, v in sorted(manifest.mask_colors.items())}
    doc["entries"] = entries
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def manifest_from_crop_folder(root: str | Path, catalog: TemplateCatalog, dataset_id: str | None = None) -> DatasetManifest:
    """Build a manifest from a ``root/<class_id>/<image>`` folder of crops.

    Image ids are ``<class_id>.<file stem>``; unknown class folders raise
    :class:`UnresolvedClass`.
    """
    root = Path(root).resolve()
    entries = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        cls = catalog.get(class_dir.name)
        for img in sorted(class_dir.iterdir()):
            if img.suffix.lower() in IMAGE_SUFFIXES:
                entries.append(ManifestEntry(f"{cls.class_id}.{img.stem}", cls, precropped_sign_path=img))
    return DatasetManifest(dataset_id or root.name, tuple(entries))
