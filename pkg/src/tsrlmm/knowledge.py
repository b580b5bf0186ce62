"""Prior knowledge: context, characteristic and differential descriptions.

Characteristic and differential descriptions live in a :class:`MemoryBank`
that is generated once per catalog and prompt version, then reused by every
recognition run. Context descriptions depend on the road image and are made
on demand.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RecognitionConfig
from .dataset import ClassRef, SimilarityGroups, TemplateCatalog
from .errors import AuthError, CoverageGap, LmmError, MissingFile, ParseFailure, SchemaViolation
from .extraction import SignRegion, load_rgb
from .lmm import Backend, ImagePart, LmmRequest, TextPart, cache_key
from .parsing import labeled_fields, resolve_names, split_candidates

log = logging.getLogger(__name__)

# prompt templates; PROMPT_VERSION is derived from them so any edit invalidates banks

CONTEXT_SYSTEM = "You are an expert in understanding road scenes and traffic signs."

CONTEXT_TEMPLATE = (
    "The image is a road scene ({width}x{height} pixels in the original) that contains a target traffic sign."
    "{coordinates}\n"
    "Describe the background and the surrounding objects of the target traffic sign: "
    "the kind of road, lanes and markings, vehicles, buildings and other signs nearby."
    "{hypothesis}\n"
    "Answer in labeled lines:\n"
    "Background: <description>"
    "{candidates_line}"
)
COORDINATES_SENTENCE = (
    " The center coordinates of the target traffic sign are {xy}, in pixels from the top-left corner"
    " of the original image (x to the right, y downward)."
)
HYPOTHESIS_SENTENCE = (
    "\nThen, from your preliminary understanding of the scene, filter out sign types that cannot fit"
    " and list up to {n} candidate sign types the target sign could be, choosing only from these names:"
    " {names}."
)
CANDIDATES_LINE = "\nCandidates: <name>; <name>; ..."

CHARACTERISTIC_SYSTEM = "You are an expert on traffic sign design."

CHARACTERISTIC_TEMPLATE = (
    "Describe the traffic sign in the image by exactly three key features: shape, color, and composition."
    " Do not mention anything else.\n\n"
    "Example 1 (a stop sign):\n"
    "Shape: regular octagon\n"
    "Color: red background with a thin white border; white lettering\n"
    'Composition: the word "STOP" in white capital letters across the center\n\n'
    "Example 2 (a speed limit sign):\n"
    "Shape: circle\n"
    "Color: white background inside a thick red ring; black numerals\n"
    'Composition: the number "50" in bold black digits at the center, no other symbols\n\n'
    'Now describe the sign in the image. Its official name is "{name}".\n'
    "Answer with three labeled lines:\n"
    "Shape: <shape>\n"
    "Color: <colors>\n"
    "Composition: <symbols, text and layout>"
)
CHARACTERISTIC_REMINDER = (
    "\n\nYour previous answer could not be read. Reply with exactly three lines that start with"
    ' "Shape:", "Color:" and "Composition:".'
)

DIFFERENTIAL_SYSTEM = CHARACTERISTIC_SYSTEM

DIFFERENTIAL_TEMPLATE = (
    "The following two traffic signs are easily confused.\n\n"
    'Sign A, "{name_u}":\n{char_u}\n\n'
    'Sign B, "{name_v}":\n{char_v}\n\n'
    "Explain the visual differences that tell sign A apart from sign B in shape, color and composition.\n"
    "Answer in one labeled line:\n"
    "Differences: <description>"
)

PROMPT_VERSION = hashlib.sha256(
    "\x00".join(
        [CONTEXT_TEMPLATE, COORDINATES_SENTENCE, HYPOTHESIS_SENTENCE, CHARACTERISTIC_TEMPLATE, DIFFERENTIAL_TEMPLATE]
    ).encode()
).hexdigest()[:12]

CHAR_FACETS = ("Shape", "Color", "Composition")


@dataclass(frozen=True)
class ContextDescription:
    image_id: str
    region: SignRegion
    background_text: str
    hypothesis: tuple[ClassRef, ...] = ()
    raw_text: str = ""
    prompt_digest: str = ""


@dataclass(frozen=True)
class CharacteristicDescription:
    class_id: str
    shape: str
    color: str
    composition: str
    raw_text: str

    def __post_init__(self) -> None:
        for facet in ("shape", "color", "composition"):
            if not getattr(self, facet).strip():
                raise ParseFailure(f"{self.class_id}: empty {facet} facet")

    def summary(self) -> str:
        return f"Shape: {self.shape}; Color: {self.color}; Composition: {self.composition}"


def pair_key(u: str, v: str) -> tuple[str, str]:
    if u == v:
        raise ValueError(f"a differential pair needs two different classes, got {u!r} twice")
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class DifferentialDescription:
    pair: tuple[str, str]
    text: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "pair", pair_key(*self.pair))


@dataclass
class Provenance:
    backend_id: str = ""
    model: str = ""
    created_at: str = ""
    prompt_version: str = PROMPT_VERSION
    config_fingerprint: str = ""


@dataclass
class MemoryBank:
    characteristics: dict[str, CharacteristicDescription] = field(default_factory=dict)
    differentials: dict[tuple[str, str], DifferentialDescription] = field(default_factory=dict)
    provenance: Provenance = field(default_factory=Provenance)
    # set when loaded with a different prompt version; entries must be regenerated
    stale: bool = False

    def missing(self, catalog: TemplateCatalog, groups: SimilarityGroups) -> tuple[list[str], list[tuple[str, str]]]:
        classes = [c for c in catalog.ids if c not in self.characteristics]
        pairs = [p for p in groups.pairs() if p not in self.differentials]
        return classes, pairs

    def check_coverage(self, catalog: TemplateCatalog, groups: SimilarityGroups | None = None, need_differentials: bool = True) -> None:
        classes, pairs = self.missing(catalog, groups or SimilarityGroups())
        if not need_differentials:
            pairs = []
        if classes or pairs:
            raise CoverageGap(classes, pairs)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "provenance": vars(self.provenance).copy(),
            "characteristics": [
                {
                    "class_id": c.class_id,
                    "shape": c.shape,
                    "color": c.color,
                    "composition": c.composition,
                    "raw_text": c.raw_text,
                }
                for _, c in sorted(self.characteristics.items())
            ],
            "differentials": [
                {"pair": list(d.pair), "text": d.text} for _, d in sorted(self.differentials.items())
            ],
        }

    def __eq__(self, other: object) -> bool:
        return isinstance(other, MemoryBank) and self.to_dict() == other.to_dict()


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(bank.to_dict(), indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_bank(
    path: str | Path,
    catalog: TemplateCatalog | None = None,
    groups: SimilarityGroups | None = None,
    prompt_version: str = PROMPT_VERSION,
    require_complete: bool = True,
) -> MemoryBank:
    """Read a bank file; with a catalog, also check it covers every class and pair.

    A prompt-version mismatch is not an error: the bank comes back with
    ``stale=True`` so the next build regenerates it.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"memory bank {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("version") != 1:
            raise SchemaViolation(f"{path}: bank version must be 1")
        prov = Provenance(**doc.get("provenance", {}))
        chars = {}
        for item in doc["characteristics"]:
            c = CharacteristicDescription(**item)
            chars[c.class_id] = c
        diffs = {}
        for item in doc["differentials"]:
            d = DifferentialDescription(tuple(item["pair"]), item["text"])
            diffs[d.pair] = d
    except (KeyError, TypeError, ValueError, ParseFailure) as e:
        if isinstance(e, SchemaViolation):
            raise
        raise SchemaViolation(f"{path}: malformed bank ({e})") from e
    bank = MemoryBank(chars, diffs, prov)
    if prov.prompt_version != prompt_version:
        log.warning(
            "bank %s was generated with prompt version %s, current is %s; it will be regenerated",
            path,
            prov.prompt_version,
            prompt_version,
        )
        bank.stale = True
    if catalog is not None and require_complete and not bank.stale:
        bank.check_coverage(catalog, groups)
    return bank


# context


def context_prompt(width: int, height: int, region: SignRegion, catalog: TemplateCatalog, cfg: RecognitionConfig) -> str:
    coords = ""
    if cfg.use_coordinates:
        coords = COORDINATES_SENTENCE.format(xy=f"({region.center[0]}, {region.center[1]})")
    hyp = cand = ""
    if cfg.use_hypothesis:
        names = "; ".join(c.display_name for c in catalog.classes)
        hyp = HYPOTHESIS_SENTENCE.format(n=cfg.max_hypothesis, names=names)
        cand = CANDIDATES_LINE
    return CONTEXT_TEMPLATE.format(width=width, height=height, coordinates=coords, hypothesis=hyp, candidates_line=cand)


def context_request(road: np.ndarray, region: SignRegion, catalog: TemplateCatalog, cfg: RecognitionConfig, road_max_side: int | None = 768) -> LmmRequest:
    h, w = road.shape[:2]
    return LmmRequest(
        (ImagePart.from_array(road, road_max_side), TextPart(context_prompt(w, h, region, catalog, cfg))),
        system_prompt=CONTEXT_SYSTEM,
        temperature=cfg.temperature,
        max_output_tokens=cfg.max_output_tokens,
        stage="context",
    )


def parse_context(text: str, catalog: TemplateCatalog, cfg: RecognitionConfig) -> tuple[str, tuple[ClassRef, ...]]:
    fields_ = labeled_fields(text, ("Background", "Candidates"))
    background = fields_.get("Background", "").strip()
    if not background:
        log.warning("context answer has no 'Background:' line; keeping the whole text")
        background = "\n".join(
            ln for ln in text.strip().splitlines() if not ln.strip().lower().startswith("candidates")
        ).strip()
    if not cfg.use_hypothesis:
        return background, ()
    if "Candidates" not in fields_:
        log.warning("context answer has no 'Candidates:' line; hypothesis left empty")
        return background, ()
    hyp, unmatched = resolve_names(split_candidates(fields_["Candidates"]), catalog.classes, cfg.max_hypothesis)
    if unmatched:
        log.warning("dropping hypothesis candidates not in the catalog: %s", unmatched)
    return background, tuple(hyp)


def gen_context(
    image_id: str,
    road: np.ndarray,
    region: SignRegion,
    catalog: TemplateCatalog,
    cfg: RecognitionConfig,
    backend: Backend,
    use_cache: bool = True,
) -> ContextDescription:
    req = context_request(road, region, catalog, cfg, backend.cfg.road_max_side)
    resp = backend.complete(req, use_cache=use_cache)
    background, hyp = parse_context(resp.text, catalog, cfg)
    return ContextDescription(image_id, region, background, hyp, resp.text, cache_key(req, backend.cfg.model))


# characteristic


def characteristic_request(template: np.ndarray, cls: ClassRef, strict: bool = False) -> LmmRequest:
    text = CHARACTERISTIC_TEMPLATE.format(name=cls.display_name)
    if strict:
        text += CHARACTERISTIC_REMINDER
    return LmmRequest(
        (ImagePart.from_array(template), TextPart(text)),
        system_prompt=CHARACTERISTIC_SYSTEM,
        stage="characteristic",
    )


def parse_characteristic(class_id: str, text: str) -> CharacteristicDescription:
    f = labeled_fields(text, CHAR_FACETS)
    missing = [k for k in CHAR_FACETS if not f.get(k)]
    if missing:
        raise ParseFailure(f"{class_id}: answer lacks {', '.join(missing)}")
    return CharacteristicDescription(class_id, f["Shape"], f["Color"], f["Composition"], text)


def gen_characteristic(template: np.ndarray, cls: ClassRef, backend: Backend, bank: MemoryBank | None = None) -> CharacteristicDescription:
    """Describe one template sign; reuses the bank entry when one exists."""
    if bank is not None and not bank.stale and cls.class_id in bank.characteristics:
        return bank.characteristics[cls.class_id]
    resp = backend.complete(characteristic_request(template, cls))
    try:
        return parse_characteristic(cls.class_id, resp.text)
    except ParseFailure:
        log.warning("%s: unreadable characteristic answer, retrying with a format reminder", cls.class_id)
    resp = backend.complete(characteristic_request(template, cls, strict=True))
    return parse_characteristic(cls.class_id, resp.text)


# differential


def differential_request(char_u: CharacteristicDescription, char_v: CharacteristicDescription, catalog: TemplateCatalog | None = None) -> LmmRequest:
    if char_u.class_id > char_v.class_id:
        char_u, char_v = char_v, char_u
    pair_key(char_u.class_id, char_v.class_id)

    def name(c: CharacteristicDescription) -> str:
        return catalog.get(c.class_id).display_name if catalog is not None else c.class_id

    text = DIFFERENTIAL_TEMPLATE.format(
        name_u=name(char_u), char_u=char_u.raw_text.strip(), name_v=name(char_v), char_v=char_v.raw_text.strip()
    )
    return LmmRequest((TextPart(text),), system_prompt=DIFFERENTIAL_SYSTEM, stage="differential")


def gen_differential(
    char_u: CharacteristicDescription,
    char_v: CharacteristicDescription,
    backend: Backend,
    catalog: TemplateCatalog | None = None,
) -> DifferentialDescription:
    """Contrast two classes from their characteristic texts alone (no images)."""
    resp = backend.complete(differential_request(char_u, char_v, catalog))
    text = labeled_fields(resp.text, ("Differences",)).get("Differences") or resp.text.strip()
    return DifferentialDescription((char_u.class_id, char_v.class_id), text)


# bank construction


def plan_bank(catalog: TemplateCatalog, groups: SimilarityGroups, bank: MemoryBank | None) -> tuple[list[str], list[tuple[str, str]]]:
    """Classes and pairs a build would still have to generate."""
    if bank is None or bank.stale:
        return catalog.ids, groups.pairs()
    return bank.missing(catalog, groups)


def build_bank(
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
    backend: Backend,
    bank: MemoryBank | None = None,
    path: str | Path | None = None,
    jobs: int = 1,
    load_template: Callable[[Path], np.ndarray] = load_rgb,
) -> MemoryBank:
    """Fill in every missing characteristic and differential, persisting as it goes.

    Existing entries are kept, so an interrupted build resumes where it stopped.
    Pairs outside the current groups are pruned. Raises :class:`CoverageGap`
    (chained to the first failure) if anything is still missing at the end.
    """
    if bank is None and path is not None and Path(path).is_file():
        bank = load_bank(path, require_complete=False)
    if bank is None or bank.stale:
        bank = MemoryBank()
    if not bank.provenance.created_at:
        bank.provenance = Provenance(
            backend.backend_id,
            backend.cfg.model,
            datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            PROMPT_VERSION,
        )
    wanted_pairs = set(groups.pairs())
    for p in [p for p in bank.differentials if p not in wanted_pairs]:
        log.info("pruning differential %s|%s, not in any similarity group", *p)
        del bank.differentials[p]

    lock = threading.Lock()
    failures: list[BaseException] = []

    def persist() -> None:
        if path is not None:
            save_bank(bank, path)

    def one_char(cls: ClassRef) -> None:
        desc = gen_characteristic(load_template(catalog.template_paths[cls.class_id]), cls, backend)
        with lock:
            bank.characteristics[cls.class_id] = desc
            persist()

    def one_pair(p: tuple[str, str]) -> None:
        desc = gen_differential(bank.characteristics[p[0]], bank.characteristics[p[1]], backend, catalog)
        with lock:
            bank.differentials[p] = desc
            persist()

    todo_classes, _ = bank.missing(catalog, groups)
    _run_all(one_char, [catalog.get(c) for c in todo_classes], jobs, failures)
    _, todo_pairs = bank.missing(catalog, groups)
    ready = [p for p in todo_pairs if p[0] in bank.characteristics and p[1] in bank.characteristics]
    _run_all(one_pair, ready, jobs, failures)
    persist()

    classes, pairs = bank.missing(catalog, groups)
    if classes or pairs:
        err = CoverageGap(classes, pairs)
        raise err from (failures[0] if failures else None)
    return bank


def _run_all(fn, items, jobs: int, failures: list[BaseException]) -> None:
    if jobs <= 1:
        for it in items:
            try:
                fn(it)
            except AuthError:
                raise
            except (LmmError, ParseFailure, MissingFile, OSError) as e:
                log.error("bank entry %s failed: %s", it, e)
                failures.append(e)
        return
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = {pool.submit(fn, it): it for it in items}
        for fut in as_completed(futures):
            e = fut.exception()
            if e is None:
                continue
            if isinstance(e, AuthError) or not isinstance(e, (LmmError, ParseFailure, MissingFile, OSError)):
                raise e
            log.error("bank entry %s failed: %s", futures[fut], e)
            failures.append(e)
