"""Multistep recognition: one model call that sees the crop plus every enabled description."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import RecognitionConfig
from .dataset import ClassRef, SimilarityGroups, TemplateCatalog
from .errors import ConfigViolation, CoverageGap
from .extraction import SignCrop
from .knowledge import ContextDescription, MemoryBank, gen_context
from .lmm import Backend, ImagePart, LmmRequest, TextPart, cache_key, text_digest
from .parsing import parse_ranked_answer

log = logging.getLogger(__name__)

RECOGNITION_SYSTEM = "You are an expert in fine-grained traffic sign recognition."

PRELIMINARY_STEP = (
    "Step 1: Look carefully at the traffic sign in the image and form a preliminary understanding"
    " of it from your existing knowledge."
)
CONTEXT_BLOCK = (
    "Refer to the context description of the road scene around the target traffic sign to understand"
    " where it stands.\nContext: {background}"
)
HYPOTHESIS_LINE = (
    "\nPrior hypothesis: the target sign is probably one of: {names}. Use this to narrow the range of"
    " answers; it is a hint, not a hard constraint."
)
CHARACTERISTIC_BLOCK = (
    "Refer to the characteristic descriptions below (shape, color and composition of each candidate"
    " sign class) and compare the target sign with each of them.\n{lines}"
)
DIFFERENTIAL_BLOCK = (
    "Refer to the differential descriptions below, which point out how similar traffic signs differ,"
    " to refine your judgement.\n{lines}"
)
NO_PAIRS = "(no similar sign pairs apply to these candidates)"
FINAL_INSTRUCTION = (
    "Identify the target traffic sign in the image. Choose only from these sign names: {names}.\n"
    "List the {k} most likely sign names, most likely first, as an enumerated list with one name per line:\n"
    "1. <sign name>\n2. <sign name>"
)
FINAL_PREFIX = "Finally, taking every step above into account: "


@dataclass(frozen=True)
class PromptBlock:
    stage: str
    text: str


@dataclass(frozen=True)
class MultistepPrompt:
    system_prompt: str
    image: ImagePart
    preamble: str | None
    blocks: tuple[PromptBlock, ...]
    final: str

    def text_parts(self) -> list[str]:
        """Rendered text segments; step numbers are added here so block contents stay order-free."""
        out = []
        if self.preamble:
            out.append(self.preamble)
        for n, b in enumerate(self.blocks, start=2):
            out.append(f"Step {n}: {b.text}")
        out.append(self.final)
        return out

    def request(self, cfg: RecognitionConfig) -> LmmRequest:
        parts = (self.image, *(TextPart(t) for t in self.text_parts()))
        return LmmRequest(
            parts,
            system_prompt=self.system_prompt,
            temperature=cfg.temperature,
            max_output_tokens=cfg.max_output_tokens,
            stage="recognize",
        )


@dataclass(frozen=True)
class TranscriptEntry:
    stage: str
    prompt_digest: str
    response_digest: str


@dataclass
class RecognitionResult:
    image_id: str
    ranked: list[ClassRef]
    raw_answer: str = ""
    transcript: list[TranscriptEntry] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    context: ContextDescription | None = None

    @property
    def ranked_ids(self) -> list[str]:
        return [c.class_id for c in self.ranked]

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "ranked": self.ranked_ids,
            "error": self.error,
            "timings_ms": {k: round(v, 3) for k, v in sorted(self.timings.items())},
            "transcript": [[t.stage, t.prompt_digest, t.response_digest] for t in self.transcript],
        }


def thinking_scope(
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
    cont: ContextDescription | None,
    cfg: RecognitionConfig,
) -> list[ClassRef]:
    """Classes whose descriptions enter the prompt.

    A non-empty hypothesis narrows the scope to its classes plus their
    similarity-group co-members; otherwise the whole catalog is used, capped
    at ``prompt_class_cap`` classes in id order.
    """
    if cfg.use_hypothesis and cont is not None and cont.hypothesis:
        ids = set()
        for c in cont.hypothesis:
            ids.add(c.class_id)
            ids |= groups.co_members(c.class_id)
        scope = [c for c in catalog.classes if c.class_id in ids]
    else:
        scope = list(catalog.classes)
    if len(scope) > cfg.prompt_class_cap:
        log.warning("thinking scope has %d classes, truncating to %d", len(scope), cfg.prompt_class_cap)
        scope = scope[: cfg.prompt_class_cap]
    return scope


def assemble_multistep_prompt(
    crop: SignCrop,
    cont: ContextDescription | None,
    bank: MemoryBank | None,
    cfg: RecognitionConfig,
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
) -> MultistepPrompt:
    if cont is not None and not cfg.use_context:
        raise ConfigViolation("a context description was supplied but use_context is off")
    if cont is None and cfg.use_context:
        raise ConfigViolation("use_context is on but no context description was supplied")
    scope = thinking_scope(catalog, groups, cont, cfg)
    scope_ids = {c.class_id for c in scope}
    if (cfg.use_characteristic or cfg.use_differential) and bank is None:
        raise CoverageGap(catalog.ids if cfg.use_characteristic else ())

    blocks: dict[str, PromptBlock] = {}
    if cfg.use_context:
        text = CONTEXT_BLOCK.format(background=cont.background_text)
        if cfg.use_hypothesis and cont.hypothesis:
            text += HYPOTHESIS_LINE.format(names="; ".join(c.display_name for c in cont.hypothesis))
        blocks["context"] = PromptBlock("context", text)
    if cfg.use_characteristic:
        missing = [c.class_id for c in scope if c.class_id not in bank.characteristics]
        if missing:
            raise CoverageGap(missing)
        lines = "\n".join(f"- {c.display_name}: {bank.characteristics[c.class_id].summary()}" for c in scope)
        blocks["characteristic"] = PromptBlock("characteristic", CHARACTERISTIC_BLOCK.format(lines=lines))
    if cfg.use_differential:
        needed = [p for p in groups.pairs() if p[0] in scope_ids and p[1] in scope_ids]
        gap = [p for p in needed if p not in bank.differentials]
        if gap:
            raise CoverageGap((), gap)
        pairs = [p for p in sorted(bank.differentials) if p[0] in scope_ids and p[1] in scope_ids]
        lines = "\n".join(
            f"- {catalog.get(u).display_name} vs {catalog.get(v).display_name}: {bank.differentials[(u, v)].text}"
            for u, v in pairs
        )
        blocks["differential"] = PromptBlock("differential", DIFFERENTIAL_BLOCK.format(lines=lines or NO_PAIRS))

    final = FINAL_INSTRUCTION.format(names="; ".join(c.display_name for c in catalog.classes), k=cfg.k_max)
    multistep = bool(blocks)
    return MultistepPrompt(
        RECOGNITION_SYSTEM,
        ImagePart.from_array(crop.pixels),
        PRELIMINARY_STEP if multistep else None,
        tuple(blocks[s] for s in cfg.thinking_order),
        FINAL_PREFIX + final if multistep else final,
    )


class Recognizer:
    """Runs context generation (when enabled) and the final multistep call for single crops.

    Safe to share between worker threads: it only reads the bank and catalog,
    and the backend synchronizes itself.
    """

    def __init__(
        self,
        catalog: TemplateCatalog,
        groups: SimilarityGroups,
        bank: MemoryBank | None,
        cfg: RecognitionConfig,
        backend: Backend,
        clock: Callable[[], float] = time.perf_counter,
        use_cache: bool = True,
    ):
        self.catalog = catalog
        self.groups = groups
        self.bank = bank
        self.cfg = cfg
        self.backend = backend
        self.clock = clock
        self.use_cache = use_cache
        if bank is not None and (cfg.use_characteristic or cfg.use_differential):
            bank.check_coverage(catalog, groups, need_differentials=cfg.use_differential)
        elif cfg.use_characteristic or cfg.use_differential:
            raise CoverageGap(catalog.ids if cfg.use_characteristic else (), groups.pairs())

    def recognize(self, crop: SignCrop, road: np.ndarray | None = None, extraction_ms: float | None = None) -> RecognitionResult:
        cfg = self.cfg
        if cfg.use_context and road is None:
            raise ConfigViolation(f"{crop.image_id}: use_context needs the original road image")
        if road is not None and not cfg.use_context:
            raise ConfigViolation(f"{crop.image_id}: a road image was given but use_context is off")
        timings: dict[str, float] = {}
        if extraction_ms is not None:
            timings["extraction"] = extraction_ms
        transcript = []
        cont = None
        if cfg.use_context:
            t0 = self.clock()
            cont = gen_context(crop.image_id, road, crop.region, self.catalog, cfg, self.backend, self.use_cache)
            timings["context"] = (self.clock() - t0) * 1000.0
            transcript.append(TranscriptEntry("context", cont.prompt_digest, text_digest(cont.raw_text)))

        t0 = self.clock()
        prompt = assemble_multistep_prompt(crop, cont, self.bank, cfg, self.catalog, self.groups)
        req = prompt.request(cfg)
        resp = self.backend.complete(req, use_cache=self.use_cache)
        timings["multistep"] = (self.clock() - t0) * 1000.0
        transcript.append(TranscriptEntry("multistep", cache_key(req, self.backend.cfg.model), text_digest(resp.text)))

        ranked = parse_ranked_answer(resp.text, self.catalog.classes, cfg.k_max)
        error = None
        if not ranked:
            log.warning("%s: no catalog sign name found in the answer", crop.image_id)
            error = "EmptyAnswer"
        return RecognitionResult(crop.image_id, ranked, resp.text, transcript, timings, error, cont)


def recognize(
    crop: SignCrop,
    road: np.ndarray | None,
    bank: MemoryBank | None,
    cfg: RecognitionConfig,
    backend: Backend,
    catalog: TemplateCatalog,
    groups: SimilarityGroups | None = None,
) -> RecognitionResult:
    return Recognizer(catalog, groups or SimilarityGroups(), bank, cfg, backend).recognize(crop, road)
