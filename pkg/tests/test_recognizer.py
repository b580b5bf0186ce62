from __future__ import annotations

import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FakeClock
from tsrlmm.config import STAGES, RecognitionConfig
from tsrlmm.errors import ConfigViolation, CoverageGap
from tsrlmm.extraction import SignCrop, SignRegion
from tsrlmm.knowledge import ContextDescription, MemoryBank
from tsrlmm.lmm import BackendConfig, MockBackend, MockScript
from tsrlmm.recognizer import (
    CHARACTERISTIC_BLOCK,
    CONTEXT_BLOCK,
    DIFFERENTIAL_BLOCK,
    PRELIMINARY_STEP,
    Recognizer,
    assemble_multistep_prompt,
    recognize,
    thinking_scope,
)

CTX_HEAD = CONTEXT_BLOCK.split("{")[0][:40]
CHAR_HEAD = CHARACTERISTIC_BLOCK.split("{")[0][:40]
DIFF_HEAD = DIFFERENTIAL_BLOCK.split("{")[0][:40]
HEADS = {"context": CTX_HEAD, "characteristic": CHAR_HEAD, "differential": DIFF_HEAD}


def crop(seed=0) -> SignCrop:
    px = np.random.default_rng(seed).integers(0, 255, (20, 20, 3), dtype=np.uint8)
    return SignCrop(px, f"img{seed}", SignRegion.from_bbox((10, 10, 29, 29)))


def context(catalog, hypothesis=()) -> ContextDescription:
    return ContextDescription(
        "img0", SignRegion.from_bbox((10, 10, 29, 29)), "a rural road", tuple(hypothesis), "raw", "d" * 64
    )


def stage_configs():
    for flags in itertools.product([False, True], repeat=3):
        yield RecognitionConfig(use_context=flags[0], use_characteristic=flags[1], use_differential=flags[2])


@pytest.mark.parametrize("cfg", list(stage_configs()), ids=lambda c: "+".join(c.enabled_stages) or "baseline")
def test_disabled_stages_contribute_nothing(cfg, synthetic, synthetic_groups, synthetic_bank):
    cat = synthetic.catalog
    cont = context(cat) if cfg.use_context else None
    prompt = assemble_multistep_prompt(crop(), cont, synthetic_bank, cfg, cat, synthetic_groups)
    text = "\n".join(prompt.text_parts())
    for stage, head in HEADS.items():
        assert (head in text) == (stage in cfg.enabled_stages)
    assert ("a rural road" in text) == cfg.use_context
    shape_text = synthetic_bank.characteristics["stop"].shape
    assert (shape_text in text) == cfg.use_characteristic
    assert (PRELIMINARY_STEP in text) == bool(cfg.enabled_stages)
    assert ("Step 2:" in text) == bool(cfg.enabled_stages)
    # every catalog name is offered in the final instruction
    for c in cat.classes:
        assert c.display_name in prompt.final


def test_baseline_prompt_is_image_plus_instruction(synthetic, synthetic_groups):
    cfg = RecognitionConfig(use_context=False, use_characteristic=False, use_differential=False)
    prompt = assemble_multistep_prompt(crop(), None, None, cfg, synthetic.catalog, synthetic_groups)
    req = prompt.request(cfg)
    assert len(req.images) == 1
    assert prompt.text_parts() == [prompt.final]
    assert req.stage == "recognize"


@settings(max_examples=20, deadline=None)
@given(st.permutations(STAGES))
def test_order_changes_only_block_positions(synthetic, synthetic_groups, synthetic_bank, order):
    base = RecognitionConfig()
    swapped = base.with_changes(thinking_order=tuple(order))
    cont = context(synthetic.catalog)
    p1 = assemble_multistep_prompt(crop(), cont, synthetic_bank, base, synthetic.catalog, synthetic_groups)
    p2 = assemble_multistep_prompt(crop(), cont, synthetic_bank, swapped, synthetic.catalog, synthetic_groups)
    assert Counter(p1.blocks) == Counter(p2.blocks)
    assert [b.stage for b in p2.blocks] == list(order)
    parts = p2.text_parts()
    for n, stage in enumerate(order, start=2):
        assert parts[n - 1].startswith(f"Step {n}: ") and HEADS[stage] in parts[n - 1]


def test_hypothesis_narrows_scope(synthetic, synthetic_groups, synthetic_bank):
    cat = synthetic.catalog
    cfg = RecognitionConfig()
    cont = context(cat, [cat.get("speed_50")])
    scope = [c.class_id for c in thinking_scope(cat, synthetic_groups, cont, cfg)]
    assert scope == ["speed_30", "speed_50", "speed_80"]
    prompt = assemble_multistep_prompt(crop(), cont, synthetic_bank, cfg, cat, synthetic_groups)
    char_block = next(b for b in prompt.blocks if b.stage == "characteristic").text
    assert "Stop:" not in char_block and "Speed limit (80km/h):" in char_block
    diff_block = next(b for b in prompt.blocks if b.stage == "differential").text
    assert diff_block.count(" vs ") == 3
    assert "probably one of: Speed limit (50km/h)" in next(b for b in prompt.blocks if b.stage == "context").text

    no_hyp = cfg.with_changes(use_hypothesis=False)
    assert len(thinking_scope(cat, synthetic_groups, cont, no_hyp)) == len(cat)
    capped = cfg.with_changes(prompt_class_cap=4)
    assert len(thinking_scope(cat, synthetic_groups, context(cat), capped)) == 4


def test_context_mismatch_is_rejected(synthetic, synthetic_groups, synthetic_bank):
    cat = synthetic.catalog
    with pytest.raises(ConfigViolation):
        assemble_multistep_prompt(crop(), context(cat), synthetic_bank, RecognitionConfig(use_context=False), cat, synthetic_groups)
    with pytest.raises(ConfigViolation):
        assemble_multistep_prompt(crop(), None, synthetic_bank, RecognitionConfig(), cat, synthetic_groups)
    rec = Recognizer(cat, synthetic_groups, synthetic_bank, RecognitionConfig(), MockBackend())
    with pytest.raises(ConfigViolation):
        rec.recognize(crop())
    rec = Recognizer(cat, synthetic_groups, synthetic_bank, RecognitionConfig(use_context=False), MockBackend())
    with pytest.raises(ConfigViolation):
        rec.recognize(crop(), road=np.zeros((40, 40, 3), np.uint8))


def test_missing_bank_entries(synthetic, synthetic_groups, synthetic_bank):
    cat = synthetic.catalog
    with pytest.raises(CoverageGap):
        Recognizer(cat, synthetic_groups, None, RecognitionConfig(), MockBackend())
    partial = MemoryBank(dict(synthetic_bank.characteristics), {}, synthetic_bank.provenance)
    with pytest.raises(CoverageGap):
        Recognizer(cat, synthetic_groups, partial, RecognitionConfig(), MockBackend())
    # characteristics alone are enough when differentials are off
    Recognizer(cat, synthetic_groups, partial, RecognitionConfig(use_differential=False), MockBackend())


def test_end_to_end_on_synthetic(synthetic, synthetic_groups, synthetic_bank, synthetic_prepared):
    backend = MockBackend(BackendConfig(), MockScript.load(synthetic.mock_script_path))
    rec = Recognizer(synthetic.catalog, synthetic_groups, synthetic_bank, RecognitionConfig(), backend, FakeClock())
    for p, entry in zip(synthetic_prepared[:5], synthetic.manifest.entries):
        res = rec.recognize(p.crop, p.road)
        assert res.ranked_ids[0] == entry.ground_truth_class.class_id
        assert len(res.ranked) == 5
        assert [t.stage for t in res.transcript] == ["context", "multistep"]
        assert set(res.timings) == {"context", "multistep"}
        assert res.error is None
    assert backend.calls == 10


def test_empty_answer_is_recorded(synthetic, synthetic_groups):
    cfg = RecognitionConfig(use_context=False, use_characteristic=False, use_differential=False)
    backend = MockBackend(script=MockScript(defaults={"recognize": "I cannot tell."}))
    res = recognize(crop(), None, None, cfg, backend, synthetic.catalog, synthetic_groups)
    assert res.ranked == [] and res.error == "EmptyAnswer"
    assert res.to_record()["error"] == "EmptyAnswer"
