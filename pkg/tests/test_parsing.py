from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from tsrlmm.dataset import ClassRef
from tsrlmm.parsing import (
    enumerated_items,
    labeled_fields,
    match_name,
    normalize,
    parse_ranked_answer,
    resolve_names,
    split_candidates,
)

CLASSES = [
    ClassRef("speed_30", "Speed limit (30km/h)"),
    ClassRef("speed_50", "Speed limit (50km/h)"),
    ClassRef("stop", "Stop"),
    ClassRef("no_entry", "No entry"),
    ClassRef("no_entry_trucks", "No entry for trucks"),
    ClassRef("yield", "Yield"),
]
BY_ID = {c.class_id: c for c in CLASSES}


def test_normalize():
    assert normalize("Speed Limit (50km/h)") == "speed limit 50 km h"
    assert normalize("  STOP!! ") == "stop"
    assert normalize("") == ""


def test_match_name_exact_and_contained():
    assert match_name("stop", CLASSES) == BY_ID["stop"]
    assert match_name("speed limit 50 km/h", CLASSES) == BY_ID["speed_50"]
    assert match_name("It is a Stop sign.", CLASSES) == BY_ID["stop"]
    # the longest contained name wins over a shorter one
    assert match_name("No entry for trucks", CLASSES) == BY_ID["no_entry_trucks"]


def test_match_name_token_boundaries():
    assert match_name("speed limit 5", CLASSES) is None
    assert match_name("stopping", CLASSES) is None
    # ambiguous fragment of several names
    assert match_name("speed limit", CLASSES) is None
    assert match_name("trucks", CLASSES) == BY_ID["no_entry_trucks"]


@given(st.sampled_from(CLASSES))
def test_every_display_name_matches_itself(c):
    assert match_name(c.display_name, CLASSES) == c
    assert match_name(c.display_name.upper(), CLASSES) == c


def test_labeled_fields_lines_pipes_and_case():
    text = "**Shape**: octagon\ncolour: red | Composition: STOP\nShape: circle"
    f = labeled_fields(text, ["Shape", "Color", "Composition"])
    assert f == {"Shape": "octagon", "Color": "red", "Composition": "STOP"}
    assert labeled_fields("no labels here", ["Shape"]) == {}


def test_enumerated_items_ignore_digits_inside_names():
    text = "1. Speed limit 50 2. Speed limit 30 3. Stop"
    assert enumerated_items(text) == ["Speed limit 50", "Speed limit 30", "Stop"]
    assert enumerated_items("1) Stop\n2) Yield\nThat is all") == ["Stop", "Yield"]
    assert enumerated_items("no list") == []


def test_split_candidates():
    assert split_candidates("Stop; Yield") == ["Stop", "Yield"]
    assert split_candidates("Stop, Yield") == ["Stop", "Yield"]
    assert split_candidates("1. Stop 2. Yield") == ["Stop", "Yield"]


def test_resolve_names_dedupes_and_limits():
    matched, unmatched = resolve_names(["Stop", "stop", "Banana", "Yield", "No entry"], CLASSES, limit=2)
    assert matched == [BY_ID["stop"], BY_ID["yield"]]
    assert unmatched == ["Banana"]


def test_parse_ranked_answer_enumerated():
    text = "Reasoning first.\n1. Speed limit (50km/h)\n2. Speed limit (30km/h)\n3. Stop\n4. Stop\n5. Unknown"
    got = parse_ranked_answer(text, CLASSES, 5)
    assert [c.class_id for c in got] == ["speed_50", "speed_30", "stop"]
    assert [c.class_id for c in parse_ranked_answer(text, CLASSES, 1)] == ["speed_50"]


def test_parse_ranked_answer_bullets_and_single_name():
    assert [c.class_id for c in parse_ranked_answer("- Yield\n- Stop", CLASSES, 5)] == ["yield", "stop"]
    assert parse_ranked_answer("The sign is a Stop sign.", CLASSES, 5) == [BY_ID["stop"]]
    assert parse_ranked_answer("Either Stop or Yield.", CLASSES, 5) == []
    assert parse_ranked_answer("", CLASSES, 5) == []


@settings(max_examples=100)
@given(st.lists(st.sampled_from(CLASSES), min_size=1, max_size=8), st.integers(1, 6), st.booleans())
def test_ranked_answer_roundtrip(order, k, inline):
    sep = " " if inline else "\n"
    text = sep.join(f"{i}. {c.display_name}" for i, c in enumerate(order, start=1))
    got = parse_ranked_answer(text, CLASSES, k)
    want = list(dict.fromkeys(order))[:k]
    assert got == want
    assert len(got) <= k
