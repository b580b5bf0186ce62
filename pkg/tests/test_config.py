from __future__ import annotations

import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsrlmm.config import STAGES, RecognitionConfig, config_from_dict, config_to_dict, load_config
from tsrlmm.errors import ConfigError


def test_default_order_follows_enabled_stages():
    assert RecognitionConfig().thinking_order == STAGES
    cfg = RecognitionConfig(use_context=False)
    assert cfg.thinking_order == ("characteristic", "differential")
    assert RecognitionConfig(use_context=False, use_characteristic=False, use_differential=False).thinking_order == ()


@given(st.permutations(STAGES))
def test_any_permutation_is_accepted(order):
    assert RecognitionConfig(thinking_order=tuple(order)).thinking_order == tuple(order)


@pytest.mark.parametrize(
    "kw",
    [
        {"thinking_order": ("context", "characteristic")},
        {"thinking_order": ("context", "context", "differential")},
        {"use_context": False, "thinking_order": STAGES},
        {"k_max": 0},
        {"temperature": 2.5},
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        RecognitionConfig(**kw)


def test_with_changes_rederives_order():
    cfg = RecognitionConfig(thinking_order=("differential", "characteristic", "context"))
    assert cfg.with_changes(use_context=False).thinking_order == ("characteristic", "differential")
    assert cfg.with_changes(k_max=3).thinking_order == ("differential", "characteristic", "context")


def test_fingerprint_distinguishes_every_switch():
    flags = ["use_context", "use_characteristic", "use_differential", "use_hypothesis", "use_coordinates"]
    prints = set()
    for combo in itertools.product([False, True], repeat=len(flags)):
        prints.add(RecognitionConfig(**dict(zip(flags, combo))).fingerprint())
    assert len(prints) == 2 ** len(flags)
    assert RecognitionConfig().fingerprint() == RecognitionConfig().fingerprint()


def test_load_yaml_with_overrides(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        "paths:\n  manifest: data/manifest.json\nrecognition:\n  use_context: false\n"
        "extraction:\n  color_map: {traffic_sign: [0, 220, 220]}\n"
    )
    cfg = load_config(path, ["recognition.k_max=3", "eval.trials=2", "backend.model=gpt-test"])
    assert cfg.recognition.k_max == 3 and not cfg.recognition.use_context
    assert cfg.eval.trials == 2
    assert cfg.backend.model == "gpt-test"
    assert cfg.extraction.color_map == {"traffic_sign": (0, 220, 220)}
    assert cfg.path("manifest") == tmp_path / "data" / "manifest.json"
    assert cfg.path("bank") is None
    again = config_from_dict(config_to_dict(cfg), tmp_path)
    assert again.recognition == cfg.recognition
    assert again.fingerprint() == cfg.fingerprint()


@pytest.mark.parametrize(
    "doc",
    [
        {"recognition": {"use_contxt": True}},
        {"surprise": {}},
        {"backend": {"kind": "carrier-pigeon"}},
        {"recognition": []},
    ],
)
def test_bad_config_dicts(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_bad_override_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["recognition.k_max"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.yaml")
