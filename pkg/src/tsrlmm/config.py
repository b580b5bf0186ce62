"""Recognition switches and the run configuration file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .extraction import ExtractionConfig
from .lmm import BackendConfig

STAGES = ("context", "characteristic", "differential")


@dataclass(frozen=True)
class RecognitionConfig:
    """Ablation switches for one recognition run.

    ``thinking_order`` lists the enabled stages in prompt order; left as
    ``None`` it defaults to context, characteristic, differential.
    ``use_hypothesis`` and ``use_coordinates`` only shape the context stage.
    """

    use_context: bool = True
    use_characteristic: bool = True
    use_differential: bool = True
    use_hypothesis: bool = True
    use_coordinates: bool = True
    thinking_order: tuple[str, ...] | None = None
    k_max: int = 5
    max_hypothesis: int = 5
    prompt_class_cap: int = 64
    temperature: float = 0.0
    max_output_tokens: int = 512

    def __post_init__(self) -> None:
        enabled = self.enabled_stages
        if self.thinking_order is None:
            object.__setattr__(self, "thinking_order", enabled)
        else:
            order = tuple(self.thinking_order)
            object.__setattr__(self, "thinking_order", order)
            if sorted(order) != sorted(enabled) or len(set(order)) != len(order):
                raise ConfigError(f"thinking_order {list(order)} must be a permutation of the enabled stages {list(enabled)}")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.max_hypothesis < 1:
            raise ConfigError("max_hypothesis must be >= 1")
        if self.prompt_class_cap < 1:
            raise ConfigError("prompt_class_cap must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must be within [0, 2]")

    @property
    def enabled_stages(self) -> tuple[str, ...]:
        flags = (self.use_context, self.use_characteristic, self.use_differential)
        return tuple(s for s, on in zip(STAGES, flags) if on)

    def with_changes(self, **changes: Any) -> RecognitionConfig:
        """Like ``dataclasses.replace`` but re-derives the order when stages change."""
        stage_keys = {"use_context", "use_characteristic", "use_differential"}
        if stage_keys & changes.keys() and "thinking_order" not in changes:
            changes["thinking_order"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["thinking_order"] = list(self.thinking_order)
        return d

    def fingerprint(self, extra: dict[str, Any] | None = None) -> str:
        payload = {"recognition": self.to_dict(), **(extra or {})}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class PathsConfig:
    manifest: str | None = None
    catalog: str | None = None
    groups: str | None = None
    bank: str | None = None
    cache: str | None = None
    output: str = "runs"


@dataclass
class EvalConfig:
    trials: int = 5
    subset_size: int | None = None
    subset_seed: int = 0
    jobs: int = 1
    grid: str | None = None


@dataclass
class RunConfigFile:
    paths: PathsConfig = field(default_factory=PathsConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    base_dir: Path = field(default=Path("."), repr=False)

    def path(self, name: str) -> Path | None:
        v = getattr(self.paths, name)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def fingerprint(self) -> str:
        extra = {
            "backend": {"kind": self.backend.kind, "model": self.backend.model},
            "extraction": _plain(dataclasses.asdict(self.extraction)),
        }
        return self.recognition.fingerprint(extra)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "paths": PathsConfig,
    "backend": BackendConfig,
    "recognition": RecognitionConfig,
    "extraction": ExtractionConfig,
    "eval": EvalConfig,
}


def _build(cls, section: str, raw: Any):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kw = dict(raw)
    if cls is RecognitionConfig and kw.get("thinking_order") is not None:
        kw["thinking_order"] = tuple(kw["thinking_order"])
    if cls is ExtractionConfig:
        if "color_map" in kw:
            kw["color_map"] = {k: tuple(v) for k, v in kw["color_map"].items()}
        if "fill" in kw:
            kw["fill"] = tuple(kw["fill"])
    try:
        obj = cls(**kw)
    except TypeError as e:
        raise ConfigError(f"section {section!r}: {e}") from e
    if cls is BackendConfig:
        obj.validate()
    return obj


def config_from_dict(doc: dict[str, Any], base_dir: Path | str = ".") -> RunConfigFile:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"version"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    parts = {name: _build(cls, name, doc.get(name)) for name, cls in _SECTIONS.items()}
    return RunConfigFile(**parts, base_dir=Path(base_dir))


def config_to_dict(cfg: RunConfigFile) -> dict[str, Any]:
    out: dict[str, Any] = {"version": 1}
    for name in _SECTIONS:
        out[name] = _plain(dataclasses.asdict(getattr(cfg, name)))
    return out


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfigFile:
    """Read a YAML or JSON run config and apply ``section.key=value`` overrides.

    Override values are parsed as YAML scalars, so ``true``, ``3`` and
    ``[a, b]`` get their natural types.
    """
    doc: dict[str, Any] = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        base = path.parent
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, raw = item.partition("=")
        _set_dotted(doc, key.strip(), yaml.safe_load(raw))
    return config_from_dict(doc, base)
