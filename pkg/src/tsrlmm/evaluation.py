"""Top-k accuracy, multi-trial runs, ablation grids and their reports."""

from __future__ import annotations

import json
import logging
import random
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import RecognitionConfig
from .dataset import ClassRef, DatasetManifest, GroundTruth, ManifestEntry, SimilarityGroups, TemplateCatalog
from .errors import AlignmentError, AuthError, ConfigError, CoverageGap, TsrError
from .extraction import (
    DEFAULT_COLOR_MAP,
    ExtractionConfig,
    MaskImage,
    SignCrop,
    SignRegion,
    crop_sign,
    extract_signs,
    load_rgb,
    select_target,
)
from .knowledge import PROMPT_VERSION, MemoryBank
from .lmm import Backend
from .recognizer import RecognitionResult, Recognizer

log = logging.getLogger(__name__)

KS = (1, 3, 5)
FATAL = (AuthError, ConfigError, CoverageGap)


def _ranked_ids(result) -> list[str]:
    return [c.class_id if isinstance(c, ClassRef) else str(c) for c in (result.ranked or [])]


def topk_accuracy(results: Sequence, truth: Sequence[GroundTruth], k: int) -> float:
    """Fraction of samples whose true class is among the first ``k`` ranked answers.

    ``results`` and ``truth`` are matched by ``image_id`` and must cover the
    same ids. A result with an empty ranking counts as wrong.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_id = {}
    for r in results:
        if r.image_id in by_id:
            raise AlignmentError(f"duplicate result for {r.image_id!r}")
        by_id[r.image_id] = r
    truth_ids = [t.image_id for t in truth]
    if len(set(truth_ids)) != len(truth_ids):
        raise AlignmentError("duplicate image ids in ground truth")
    if set(truth_ids) != set(by_id):
        only_r = sorted(set(by_id) - set(truth_ids))[:5]
        only_t = sorted(set(truth_ids) - set(by_id))[:5]
        raise AlignmentError(f"id sets differ (results only: {only_r}, truth only: {only_t})")
    if not truth:
        raise AlignmentError("no samples")
    correct = sum(1 for t in truth if t.class_id in _ranked_ids(by_id[t.image_id])[:k])
    return correct / len(truth)


@dataclass
class PreparedSign:
    image_id: str
    crop: SignCrop | None
    road: np.ndarray | None
    extraction_ms: float | None = None
    error: str | None = None


def prepare_entry(
    entry: ManifestEntry,
    cfg: ExtractionConfig | None = None,
    mask_colors: dict | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> PreparedSign:
    """Load or extract the sign crop an entry refers to."""
    cfg = cfg or ExtractionConfig()
    if entry.precropped_sign_path is not None:
        pixels = load_rgb(entry.precropped_sign_path)
        h, w = pixels.shape[:2]
        region = SignRegion.from_bbox((0, 0, w - 1, h - 1))
        return PreparedSign(entry.image_id, SignCrop(pixels, entry.image_id, region), None)
    road = load_rgb(entry.road_image_path)
    t0 = clock()
    if entry.mask_image_path is not None:
        colors = mask_colors or cfg.color_map or DEFAULT_COLOR_MAP
        mask = MaskImage(load_rgb(entry.mask_image_path), dict(colors))
        ex = extract_signs(entry.image_id, road, mask, cfg)
        region = select_target(ex.regions, entry.region_hint)
        if region is None:
            raise TsrError(f"{entry.image_id}: no sign region found in the mask")
        crop = crop_sign(ex.composite, region, cfg.padding, entry.image_id)
    else:
        crop = crop_sign(road, entry.region_hint, cfg.padding, entry.image_id)
    return PreparedSign(entry.image_id, crop, road, (clock() - t0) * 1000.0)


def prepare_manifest(manifest: DatasetManifest, cfg: ExtractionConfig | None = None, jobs: int = 1, clock=time.perf_counter) -> list[PreparedSign]:
    def one(e: ManifestEntry) -> PreparedSign:
        try:
            return prepare_entry(e, cfg, manifest.mask_colors, clock)
        except (TsrError, OSError) as exc:
            log.error("%s: preparation failed: %s", e.image_id, exc)
            return PreparedSign(e.image_id, None, None, None, type(exc).__name__)

    if jobs <= 1:
        return [one(e) for e in manifest.entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, manifest.entries))


def sample_subset(manifest: DatasetManifest, size: int | None, seed: int = 0) -> DatasetManifest:
    """Seeded subset that keeps at least one sample of every class present.

    The chosen entries keep their manifest order. A ``size`` below the number
    of classes is raised to it.
    """
    if size is None or size >= len(manifest.entries):
        return manifest
    rng = random.Random(seed)
    by_class: dict[str, list[str]] = {}
    for e in manifest.entries:
        by_class.setdefault(e.ground_truth_class.class_id, []).append(e.image_id)
    if size < len(by_class):
        log.warning("subset size %d < %d classes present; keeping one per class", size, len(by_class))
    chosen = {rng.choice(ids) for _, ids in sorted(by_class.items())}
    rest = [e.image_id for e in manifest.entries if e.image_id not in chosen]
    rng.shuffle(rest)
    chosen.update(rest[: max(0, size - len(chosen))])
    return manifest.subset(chosen)


@dataclass
class EvalReport:
    dataset_id: str
    config_name: str
    fingerprint: str
    config: dict
    trials: list[dict[int, float]]
    mean: dict[int, float]
    n_samples: int
    latency_ms: dict[str, float]
    failures: list[int]
    context_requested: bool = False
    context_available: bool = True
    backend_id: str = ""
    prompt_version: str = PROMPT_VERSION
    subset_seed: int | None = None

    @property
    def context_missing(self) -> bool:
        return self.context_requested and not self.context_available

    def check(self) -> list[str]:
        """Invariant violations; empty when the report is consistent."""
        problems = []
        for i, row in enumerate(self.trials):
            vals = [row[k] for k in KS]
            if any(not 0.0 <= v <= 1.0 for v in vals):
                problems.append(f"trial {i}: Top-k outside [0, 1]")
            if vals != sorted(vals):
                problems.append(f"trial {i}: Top-k not monotone in k")
        for k in KS:
            if self.trials and abs(self.mean[k] - statistics.fmean(r[k] for r in self.trials)) > 1e-12:
                problems.append(f"mean Top-{k} is not the trial mean")
        return problems

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "config_name": self.config_name,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "backend_id": self.backend_id,
            "prompt_version": self.prompt_version,
            "n_samples": self.n_samples,
            "subset_seed": self.subset_seed,
            "context_requested": self.context_requested,
            "context_available": self.context_available,
            "trials": [{f"top{k}": row[k] for k in KS} for row in self.trials],
            "mean": {f"top{k}": self.mean[k] for k in KS},
            "failures": self.failures,
            "latency_ms": dict(sorted(self.latency_ms.items())),
        }


def effective_config(cfg: RecognitionConfig, has_road_images: bool) -> RecognitionConfig:
    """Drop the context stage for datasets without road images."""
    if cfg.use_context and not has_road_images:
        order = tuple(s for s in cfg.thinking_order if s != "context")
        return cfg.with_changes(use_context=False, thinking_order=order)
    return cfg


def _load_previous(results_path: Path | None, fingerprint: str) -> dict[tuple[int, str], dict]:
    done: dict[tuple[int, str], dict] = {}
    if results_path is None or not results_path.is_file():
        return done
    for line in results_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            continue
        if rec.get("fingerprint") == fingerprint:
            done[(rec["trial"], rec["image_id"])] = rec
    return done


def run_trials(
    manifest: DatasetManifest,
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
    bank: MemoryBank | None,
    cfg: RecognitionConfig,
    backend: Backend,
    trials: int = 5,
    extraction: ExtractionConfig | None = None,
    jobs: int = 1,
    results_path: str | Path | None = None,
    clock: Callable[[], float] = time.perf_counter,
    config_name: str = "",
    subset_seed: int | None = None,
    prepared: list[PreparedSign] | None = None,
) -> EvalReport:
    """Run the full pipeline ``trials`` times and average Top-1/3/5.

    Per-image failures are recorded and scored as wrong; authentication,
    configuration and coverage errors abort the run. With a ``results_path``
    every result is appended as one JSON line, and lines already present for
    the same config fingerprint are reused instead of recomputed.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if cfg.k_max < max(KS):
        log.warning("k_max=%d < %d: Top-%d is capped by the ranking length", cfg.k_max, max(KS), max(KS))
    eff = effective_config(cfg, manifest.has_road_images)
    if eff is not cfg:
        log.warning("%s has no road images; context descriptions are skipped", manifest.dataset_id)
    fingerprint = eff.fingerprint({"backend": backend.backend_id, "prompt_version": PROMPT_VERSION})
    use_cache = eff.temperature == 0
    if prepared is None:
        prepared = prepare_manifest(manifest, extraction, jobs, clock)
    recognizer = Recognizer(catalog, groups, bank, eff, backend, clock, use_cache)
    truth = manifest.ground_truth()

    results_path = Path(results_path) if results_path else None
    previous = _load_previous(results_path, fingerprint)
    out = None
    if results_path is not None:
        results_path.parent.mkdir(parents=True, exist_ok=True)
        out = results_path.open("a", encoding="utf-8")

    def one(p: PreparedSign) -> RecognitionResult:
        if p.crop is None:
            return RecognitionResult(p.image_id, [], error=p.error or "PreparationFailed")
        try:
            return recognizer.recognize(p.crop, p.road if eff.use_context else None, p.extraction_ms)
        except FATAL:
            raise
        except TsrError as e:
            log.error("%s: %s", p.image_id, e)
            return RecognitionResult(p.image_id, [], error=type(e).__name__)

    rows, failures = [], []
    latencies: dict[str, list[float]] = {}
    try:
        for t in range(trials):
            todo = [p for p in prepared if (t, p.image_id) not in previous]
            if jobs <= 1:
                fresh = [one(p) for p in todo]
            else:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    fresh = list(pool.map(one, todo))
            fresh_by_id = {r.image_id: r for r in fresh}
            results = []
            for p in prepared:
                if p.image_id in fresh_by_id:
                    r = fresh_by_id[p.image_id]
                    if out is not None:
                        rec = {"dataset_id": manifest.dataset_id, "fingerprint": fingerprint, "trial": t, **r.to_record()}
                        out.write(json.dumps(rec, sort_keys=True) + "\n")
                        out.flush()
                else:
                    rec = previous[(t, p.image_id)]
                    r = RecognitionResult(
                        rec["image_id"], [catalog.get(c) for c in rec["ranked"]], timings=rec.get("timings_ms", {}), error=rec.get("error")
                    )
                results.append(r)
                for stage, ms in r.timings.items():
                    latencies.setdefault(stage, []).append(ms)
            rows.append({k: topk_accuracy(results, truth, k) for k in KS})
            failures.append(sum(1 for r in results if r.error))
    finally:
        if out is not None:
            out.close()

    latency = {s: round(statistics.fmean(v), 3) for s, v in latencies.items()}
    if latency:
        latency["total"] = round(sum(latency.values()), 3)
    return EvalReport(
        dataset_id=manifest.dataset_id,
        config_name=config_name,
        fingerprint=fingerprint,
        config=eff.to_dict(),
        trials=rows,
        mean={k: statistics.fmean(r[k] for r in rows) for k in KS},
        n_samples=len(manifest.entries),
        latency_ms=latency,
        failures=failures,
        context_requested=cfg.use_context,
        context_available=manifest.has_road_images,
        backend_id=backend.backend_id,
        subset_seed=subset_seed,
    )


# ablation grids

BASELINE = "Baseline"


def baseline_config(base: RecognitionConfig) -> RecognitionConfig:
    return base.with_changes(use_context=False, use_characteristic=False, use_differential=False)


def stages_grid(base: RecognitionConfig) -> list[tuple[str, RecognitionConfig]]:
    """Rows of the thinking-strategy ablation: baseline, singles, pairs, all three."""
    rows = [
        ("Cont", (True, False, False)),
        ("Char", (False, True, False)),
        ("Diff", (False, False, True)),
        ("Cont+Diff", (True, False, True)),
        ("Cont+Char", (True, True, False)),
        ("Char+Diff", (False, True, True)),
        ("Cont+Char+Diff", (True, True, True)),
    ]
    out = [(BASELINE, baseline_config(base))]
    for name, (c, h, d) in rows:
        out.append((name, base.with_changes(use_context=c, use_characteristic=h, use_differential=d)))
    return out


def hypothesis_grid(base: RecognitionConfig) -> list[tuple[str, RecognitionConfig]]:
    """All four hypothesis/coordinate combinations with every stage on."""
    full = base.with_changes(use_context=True, use_characteristic=True, use_differential=True)
    out = []
    for hyp in (False, True):
        for coord in (False, True):
            name = f"hyp={'on' if hyp else 'off'},coord={'on' if coord else 'off'}"
            out.append((name, full.with_changes(use_hypothesis=hyp, use_coordinates=coord)))
    return out


def order_grid(base: RecognitionConfig, has_road_images: bool = True) -> list[tuple[str, RecognitionConfig]]:
    """Default thinking order against one swapped order.

    With road images the context and characteristic steps swap; without them
    the characteristic and differential steps do.
    """
    if has_road_images:
        full = base.with_changes(use_context=True, use_characteristic=True, use_differential=True)
        swapped = full.with_changes(thinking_order=("characteristic", "context", "differential"))
    else:
        full = base.with_changes(use_context=False, use_characteristic=True, use_differential=True)
        swapped = full.with_changes(thinking_order=("differential", "characteristic"))
    return [("w/o", full), ("w", swapped)]


GRIDS = {"table3": stages_grid, "table4": hypothesis_grid, "table5": order_grid}


def build_grid(name: str, base: RecognitionConfig, has_road_images: bool = True) -> list[tuple[str, RecognitionConfig]]:
    if name not in GRIDS:
        raise ConfigError(f"unknown grid {name!r}; choose from {', '.join(GRIDS)}")
    if name == "table5":
        return order_grid(base, has_road_images)
    return GRIDS[name](base)


def ablation_grid(
    manifest: DatasetManifest,
    catalog: TemplateCatalog,
    groups: SimilarityGroups,
    bank: MemoryBank | None,
    configs: Sequence[tuple[str, RecognitionConfig]],
    backend: Backend,
    **trial_kw,
) -> list[EvalReport]:
    """One report per config; a baseline row is prepended when missing."""
    seen: dict[RecognitionConfig, str] = {}
    for name, c in configs:
        if c in seen:
            raise ConfigError(f"config {name!r} duplicates {seen[c]!r}")
        seen[c] = name
    configs = list(configs)
    if not any(not c.enabled_stages for _, c in configs):
        configs.insert(0, (BASELINE, baseline_config(configs[0][1] if configs else RecognitionConfig())))
    if "prepared" not in trial_kw:
        trial_kw["prepared"] = prepare_manifest(
            manifest, trial_kw.get("extraction"), trial_kw.get("jobs", 1), trial_kw.get("clock", time.perf_counter)
        )
    results_path = trial_kw.pop("results_path", None)
    reports = []
    for name, c in configs:
        reports.append(
            run_trials(manifest, catalog, groups, bank, c, backend, config_name=name, results_path=results_path, **trial_kw)
        )
    return reports


# rendering

FLAG_COLUMNS: dict[str, Callable[[EvalReport], bool]] = {
    "Cont*": lambda r: r.context_requested,
    "Char*": lambda r: r.config["use_characteristic"],
    "Diff*": lambda r: r.config["use_differential"],
    "Prior hypothesis": lambda r: r.config["use_hypothesis"],
    "Center coordinates": lambda r: r.config["use_coordinates"],
    "Change Thinking": lambda r: tuple(r.config["thinking_order"])
    != RecognitionConfig(
        use_context=r.config["use_context"],
        use_characteristic=r.config["use_characteristic"],
        use_differential=r.config["use_differential"],
    ).thinking_order,
}
DEFAULT_COLUMNS = ("Cont*", "Char*", "Diff*")
GRID_COLUMNS = {
    "table3": DEFAULT_COLUMNS,
    "table4": ("Prior hypothesis", "Center coordinates"),
    "table5": ("Change Thinking",),
}


def render_table(reports_by_dataset: dict[str, list[EvalReport]], columns: Sequence[str] = DEFAULT_COLUMNS) -> str:
    """Markdown table: one row per config, Top-1/3/5 per dataset.

    Metric cells read ``-`` where context was asked for but the dataset has no
    road images.
    """
    datasets = list(reports_by_dataset)
    names: list[str] = []
    for reps in reports_by_dataset.values():
        for r in reps:
            if r.config_name not in names:
                names.append(r.config_name)
    head = ["Method", *columns] + [f"{d} Top-{k}" for d in datasets for k in KS]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join(["---"] * len(head)) + "|"]
    for name in names:
        first = next(r for reps in reports_by_dataset.values() for r in reps if r.config_name == name)
        cells = [name] + ["✓" if FLAG_COLUMNS[c](first) else "" for c in columns]
        for d in datasets:
            rep = next((r for r in reports_by_dataset[d] if r.config_name == name), None)
            for k in KS:
                if rep is None or (rep.context_missing and name != BASELINE):
                    cells.append("-")
                else:
                    cells.append(f"{rep.mean[k]:.2f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_timing(reports: Iterable[EvalReport], extractor: str = "mask contours") -> str:
    """Per-sign latency table: extraction method, model, stage means, total seconds."""
    lines = [
        "| Extraction | LMM | Config | extraction ms | context ms | multistep ms | Inference speed |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        lat = r.latency_ms
        cells = [
            extractor,
            r.backend_id,
            r.config_name or r.fingerprint,
            f"{lat.get('extraction', 0.0):.1f}",
            f"{lat.get('context', 0.0):.1f}",
            f"{lat.get('multistep', 0.0):.1f}",
            f"{lat.get('total', 0.0) / 1000.0:.2f}s",
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(reports: Sequence[EvalReport], out_dir: str | Path, columns: Sequence[str] = DEFAULT_COLUMNS, run_fingerprint: str = "") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"version": 1, "run_fingerprint": run_fingerprint, "reports": [r.to_dict() for r in reports]}
    jpath = out_dir / "report.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    by_ds: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_ds.setdefault(r.dataset_id, []).append(r)
    md = [f"<!-- run fingerprint {run_fingerprint} -->", "", "## Top-k accuracy", ""]
    md.append(render_table(by_ds, columns))
    md += ["", "n_samples: " + ", ".join(f"{d}={reps[0].n_samples}" for d, reps in by_ds.items()), ""]
    md += ["## Inference speed per sign", "", render_timing(reports)]
    mpath = out_dir / "report.md"
    mpath.write_text("\n".join(md), encoding="utf-8")
    return [jpath, mpath]
