"""Command line entry point: ``tsrlmm {extract,build-bank,recognize,evaluate}``.

Exit codes: 0 success, 1 work failures, 2 configuration or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfigFile, load_config
from .dataset import SimilarityGroups, load_manifest, load_similarity_groups, load_template_catalog
from .errors import AuthError, ConfigError, CoverageGap, MissingFile, SchemaViolation, TsrError
from .evaluation import (
    BASELINE,
    GRID_COLUMNS,
    ablation_grid,
    baseline_config,
    build_grid,
    effective_config,
    prepare_manifest,
    run_trials,
    sample_subset,
    write_reports,
)
from .extraction import (
    Extraction,
    MaskImage,
    SignCrop,
    SignRegion,
    crop_sign,
    extract_signs,
    load_rgb,
    select_target,
    write_extraction,
)
from .knowledge import build_bank, load_bank, plan_bank, save_bank
from .lmm import make_backend
from .recognizer import Recognizer

log = logging.getLogger("tsrlmm")

EXIT_OK, EXIT_WORK, EXIT_CONFIG = 0, 1, 2
CONFIG_ERRORS = (ConfigError, SchemaViolation, MissingFile, CoverageGap, AuthError)


def _require(cfg: RunConfigFile, name: str) -> Path:
    p = cfg.path(name)
    if p is None:
        raise ConfigError(f"paths.{name} is not set")
    return p


def _load_inputs(cfg: RunConfigFile, need_manifest: bool = True):
    catalog = load_template_catalog(_require(cfg, "catalog"))
    groups_path = cfg.path("groups")
    groups = load_similarity_groups(groups_path, catalog) if groups_path else SimilarityGroups()
    manifest = load_manifest(_require(cfg, "manifest"), catalog) if need_manifest else None
    return catalog, groups, manifest


def _backend(cfg: RunConfigFile):
    if cfg.backend.cache_dir is None and cfg.path("cache") is not None:
        cfg.backend.cache_dir = str(cfg.path("cache"))
    if cfg.backend.mock_script and not Path(cfg.backend.mock_script).is_absolute():
        cfg.backend.mock_script = str(cfg.base_dir / cfg.backend.mock_script)
    return make_backend(cfg.backend)


def cmd_extract(cfg: RunConfigFile, args) -> int:
    catalog, _, manifest = _load_inputs(cfg)
    out_dir = Path(args.out) if args.out else Path(cfg.path("output")) / "crops"
    if args.dry_run:
        n = sum(1 for e in manifest.entries if e.road_image_path is not None)
        print(f"dry run: would extract {n} road images into {out_dir}; planned LMM calls: 0")
        return EXIT_OK
    colors = dict(manifest.mask_colors or cfg.extraction.color_map)
    failures, n_crops = [], 0
    for e in manifest.entries:
        try:
            if e.road_image_path is None:
                raise MissingFile(f"entry {e.image_id}: no road image or mask to extract from")
            road = load_rgb(e.road_image_path)
            h, w = road.shape[:2]
            if e.mask_image_path is not None:
                ex = extract_signs(e.image_id, road, MaskImage(load_rgb(e.mask_image_path), colors), cfg.extraction)
            else:
                region = e.region_hint
                ex = Extraction(e.image_id, [region], road, [crop_sign(road, region, cfg.extraction.padding, e.image_id)])
            n_crops += len(write_extraction(ex, out_dir, w, h))
        except (TsrError, OSError) as exc:
            failures.append(e.image_id)
            log.error("%s: %s", e.image_id, exc)
            if not args.keep_going:
                print(f"extraction failed at entry {e.image_id}: {exc}", file=sys.stderr)
                return EXIT_WORK
    summary = {
        "run_fingerprint": cfg.fingerprint(),
        "images": len(manifest.entries),
        "crops": n_crops,
        "failures": failures,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "extract_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"extracted {n_crops} crops from {len(manifest.entries) - len(failures)} images; {len(failures)} failed")
    return EXIT_WORK if failures else EXIT_OK


def cmd_build_bank(cfg: RunConfigFile, args) -> int:
    catalog, groups, _ = _load_inputs(cfg, need_manifest=False)
    bank_path = _require(cfg, "bank")
    bank = load_bank(bank_path, require_complete=False) if bank_path.is_file() else None
    classes, pairs = plan_bank(catalog, groups, bank)
    if args.dry_run:
        print(
            f"dry run: planned LMM calls: {len(classes) + len(pairs)} "
            f"({len(classes)} characteristic, {len(pairs)} differential)"
        )
        return EXIT_OK
    backend = _backend(cfg)
    bank = build_bank(catalog, groups, backend, bank, bank_path, jobs=args.jobs or cfg.eval.jobs)
    if bank.provenance.config_fingerprint != cfg.fingerprint():
        bank.provenance.config_fingerprint = cfg.fingerprint()
        save_bank(bank, bank_path)
    print(
        f"bank {bank_path}: {len(bank.characteristics)} characteristic, {len(bank.differentials)} differential; "
        f"{backend.calls} LMM calls this run"
    )
    return EXIT_OK


def cmd_recognize(cfg: RunConfigFile, args) -> int:
    catalog, groups, _ = _load_inputs(cfg, need_manifest=False)
    rcfg = cfg.recognition
    image = load_rgb(args.image)
    road = None
    if args.mask or args.bbox:
        road = image
        if args.mask:
            ex = extract_signs(args.image_id, road, MaskImage(load_rgb(args.mask), dict(cfg.extraction.color_map)), cfg.extraction)
            hint = SignRegion.from_bbox(_bbox(args.bbox)) if args.bbox else None
            region = select_target(ex.regions, hint)
            if region is None:
                print("no sign found in the mask", file=sys.stderr)
                return EXIT_WORK
            crop = crop_sign(ex.composite, region, cfg.extraction.padding, args.image_id)
        else:
            crop = crop_sign(road, SignRegion.from_bbox(_bbox(args.bbox)), cfg.extraction.padding, args.image_id)
    else:
        h, w = image.shape[:2]
        crop = SignCrop(image, args.image_id, SignRegion.from_bbox((0, 0, w - 1, h - 1)))
    rcfg = effective_config(rcfg, road is not None)
    if args.dry_run:
        print(f"dry run: planned LMM calls: {1 + int(rcfg.use_context)}")
        return EXIT_OK
    bank = None
    if rcfg.use_characteristic or rcfg.use_differential:
        bank = load_bank(_require(cfg, "bank"), catalog, groups)
    backend = _backend(cfg)
    res = Recognizer(catalog, groups, bank, rcfg, backend).recognize(crop, road if rcfg.use_context else None)
    print(f"image: {res.image_id}  (config {cfg.fingerprint()})")
    for i, c in enumerate(res.ranked, start=1):
        print(f"  {i}. {c.display_name} [{c.class_id}]")
    if res.error:
        print(f"  error: {res.error}")
    print("transcript:")
    for t in res.transcript:
        print(f"  {t.stage}: prompt {t.prompt_digest[:16]} -> response {t.response_digest}")
    print("timings (ms): " + ", ".join(f"{k}={v:.1f}" for k, v in res.timings.items()))
    if args.verbose:
        print("--- answer ---\n" + res.raw_answer)
    return EXIT_WORK if res.error else EXIT_OK


def _bbox(text: str) -> tuple[int, int, int, int]:
    vals = [int(v) for v in text.split(",")]
    if len(vals) != 4:
        raise ConfigError("--bbox needs x_min,y_min,x_max,y_max")
    return tuple(vals)


def cmd_evaluate(cfg: RunConfigFile, args) -> int:
    catalog, groups, manifest = _load_inputs(cfg)
    ev = cfg.eval
    trials = args.trials or ev.trials
    jobs = args.jobs or ev.jobs
    grid = args.grid or ev.grid
    manifest = sample_subset(manifest, ev.subset_size, ev.subset_seed)
    if grid:
        configs = build_grid(grid, cfg.recognition, manifest.has_road_images)
        if not any(not c.enabled_stages for _, c in configs):
            configs = [(BASELINE, baseline_config(cfg.recognition)), *configs]
    else:
        configs = [("config", cfg.recognition)]
    if args.dry_run:
        total = 0
        for _, c in configs:
            eff = effective_config(c, manifest.has_road_images)
            total += len(manifest.entries) * (1 + int(eff.use_context)) * trials
        print(f"dry run: {len(configs)} config(s) x {trials} trial(s) x {len(manifest.entries)} images; planned LMM calls: {total}")
        return EXIT_OK

    need_bank = any(c.use_characteristic or c.use_differential for _, c in configs)
    bank = None
    if need_bank:
        bank_path = cfg.path("bank")
        if bank_path is None or not bank_path.is_file():
            raise CoverageGap(catalog.ids, groups.pairs())
        bank = load_bank(bank_path, catalog, groups)
        if bank.stale:
            raise CoverageGap(catalog.ids, groups.pairs())
    backend = _backend(cfg)
    out_dir = Path(args.out) if args.out else Path(cfg.path("output"))
    results_path = out_dir / "results.jsonl"
    kw = dict(trials=trials, extraction=cfg.extraction, jobs=jobs, results_path=results_path, subset_seed=ev.subset_seed)
    if grid:
        reports = ablation_grid(manifest, catalog, groups, bank, configs, backend, **kw)
    else:
        prepared = prepare_manifest(manifest, cfg.extraction, jobs)
        reports = [run_trials(manifest, catalog, groups, bank, cfg.recognition, backend, config_name="config", prepared=prepared, **kw)]
    columns = GRID_COLUMNS.get(grid or "table3")
    write_reports(reports, out_dir, columns, cfg.fingerprint())
    print((out_dir / "report.md").read_text(encoding="utf-8"))
    problems = [f"{r.config_name}: {p}" for r in reports for p in r.check()]
    for p in problems:
        print(f"invariant violated: {p}", file=sys.stderr)
    failures = sum(sum(r.failures) for r in reports)
    if failures:
        print(f"{failures} per-image failure(s) recorded", file=sys.stderr)
    return EXIT_WORK if problems or failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="run config file (YAML or JSON)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--dry-run", action="store_true", help="print the planned LMM call count and exit")
    common.add_argument("--jobs", type=int, default=None, help="worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tsrlmm", description="Traffic sign recognition with large multimodal models.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="extract sign crops from road images and masks")
    s.add_argument("--out", help="output directory for crops and region sidecars")
    s.add_argument("--keep-going", action="store_true", help="continue past failing images")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("build-bank", parents=[common], help="build or resume the memory bank")
    s.set_defaults(func=cmd_build_bank)

    s = sub.add_parser("recognize", parents=[common], help="recognize one image and print the ranked answer")
    s.add_argument("--image", required=True, help="road image (with --mask/--bbox) or a sign crop")
    s.add_argument("--mask", help="segmentation image for the road image")
    s.add_argument("--bbox", help="target sign bbox x_min,y_min,x_max,y_max")
    s.add_argument("--image-id", default="image")
    s.set_defaults(func=cmd_recognize)

    s = sub.add_parser("evaluate", parents=[common], help="run trials or an ablation grid and write reports")
    s.add_argument("--grid", choices=["table3", "table4", "table5"])
    s.add_argument("--trials", type=int)
    s.add_argument("--out", help="output directory (default paths.output)")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, args.set)
        code = args.func(cfg, args)
    except CONFIG_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TsrError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_WORK
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
