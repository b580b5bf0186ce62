"""Gating acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import itertools
import random
import re
import time
from collections import Counter
from dataclasses import dataclass

import httpx
import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, FakeClock, make_catalog
from oracles import bbox_of, brute_topk, flood_components, random_mask
from tsrlmm.config import RecognitionConfig
from tsrlmm.dataset import GroundTruth, load_similarity_groups, make_groups
from tsrlmm.evaluation import (
    KS,
    ablation_grid,
    build_grid,
    prepare_manifest,
    render_table,
    run_trials,
    topk_accuracy,
    write_reports,
)
from tsrlmm.extraction import SignRegion, crop_sign, regions_from_contours, trace_contours
from tsrlmm.knowledge import build_bank
from tsrlmm.lmm import BackendConfig, LmmRequest, MockBackend, MockScript, RateLimiter, RemoteBackend, TextPart
from tsrlmm.recognizer import CHARACTERISTIC_BLOCK, CONTEXT_BLOCK, DIFFERENTIAL_BLOCK, HYPOTHESIS_LINE
from tsrlmm.synthetic import make_synthetic_dataset


def verdict(capsys, n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


# prompt substrings that only a given stage can contribute
MARKERS = {
    "context": CONTEXT_BLOCK.split("{")[0][:40],
    "characteristic": CHARACTERISTIC_BLOCK.split("{")[0][:40],
    "differential": DIFFERENTIAL_BLOCK.split("{")[0][:40],
}
HYP_MARKER = HYPOTHESIS_LINE.strip().split("{")[0]


@dataclass
class Pipeline:
    ds: object
    groups: object
    bank: object
    prepared: list

    def backend(self) -> MockBackend:
        return MockBackend(BackendConfig(), MockScript.load(self.ds.mock_script_path))

    def run(self, cfg, backend=None, **kw):
        backend = backend or self.backend()
        kw.setdefault("trials", 1)
        rep = run_trials(
            self.ds.manifest, self.ds.catalog, self.groups, self.bank, cfg, backend,
            clock=FakeClock(), prepared=self.prepared, **kw,
        )
        return rep, backend


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory) -> Pipeline:
    ds = make_synthetic_dataset(tmp_path_factory.mktemp("acc"), n_classes=10, n_images=20, seed=7)
    groups = load_similarity_groups(ds.groups_path, ds.catalog)
    bank = build_bank(ds.catalog, groups, MockBackend(BackendConfig(), MockScript.load(ds.mock_script_path)))
    return Pipeline(ds, groups, bank, prepare_manifest(ds.manifest, clock=FakeClock()))


def recognize_texts(backend: MockBackend) -> list[str]:
    return [r.text for r in backend.requests if r.stage == "recognize"]


def test_criterion_1_extraction_oracle(capsys):
    rng = np.random.default_rng(20240601)
    masks = [random_mask(rng, 128) for _ in range(200)]
    t0 = time.perf_counter()
    ours = [[r.bbox for r in regions_from_contours(trace_contours(m), min_area=1)] for m in masks]
    elapsed = time.perf_counter() - t0
    mismatches = sum(o != [bbox_of(c) for c in flood_components(m)] for o, m in zip(ours, masks))
    n_regions = sum(map(len, ours))
    verdict(
        capsys, 1, "extraction matches flood-fill oracle",
        mismatches == 0 and elapsed < 10.0,
        f"200 masks, {n_regions} regions, {mismatches} mismatches, {elapsed:.2f}s",
    )


def test_criterion_2_geometry_fixtures(capsys):
    m = np.zeros((32, 32), dtype=bool)
    m[5:15, 5:15] = True
    (region,) = regions_from_contours(trace_contours(m), min_area=1)
    ok = region.bbox == (5, 5, 14, 14) and region.center == (10, 10)
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    rng = random.Random(3)
    corner_ok = True
    n = 0
    for _ in range(500):
        w = rng.randint(1, 6)
        x0 = rng.choice([0, 31 - w + 1])
        y0 = rng.choice([0, 31 - w + 1])
        crop = crop_sign(img, SignRegion.from_bbox((x0, y0, x0 + w - 1, y0 + w - 1)), rng.randint(0, 12))
        corner_ok &= crop.pixels.size > 0
        n += 1
    verdict(
        capsys, 2, "square fixture and corner crops",
        ok and corner_ok,
        f"bbox {region.bbox}, center {region.center}, {n} corner crops without error",
    )


def test_criterion_3_metric_oracle(capsys):
    rng = random.Random(99)
    classes = [f"c{i}" for i in range(8)]
    bad, nonmono = 0, 0

    @dataclass
    class Res:
        image_id: str
        ranked: list

    for _ in range(1000):
        n = rng.randint(1, 25)
        truth = [rng.choice(classes) for _ in range(n)]
        ranked = [rng.sample(classes, rng.randint(0, 7)) for _ in range(n)]
        gts = [GroundTruth(f"i{j}", t) for j, t in enumerate(truth)]
        results = [Res(f"i{j}", r) for j, r in enumerate(ranked)]
        vals = []
        for k in KS:
            got = topk_accuracy(results, gts, k)
            bad += got != brute_topk(ranked, truth, k)
            vals.append(got)
        nonmono += vals != sorted(vals)
    verdict(
        capsys, 3, "top-k equals brute-force recount",
        bad == 0 and nonmono == 0,
        f"1000 fixtures, {bad} mismatches, {nonmono} monotonicity violations",
    )


def test_criterion_4_pipeline_integrity(pipeline, tmp_path, capsys):
    blobs = []
    means = []
    for run_dir in ("a", "b"):
        # each run extracts from scratch, with its own fresh backend and clock
        rep = run_trials(
            pipeline.ds.manifest, pipeline.ds.catalog, pipeline.groups, pipeline.bank, RecognitionConfig(),
            pipeline.backend(), trials=2, clock=FakeClock(), config_name="all",
        )
        paths = write_reports([rep], tmp_path / run_dir, run_fingerprint="fixed")
        blobs.append([p.read_bytes() for p in paths])
        means.append(rep.mean)
    perfect = all(m == {1: 1.0, 3: 1.0, 5: 1.0} for m in means)
    identical = blobs[0] == blobs[1]
    verdict(
        capsys, 4, "end-to-end synthetic run is perfect and reproducible",
        perfect and identical and len(pipeline.ds.manifest.entries) == 20 and len(pipeline.ds.catalog) == 10,
        f"Top-1/3/5 = {means[0][1]:.2f}/{means[0][3]:.2f}/{means[0][5]:.2f}, reports byte-identical: {identical}",
    )


def test_criterion_5_ablation_plumbing(pipeline, capsys):
    configs = build_grid("table3", RecognitionConfig())
    reports = ablation_grid(
        pipeline.ds.manifest, pipeline.ds.catalog, pipeline.groups, pipeline.bank, configs,
        pipeline.backend(), trials=1, clock=FakeClock(), prepared=pipeline.prepared,
    )
    table = render_table({"synthetic": reports})
    rows = [ln for ln in table.splitlines()[2:] if ln.startswith("|")]
    leaks = []
    for name, cfg in configs:
        _, backend = pipeline.run(cfg)
        texts = recognize_texts(backend)
        n_context = sum(r.stage == "context" for r in backend.requests)
        if (n_context > 0) != cfg.use_context:
            leaks.append(f"{name}: {n_context} context calls")
        for stage, marker in MARKERS.items():
            present = [marker in t for t in texts]
            if stage in cfg.enabled_stages and not all(present):
                leaks.append(f"{name}: {stage} block missing")
            if stage not in cfg.enabled_stages and any(present):
                leaks.append(f"{name}: disabled {stage} block present")
        char_text = pipeline.bank.characteristics["stop"].shape
        if not cfg.use_characteristic and any(char_text in t for t in texts):
            leaks.append(f"{name}: characteristic text leaked")
    verdict(
        capsys, 5, "stage ablation grid",
        len(rows) == 8 and not leaks,
        f"{len(rows)} rows rendered, disabled-stage leaks: {leaks or 'none'}",
    )


def test_criterion_6_hypothesis_and_coordinates(pipeline, capsys):
    centers = {p.image_id: p.crop.region.center for p in pipeline.prepared}
    problems = []
    ran = 0
    for name, cfg in build_grid("table4", RecognitionConfig()):
        rep, backend = pipeline.run(cfg)
        ran += rep.check() == []
        ctx = [r for r in backend.requests if r.stage == "context"]
        if len(ctx) != len(pipeline.prepared):
            problems.append(f"{name}: {len(ctx)} context calls")
        for req, p in zip(ctx, pipeline.prepared):
            cx, cy = centers[p.image_id]
            if (f"({cx}, {cy})" in req.text) != cfg.use_coordinates:
                problems.append(f"{name}: coordinates wrong for {p.image_id}")
            if ("Candidates:" in req.text) != cfg.use_hypothesis:
                problems.append(f"{name}: candidate request wrong for {p.image_id}")
        if any(HYP_MARKER in t for t in recognize_texts(backend)) != cfg.use_hypothesis:
            problems.append(f"{name}: hypothesis line in final prompt")
    verdict(
        capsys, 6, "hypothesis and coordinate switches",
        ran == 4 and not problems,
        f"{ran}/4 combinations ran, problems: {problems or 'none'}",
    )


def _blocks(text: str) -> Counter:
    return Counter(re.sub(r"^Step \d+: ", "", part) for part in text.split("\n"))


def test_criterion_7_thinking_order_swap(pipeline, capsys):
    (_, default), (_, swapped) = build_grid("table5", RecognitionConfig())
    rep_a, be_a = pipeline.run(default)
    rep_b, be_b = pipeline.run(swapped)
    same_blocks = all(
        _blocks(a) == _blocks(b) for a, b in zip(recognize_texts(be_a), recognize_texts(be_b), strict=True)
    )
    reordered = recognize_texts(be_a) != recognize_texts(be_b)
    same_metrics = rep_a.mean == rep_b.mean
    verdict(
        capsys, 7, "thinking-order swap",
        same_blocks and same_metrics and reordered,
        f"order {default.thinking_order} vs {swapped.thinking_order}, block multisets equal: {same_blocks}, "
        f"metrics equal: {same_metrics}",
    )


def test_criterion_8_bank_closure(tmp_path, capsys):
    catalog = make_catalog(tmp_path, ["a", "b", "c", "d"])
    raw = [["a", "b", "c"], ["b", "c", "d"]]
    want = {tuple(sorted(p)) for g in raw for p in itertools.combinations(g, 2)}
    groups = make_groups(raw, catalog)
    path = tmp_path / "bank.json"
    bank = build_bank(catalog, groups, MockBackend(), path=path)
    again = MockBackend()
    build_bank(catalog, groups, again, path=path)
    ok = set(bank.differentials) == want and len(want) == 5 and again.calls == 0
    verdict(
        capsys, 8, "bank closure and free rebuild",
        ok,
        f"{len(bank.differentials)} pairs (expected {len(want)}), rebuild calls: {again.calls}",
    )


def test_criterion_9_backend_contract(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("OPENAI_API_KEY", "k")
    # rate limit: at most rpm requests in any 60 s window
    clock = FakeClock(start=0.0)
    limiter = RateLimiter(5, clock)
    stamps = []
    for i in range(40):
        clock.t += random.Random(i).uniform(0, 4)
        stamps.append(limiter.acquire())
    worst = max(sum(1 for t in stamps if s <= t < s + 60.0) for s in stamps)

    # 429 -> 429 -> 200 with retries
    statuses = iter([429, 429, 200])

    def handler(request):
        status = next(statuses)
        if status == 200:
            return httpx.Response(200, json={"choices": [{"message": {"content": "1. Stop\n"}}]})
        return httpx.Response(429)

    cfg = BackendConfig(kind="remote", endpoint="https://llm.invalid/v1", model="m", cache_dir=str(tmp_path))
    backend = RemoteBackend(cfg, clock=FakeClock(), transport=httpx.MockTransport(handler), rng=random.Random(0))
    req = LmmRequest((TextPart("which sign?"),))
    first = backend.complete(req)

    # cache hit from a backend that would fail on any network call
    offline = RemoteBackend(cfg, clock=FakeClock(), transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    hit = offline.complete(req)
    identical = hit.cached and hit.text.encode() == first.text.encode()
    verdict(
        capsys, 9, "backend rate limit, retry and cache",
        worst <= 5 and first.retries == 2 and first.text == "1. Stop\n" and identical and offline.calls == 0,
        f"max {worst} requests per 60 s at rpm=5, retries {first.retries}, cache hit byte-identical: {identical}",
    )
