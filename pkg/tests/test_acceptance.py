"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

The heavyweight criteria share a single synthetic corpus and two identical
seeded pipeline runs (via the CLI) prepared once per module.
"""

import csv
import io
import json
import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn
from fastapi.testclient import TestClient
from PIL import Image

from slidemil import mil
from slidemil.cli import main as cli_main
from slidemil.metrics import confidence_interval, qwk, retention_curve
from slidemil.mil import (RankEntry, aggregate_labels, build_ranking,
                          expected_severity, reduction_report, sample_topk)
from slidemil.scorer import ScorerConfig, batch_loss, load_model, new_model
from slidemil.service import ServiceConfig, create_app
from slidemil.slides import load_manifest, open_slide, thumbnail
from slidemil.tiling import TileRef
from slidemil.tissue import otsu_threshold

from test_metrics import oracle_qwk
from test_tissue import oracle_otsu

SEED = 11


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"[ACCEPTANCE] {name}: FAIL")
        raise
    print(f"[ACCEPTANCE] {name}: PASS")


def ref(i):
    return TileRef("s", i, i * 64, 0, 64)


# ---------------------------------------------------------------- fast criteria

def test_confidence_interval_reproduction():
    cases = [(0.9344, 900, 0.0162), (0.8944, 900, 0.0201), (0.9778, 900, 0.0096),
             (0.8491, 232, 0.0461), (1.0, 100, 0.0)]
    with criterion("CI reproduction"):
        for m, n, margin in cases:
            got = confidence_interval(m, n).margin
            assert abs(got - margin) <= 0.0005, (m, n, got, margin)


def test_sampling_reduction_arithmetic():
    with criterion("Sampling-reduction arithmetic"):
        counts = [200] * 10_495 + [13_571_871 - 200 * 10_495]
        assert len(counts) == 10_496 and all(c >= 200 for c in counts)
        rep = reduction_report(counts, 200)
        assert rep["total_before"] == 13_571_871
        assert rep["total_after"] == 2_099_200
        assert 6.45 <= rep["ratio"] <= 6.47


def test_oracle_equivalences():
    rng = np.random.default_rng(101)
    with criterion("Oracle equivalences (otsu, top-k, qwk)"):
        for _ in range(50):
            hist = np.zeros(256, dtype=int)
            bins = rng.choice(256, size=int(rng.integers(2, 50)), replace=False)
            hist[bins] = rng.integers(1, 500, size=len(bins))
            assert otsu_threshold(hist) == oracle_otsu(list(hist))

        for case in range(1000):
            n = int(rng.integers(1, 40))
            scores = rng.integers(0, 5, size=n) / 2.0 if case % 2 else 1 + 2 * rng.random(n)
            M = int(rng.integers(1, 30))
            ranking = build_ranking(
                "s", [RankEntry(ref(i), float(s), (0, 0, 0)) for i, s in enumerate(scores)],
                "v")
            got = [r.index for r in sample_topk(ranking, M).refs]
            want = [i for i, _ in sorted(enumerate(scores),
                                         key=lambda t: (-t[1], t[0]))[:min(M, n)]]
            assert got == want

        for _ in range(100):
            n = int(rng.integers(5, 250))
            preds = list(rng.integers(1, 4, size=n))
            labels = list(rng.integers(1, 4, size=n))
            assert abs(qwk(preds, labels) - oracle_qwk(preds, labels)) <= 1e-9


def test_expected_severity_properties():
    rng = np.random.default_rng(102)
    with criterion("Expected-severity properties"):
        for i in (1, 2, 3):
            one_hot = [0.0, 0.0, 0.0]
            one_hot[i - 1] = 1.0
            assert expected_severity(one_hot) == float(i)
        for _ in range(1000):
            p = rng.random(3)
            p /= p.sum()
            i, j = sorted(rng.choice(3, size=2, replace=False))
            eps = float(rng.random() * p[i])
            q = p.copy()
            q[i] -= eps
            q[j] += eps
            assert abs((expected_severity(q) - expected_severity(p)) - eps * (j - i)) <= 1e-12


def test_max_rule_metamorphic_suite():
    rng = np.random.default_rng(103)
    with criterion("Max-rule metamorphic suite"):
        for _ in range(1000):  # permutation invariance
            labels = list(rng.integers(1, 4, size=rng.integers(1, 15)))
            assert aggregate_labels(list(rng.permutation(labels))) == aggregate_labels(labels)
        for _ in range(1000):  # NNeo append neutrality
            labels = list(rng.integers(1, 4, size=rng.integers(1, 15)))
            assert aggregate_labels(labels + [1]) == aggregate_labels(labels)
        transforms = [lambda s: 3.0 * s + 0.5, lambda s: s ** 3,
                      lambda s: math.exp(s / 3.0)]
        for _ in range(1000):  # monotone rescaling leaves the argmax unchanged
            n = int(rng.integers(1, 12))
            probs = rng.random((n, 3))
            probs /= probs.sum(axis=1, keepdims=True)
            entries = [RankEntry(ref(i), expected_severity(p), tuple(p))
                       for i, p in enumerate(probs)]
            base = build_ranking("s", entries, "v")
            f = transforms[int(rng.integers(len(transforms)))]
            rescaled = build_ranking(
                "s", [RankEntry(e.ref, f(e.expected_severity), e.probs) for e in entries],
                "v")
            assert mil._diagnose_from_ranking(rescaled) == mil._diagnose_from_ranking(base)


def test_gradient_check():
    with criterion("Gradient check"):
        model = new_model(ScorerConfig(input_size=16, channels=(4, 8, 8)), seed=104)
        model.module.double()
        rng = np.random.default_rng(104)
        batch = [(rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8), cls)
                 for cls in (1, 2, 3, 1, 2)]
        loss = batch_loss(model, batch)
        model.module.zero_grad()
        loss.backward()
        params = [p for p in model.module.parameters()]
        h = 1e-6
        coord_rng = np.random.default_rng(105)
        for _ in range(120):
            p = params[int(coord_rng.integers(len(params)))]
            idx = int(coord_rng.integers(p.numel()))
            analytic = float(p.grad.view(-1)[idx])
            with torch.no_grad():
                orig = float(p.view(-1)[idx])
                p.view(-1)[idx] = orig + h
                up = float(batch_loss(model, batch))
                p.view(-1)[idx] = orig - h
                down = float(batch_loss(model, batch))
                p.view(-1)[idx] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / scale <= 1e-4, (analytic, numeric)


# ------------------------------------------------------- end-to-end criteria

def run_pipeline(data_dir: Path, workdir: Path, manifest: str):
    common = ["--manifest", manifest, "--workdir", str(workdir),
              "--tile-size", "64", "--mask-factor", "16"]
    assert cli_main(["train"] + common + [
        "--annotations", str(data_dir / "annotations.jsonl"),
        "--M", "20", "--top-n", "5", "--epochs-full", "5", "--epochs-weak", "5",
        "--seed", str(SEED), "--lr", "2e-3", "--weight-decay", "1e-4",
        "--batch-train", "32", "--sample-validation", "on"]) == 0
    assert cli_main(["infer"] + common + [
        "--checkpoint", str(workdir / "checkpoints" / "model.pt"),
        "--split", "test", "--single-thread"]) == 0


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    t0 = time.monotonic()
    assert cli_main(["synth", "--out", str(data), "--n-slides", "60",
                     "--seed", str(SEED)]) == 0
    manifest = str(data / "manifest.jsonl")
    run_a, run_b = root / "run_a", root / "run_b"
    run_pipeline(data, run_a, manifest)
    run_pipeline(data, run_b, manifest)
    print(f"[ACCEPTANCE] end-to-end preparation took {time.monotonic() - t0:.0f}s")
    return {"data": data, "manifest": manifest, "run_a": run_a, "run_b": run_b}


def test_synthetic_end_to_end(e2e):
    with criterion("Synthetic end-to-end"):
        records = load_manifest(e2e["manifest"])
        labels = {r.id: r.slide_label for r in records}
        rows = [json.loads(l) for l in
                (e2e["run_a"] / "results" / "results.jsonl").read_text().splitlines()]
        test_ids = [r.id for r in records if r.split == "test"]
        assert sorted(r["slide_id"] for r in rows) == sorted(test_ids)
        name_to_label = {"NNeo": 1, "LG": 2, "HG": 3}
        correct = sum(name_to_label[r["predicted"]] == labels[r["slide_id"]] for r in rows)
        accuracy = correct / len(rows)
        print(f"[ACCEPTANCE]   held-out slide accuracy = {accuracy:.3f} (n={len(rows)})")
        assert accuracy >= 0.90

        log = json.loads((e2e["run_a"] / "reports" / "train_log.json").read_text())
        tiles_per_slide = {}
        for path in (e2e["run_a"] / "tiles").glob("*.jsonl"):
            sid = path.stem
            if any(r.id == sid and r.split in ("train", "val") for r in records):
                tiles_per_slide[sid] = len(path.read_text().splitlines())
        full_total = sum(tiles_per_slide.values())
        sampled_total = sum(min(20, n) for n in tiles_per_slide.values())
        scored = [e["tiles_scored"] for e in log["weak"]]
        print(f"[ACCEPTANCE]   tiles scored per weak epoch: {scored} "
              f"(|T|={full_total}, sum min(M, n_s)={sampled_total})")
        assert scored[0] == full_total
        assert all(s == sampled_total for s in scored[1:])
        assert sampled_total < full_total


def test_retention_curve_criterion(e2e):
    with criterion("Retention curve"):
        rankings_per_epoch = {}
        for path in sorted((e2e["run_a"] / "rankings").glob("epoch_*.jsonl")):
            epoch = int(path.stem.split("_")[1])
            per_slide = {}
            for line in path.read_text().splitlines():
                row = json.loads(line)
                per_slide.setdefault(row["slide_id"], []).append(row["n"])
            rankings_per_epoch[epoch] = per_slide
        log = json.loads((e2e["run_a"] / "reports" / "train_log.json").read_text())
        relevant = {}
        for epoch_log in log["weak"]:
            for sid, idxs in epoch_log["tiles_used"].items():
                relevant.setdefault(sid, set()).update(idxs)
        assert relevant
        max_ns = max(len(v) for v in rankings_per_epoch[1].values())
        ks = [5, 8, 10, 15, 20, max_ns]
        points = retention_curve(rankings_per_epoch, relevant, ks)
        for epoch in rankings_per_epoch:
            fr = [p.lost_fraction for p in points if p.epoch == epoch]
            assert all(a >= b for a, b in zip(fr, fr[1:])), (epoch, fr)
            assert fr[-1] == 0.0  # k >= max n_s loses nothing
        shown = [round(p.lost_fraction, 4) for p in points if p.epoch == 1]
        print(f"[ACCEPTANCE]   epoch-1 lost fractions over k={ks}: {shown}")


def test_end_to_end_determinism(e2e):
    with criterion("Determinism"):
        log_a = (e2e["run_a"] / "reports" / "train_log.json").read_bytes()
        log_b = (e2e["run_b"] / "reports" / "train_log.json").read_bytes()
        assert log_a == log_b
        results_a = sorted((e2e["run_a"] / "results").glob("*"))
        results_b = sorted((e2e["run_b"] / "results").glob("*"))
        assert [p.name for p in results_a] == [p.name for p in results_b]
        for pa, pb in zip(results_a, results_b):
            assert pa.read_bytes() == pb.read_bytes(), pa.name


class _CountingWrapper(nn.Module):
    def __init__(self, inner):
        super().__init__()
        self.inner = inner
        self.calls = 0

    def forward(self, x):
        self.calls += x.shape[0]
        return self.inner(x)


def test_service_contract_suite(e2e, tmp_path):
    with criterion("Service contract suite"):
        model = load_model(e2e["run_a"] / "checkpoints" / "model.pt")
        model.module = _CountingWrapper(model.module)
        cfg = ServiceConfig(workdir=str(tmp_path), tile_size=64, mask_factor=16, workers=2)
        app = create_app(cfg, model=model)
        client = TestClient(app)

        test_slide = next(p for r, p in
                          ((r, Path(r.path)) for r in load_manifest(e2e["manifest"]))
                          if r.split == "test")
        payload = test_slide.read_bytes()
        (job,) = client.post("/api/slides", files=[
            ("files", ("case.png", payload, "image/png"))]).json()
        sid = job["slide_id"]
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline:
            body = client.get(f"/api/slides/{sid}").json()
            if body.get("state") == "done":
                break
            time.sleep(0.05)
        assert body["state"] == "done"

        # cache hit: identical bytes come back done with zero extra scoring
        calls = model.module.calls
        (dup,) = client.post("/api/slides", files=[
            ("files", ("copy.png", payload, "image/png"))]).json()
        assert dup["slide_id"] == sid and dup["state"] == "done"
        body2 = client.get(f"/api/slides/{sid}").json()
        assert model.module.calls == calls
        body.pop("timestamp"), body2.pop("timestamp")
        assert body == body2

        # heatmap locality: opacity 0 is exactly the thumbnail ...
        upload = next((tmp_path / "uploads").glob(f"{sid}*"))
        thumb = thumbnail(open_slide(upload), 16)
        buf = io.BytesIO()
        Image.fromarray(thumb).save(buf, format="PNG")
        got = client.get(f"/api/slides/{sid}/heatmap",
                         params={"class": "argmax", "opacity": 0.0})
        assert got.content == buf.getvalue()
        # ... and tint never leaks outside tile footprints
        heat = np.asarray(Image.open(io.BytesIO(client.get(
            f"/api/slides/{sid}/heatmap",
            params={"class": "argmax", "opacity": 0.9}).content)).convert("RGB"))
        stored = app.state.store.result(sid, model.version)
        footprint = np.zeros(thumb.shape[:2], dtype=bool)
        for t in stored["tiles"]:
            footprint[t["y"] // 16:(t["y"] + t["size"]) // 16,
                      t["x"] // 16:(t["x"] + t["size"]) // 16] = True
        assert np.array_equal(heat[~footprint], thumb[~footprint])
        assert not np.array_equal(heat[footprint], thumb[footprint])

        # feedback durability across restart
        client.post(f"/api/slides/{sid}/feedback",
                    json={"verdict": "wrong", "corrected_label": "LG",
                          "comment": "border case", "author": "dr"})
        model2 = load_model(e2e["run_a"] / "checkpoints" / "model.pt")
        model2.module = _CountingWrapper(model2.module)  # same weights -> same version
        app2 = create_app(cfg, model=model2)
        client2 = TestClient(app2)
        history = client2.get(f"/api/slides/{sid}/feedback").json()
        assert [h["verdict"] for h in history] == ["wrong"]
        assert history[0]["corrected_label"] == "LG"

        # CSV round-trip parse equality
        text = client2.get("/api/export.csv").text
        rows = list(csv.DictReader(io.StringIO(text)))
        assert len(rows) == 1
        row = rows[0]
        assert row["slide_id"] == sid
        assert row["predicted"] == body["predicted"]
        for i, key in enumerate(("p_nneo", "p_lg", "p_hg")):
            assert float(row[key]) == pytest.approx(body["confidence"][i], abs=1e-6)
        assert row["verdict"] == "wrong" and row["corrected_label"] == "LG"
