"""Command-line pipeline: synth, segment, tile, train, infer, eval, retention, serve.

Every command is idempotent given identical inputs and seed. Artifacts land
under the workdir (masks/, tiles/, rankings/, checkpoints/, results/,
reports/, provenance/), and each command records its resolved configuration
plus the manifest hash for provenance.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from . import metrics, mil, synth
from .labels import parse_label
from .scorer import ScorerConfig, TrainConfig, load_model, new_model, save_model
from .slides import SlideRecord, load_manifest
from .tiling import (TileSet, extract_tile, load_annotations, load_tile_manifest,
                     save_tile_manifest, tile_grid)
from .tissue import load_mask, save_mask, segment_tissue


@dataclass
class RunConfig:
    manifest: str = ""
    workdir: str = ""
    checkpoint: str = ""
    annotations: str = ""
    M: int = 200
    top_n: int = 5
    ks: tuple = (50, 75, 100, 150, 200)
    seed: int = 0
    sample_validation: bool = True
    deterministic: bool = True
    threads: int = 0
    mask_factor: int = 32
    tile_size: int = 512
    arch: str = "tinyconv"
    train: TrainConfig = field(default_factory=TrainConfig)


def _manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_provenance(workdir: Path, command: str, cfg: dict) -> None:
    prov_dir = workdir / "provenance"
    prov_dir.mkdir(parents=True, exist_ok=True)
    (prov_dir / f"{command}.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _pool_size(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def _ensure_mask(slide: SlideRecord, workdir: Path, factor: int):
    mask_dir = workdir / "masks"
    try:
        mask = load_mask(mask_dir, slide.id)
        if mask.factor == factor:
            return mask
    except FileNotFoundError:
        pass
    mask = segment_tissue(slide, factor)
    save_mask(mask, mask_dir, slide.id)
    return mask


def _ensure_tiles(slide: SlideRecord, workdir: Path, factor: int, size: int) -> TileSet:
    path = workdir / "tiles" / f"{slide.id}.jsonl"
    if path.exists():
        return load_tile_manifest(path)
    mask = _ensure_mask(slide, workdir, factor)
    tiles = tile_grid(slide, mask, size=size)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_tile_manifest(tiles, path)
    return tiles


def _make_loader(records: list):
    by_id = {r.id: r for r in records}

    def loader(ref):
        return extract_tile(by_id[ref.slide_id], ref)

    return loader


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(n_slides=args.n_slides, seed=args.seed,
                            tile_size=args.tile_size, mask_factor=args.mask_factor)
    info = synth.generate_dataset(args.out, cfg)
    print(f"wrote {info['slides']} slides under {args.out}")
    print(f"manifest: {info['manifest']}")
    print(f"annotations: {info['annotations']}")
    return 0


def cmd_segment(args) -> int:
    workdir = Path(args.workdir)
    records = load_manifest(args.manifest)
    with ThreadPoolExecutor(max_workers=_pool_size(args.threads)) as pool:
        list(pool.map(lambda r: _ensure_mask(r, workdir, args.mask_factor), records))
    _write_provenance(workdir, "segment", {
        "manifest": str(args.manifest), "manifest_sha256": _manifest_hash(args.manifest),
        "mask_factor": args.mask_factor, "slides": len(records),
    })
    print(f"segmented {len(records)} slides -> {workdir / 'masks'}")
    return 0


def cmd_tile(args) -> int:
    workdir = Path(args.workdir)
    records = load_manifest(args.manifest)
    with ThreadPoolExecutor(max_workers=_pool_size(args.threads)) as pool:
        tile_sets = list(pool.map(
            lambda r: _ensure_tiles(r, workdir, args.mask_factor, args.tile_size), records))
    counts = {ts.slide_id: ts.n_s for ts in tile_sets}
    _write_provenance(workdir, "tile", {
        "manifest": str(args.manifest), "manifest_sha256": _manifest_hash(args.manifest),
        "mask_factor": args.mask_factor, "tile_size": args.tile_size,
        "total_tiles": sum(counts.values()),
    })
    print(f"tiled {len(records)} slides, {sum(counts.values())} tiles total")
    return 0


def _build_dataset(records, workdir: Path, args):
    train_labels, val_labels, tile_sets = {}, {}, {}
    for rec in records:
        if rec.split not in ("train", "val"):
            continue
        if rec.slide_label is None:
            raise SystemExit(f"slide {rec.id} in split {rec.split} has no label")
        tiles = _ensure_tiles(rec, workdir, args.mask_factor, args.tile_size)
        tile_sets[rec.id] = tiles.refs
        (train_labels if rec.split == "train" else val_labels)[rec.id] = rec.slide_label

    annotated_tiles = []
    if args.annotations:
        by_slide = load_annotations(args.annotations)
        for rec in records:
            if not (rec.annotated and rec.split == "train" and rec.id in by_slide):
                continue
            cell_labels = by_slide[rec.id]
            for ref in tile_sets[rec.id]:
                label = cell_labels.get((ref.origin_x, ref.origin_y))
                if label is not None:
                    annotated_tiles.append((ref, label))
    return mil.MILDataset(
        train_labels=train_labels, val_labels=val_labels, tile_sets=tile_sets,
        annotated_tiles=annotated_tiles, loader=_make_loader(records),
    )


def cmd_train(args) -> int:
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(args.manifest)
    train_cfg = TrainConfig(
        lr=args.lr, weight_decay=args.weight_decay, batch_train=args.batch_train,
        batch_infer=args.batch_infer, epochs_full=args.epochs_full,
        epochs_weak=args.epochs_weak, seed=args.seed,
        deterministic=not args.no_deterministic,
    )
    if train_cfg.deterministic:
        torch.set_num_threads(1)
    dataset = _build_dataset(records, workdir, args)
    model = new_model(ScorerConfig(arch=args.arch, input_size=args.tile_size), seed=args.seed)
    model, log = mil.run_mixed_supervision(
        dataset, train_cfg, model, M=args.M, top_n=args.top_n,
        sample_validation=args.sample_validation == "on", artifact_dir=workdir)

    ckpt_dir = workdir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = ckpt_dir / "model.pt"
    save_model(model, ckpt_path)
    reports = workdir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    (reports / "train_log.json").write_text(json.dumps(log, indent=2, sort_keys=True))
    _write_provenance(workdir, "train", {
        "manifest": str(args.manifest), "manifest_sha256": _manifest_hash(args.manifest),
        "train": asdict(train_cfg), "M": args.M, "top_n": args.top_n,
        "sample_validation": args.sample_validation == "on", "arch": args.arch,
        "tile_size": args.tile_size, "mask_factor": args.mask_factor,
        "model_version": model.version,
    })
    print(f"checkpoint: {ckpt_path} (version {model.version})")
    if log.get("best"):
        print(f"best epoch: {json.dumps(log['best'], sort_keys=True)}")
    return 0


def cmd_infer(args) -> int:
    workdir = Path(args.workdir)
    if args.deterministic_threads:
        torch.set_num_threads(1)
    model = load_model(args.checkpoint)
    records = [r for r in load_manifest(args.manifest)
               if not args.split or r.split == args.split]
    loader = _make_loader(records)
    results_dir = workdir / "results"
    results_dir.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    for rec in records:
        tiles = _ensure_tiles(rec, workdir, args.mask_factor, args.tile_size)
        result = mil.infer_slide(model, tiles.refs, loader, top_n=args.top_n,
                                 batch_infer=args.batch_infer)
        (results_dir / f"{rec.id}.json").write_text(
            json.dumps(result.to_dict(include_ranking=True), indent=2, sort_keys=True))
        summary_rows.append(json.dumps(result.to_dict(), sort_keys=True))
    (results_dir / "results.jsonl").write_text("\n".join(summary_rows) + "\n")
    _write_provenance(workdir, "infer", {
        "manifest": str(args.manifest), "manifest_sha256": _manifest_hash(args.manifest),
        "checkpoint": str(args.checkpoint), "model_version": model.version,
        "split": args.split, "slides": len(records),
    })
    print(f"inferred {len(records)} slides -> {results_dir / 'results.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    records = {r.id: r for r in load_manifest(args.manifest)}
    preds, labels = [], []
    with open(args.results) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rec = records.get(row["slide_id"])
            if rec is None or rec.slide_label is None:
                continue
            preds.append(parse_label(row["predicted"]))
            labels.append(rec.slide_label)
    reports = metrics.evaluate_predictions(preds, labels)
    out = {name: asdict(rep) for name, rep in reports.items()}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    for name, rep in reports.items():
        if rep.margin is not None:
            print(f"{name}: {rep.m:.4f} +/- {rep.margin:.4f} (n={rep.n})")
        elif not rep.defined:
            print(f"{name}: undefined (no positive labels)")
        else:
            print(f"{name}: {rep.m:.4f} (n={rep.n}, no Bernoulli interval)")
    return 0


def _relevant_from_participation(train_log: dict) -> dict:
    relevant = {}
    for epoch_log in train_log.get("weak", []):
        for sid, indices in epoch_log.get("tiles_used", {}).items():
            relevant.setdefault(sid, set()).update(indices)
    return relevant


def _relevant_from_labels(annotations_path, manifest_path, workdir: Path, args) -> dict:
    by_slide = load_annotations(annotations_path)
    relevant = {}
    for rec in load_manifest(manifest_path):
        if rec.id not in by_slide or rec.slide_label is None:
            continue
        tiles = _ensure_tiles(rec, workdir, args.mask_factor, args.tile_size)
        cell_labels = by_slide[rec.id]
        wanted = {ref.index for ref in tiles
                  if cell_labels.get((ref.origin_x, ref.origin_y)) == rec.slide_label}
        if wanted:
            relevant[rec.id] = wanted
    return relevant


def cmd_retention(args) -> int:
    workdir = Path(args.workdir)
    rankings_dir = workdir / "rankings"
    rankings_per_epoch = {}
    for path in sorted(rankings_dir.glob("epoch_*.jsonl")):
        epoch = int(path.stem.split("_")[1])
        per_slide = {}
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                per_slide.setdefault(row["slide_id"], []).append(row["n"])
        rankings_per_epoch[epoch] = per_slide
    if not rankings_per_epoch:
        print(f"no rankings under {rankings_dir}", file=sys.stderr)
        return 2

    if args.relevance == "participation":
        train_log = json.loads((workdir / "reports" / "train_log.json").read_text())
        relevant = _relevant_from_participation(train_log)
    else:
        if not args.annotations:
            print("--annotations required for label relevance", file=sys.stderr)
            return 2
        relevant = _relevant_from_labels(args.annotations, args.manifest, workdir, args)

    ks = [int(k) for k in args.ks.split(",")]
    points = metrics.retention_curve(rankings_per_epoch, relevant, ks)
    reports = workdir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    out_path = reports / f"retention_{args.relevance}.json"
    out_path.write_text(json.dumps(
        [asdict(p) for p in points], indent=2, sort_keys=True))
    for p in points:
        print(f"epoch {p.epoch} k={p.k}: lost {p.lost_fraction:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig(
        workdir=args.workdir, checkpoint=args.checkpoint, workers=args.threads or 2,
        token_file=args.token_file, tile_size=args.tile_size, mask_factor=args.mask_factor,
        frontend_dir=args.frontend,
    )
    uvicorn.run(create_app(cfg), host=args.host, port=args.port)
    return 0


def _add_common(p, *names):
    if "manifest" in names:
        p.add_argument("--manifest", required=True)
    if "workdir" in names:
        p.add_argument("--workdir", required=True)
    if "geometry" in names:
        p.add_argument("--tile-size", type=int, default=512, dest="tile_size")
        p.add_argument("--mask-factor", type=int, default=32, dest="mask_factor")
    if "threads" in names:
        p.add_argument("--threads", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slidemil",
                                     description="Slide-level MIL diagnosis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-slides", type=int, default=60, dest="n_slides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-size", type=int, default=64, dest="tile_size")
    p.add_argument("--mask-factor", type=int, default=16, dest="mask_factor")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="compute tissue masks")
    _add_common(p, "manifest", "workdir", "geometry", "threads")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("tile", help="compute tile grids")
    _add_common(p, "manifest", "workdir", "geometry", "threads")
    p.set_defaults(fn=cmd_tile)

    p = sub.add_parser("train", help="mixed-supervision training")
    _add_common(p, "manifest", "workdir", "geometry", "threads")
    p.add_argument("--annotations", default="")
    p.add_argument("--M", type=int, default=200, dest="M")
    p.add_argument("--top-n", type=int, default=5, dest="top_n")
    p.add_argument("--epochs-full", type=int, default=50, dest="epochs_full")
    p.add_argument("--epochs-weak", type=int, default=50, dest="epochs_weak")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-validation", choices=("on", "off"), default="on",
                   dest="sample_validation")
    p.add_argument("--lr", type=float, default=6e-6)
    p.add_argument("--weight-decay", type=float, default=3e-4, dest="weight_decay")
    p.add_argument("--batch-train", type=int, default=32, dest="batch_train")
    p.add_argument("--batch-infer", type=int, default=256, dest="batch_infer")
    p.add_argument("--arch", choices=("tinyconv", "resnet34"), default="tinyconv")
    p.add_argument("--no-deterministic", action="store_true", dest="no_deterministic")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="diagnose slides with a checkpoint")
    _add_common(p, "manifest", "workdir", "geometry", "threads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--top-n", type=int, default=5, dest="top_n")
    p.add_argument("--batch-infer", type=int, default=256, dest="batch_infer")
    p.add_argument("--single-thread", action="store_true", dest="deterministic_threads",
                   help="pin torch to one thread for bit-stable output")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="metric report from inference results")
    p.add_argument("--results", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("retention", help="sampling information-loss curve")
    _add_common(p, "workdir", "geometry")
    p.add_argument("--manifest", default="")
    p.add_argument("--annotations", default="")
    p.add_argument("--ks", default="50,75,100,150,200")
    p.add_argument("--relevance", choices=("participation", "label"),
                   default="participation")
    p.set_defaults(fn=cmd_retention)

    p = sub.add_parser("serve", help="run the review service")
    _add_common(p, "workdir", "geometry", "threads")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--token-file", default="", dest="token_file")
    p.add_argument("--frontend", default="", help="directory with the built web UI")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface module errors as machine-readable text
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
