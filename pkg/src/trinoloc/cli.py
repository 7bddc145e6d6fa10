"""Command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 I/O or file
format problems, 4 internal errors. Human-readable output goes to stdout,
logs (including the resolved configuration) to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

from trinoloc import __version__
from trinoloc.config import RunConfig, log_config, resolve_config
from trinoloc.descriptor import VIEWS
from trinoloc.errors import (
    DuplicateIdError,
    FormatError,
    FrameError,
    IngestionError,
    MalformedRecordError,
    ValidationError,
)
from trinoloc.evaluation import EvalRecord, alpha_sweep, evaluate, sweep_csv, sweep_optimum
from trinoloc.geo import GeoTag
from trinoloc.ingestion import LocalFileFetcher, decode_view, ingest_manifest
from trinoloc.library import LibraryConfig, build_library, load_library, save_library
from trinoloc.retrieval import QueryFrame, localize_frame, localize_sequence
from trinoloc.synth import (
    ALIASED_FIXTURE,
    FAST_SCENE,
    FAST_SLOW_FIXTURE,
    SLOW_SCENE,
    SynthWorldConfig,
    generate_world,
)
from trinoloc.training import TrainConfig, pairs_from_records, save_model, train, write_loss_csv

log = logging.getLogger("trinoloc")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

RANKED_KEEP = 20


def _library_config(cfg: RunConfig) -> LibraryConfig:
    return LibraryConfig(
        cell=cfg.cell,
        codebook_size=cfg.codebook_size,
        codebook_seed=cfg.codebook_seed,
        temperature=cfg.temperature,
        out_dim=cfg.out_dim,
        projection_seed=cfg.projection_seed,
        branching=cfg.branching,
        leaf_max=cfg.leaf_max,
        tree_seed=cfg.tree_seed,
    )


def _require(value: str, key: str) -> Path:
    if not value:
        raise ValidationError(f"missing required setting {key!r}", field=key)
    return Path(value)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_queries(path: Path):
    ds = ingest_manifest(path)
    frames = [QueryFrame(rec.views, timestamp=float(i)) for i, rec in enumerate(ds.records)]
    return frames, [rec.geotag for rec in ds.records], [rec.location_id for rec in ds.records]


# --- commands ------------------------------------------------------------------


def cmd_build(cfg: RunConfig, args) -> int:
    manifest = _require(cfg.manifest, "manifest")
    ds = ingest_manifest(manifest, workers=cfg.workers)
    lib, report = build_library(ds.records, _library_config(cfg))
    out = Path(cfg.library)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_library(lib, out)
    print(f"library      {out}")
    print(f"entries      {report.num_entries}")
    print(f"skipped      {report.num_skipped}")
    print(f"grid         {lib.metadata.grid_shape[0]}x{lib.metadata.grid_shape[1]} x {lib.metadata.local_dim}")
    return EXIT_OK


def cmd_query(cfg: RunConfig, args) -> int:
    lib = load_library(_require(cfg.library, "library"))
    fetch = LocalFileFetcher(".")
    views = {v: decode_view(fetch(ref), ref, v) for v, ref in zip(VIEWS, (args.front, args.left, args.right))}
    res = localize_frame(QueryFrame(views), lib, cfg.alpha, cfg.shortlist_n, cfg.checks)
    f, l, r = res.per_view_costs
    print(f"reference_id   {res.reference_id}")
    print(f"source_id      {lib.source_ids[res.reference_id]}")
    print(f"lat            {res.predicted.lat!r}")
    print(f"lon            {res.predicted.lon!r}")
    print(f"heading        {res.predicted.heading!r}")
    print(f"total_cost     {res.total_cost:.6f}")
    print(f"cost_front     {f:.6f}")
    print(f"cost_left      {l:.6f}")
    print(f"cost_right     {r:.6f}")
    print(f"alpha          {res.alpha}")
    print(f"shortlist      {res.shortlist_size}")
    print(f"elapsed_ms     {res.elapsed:.3f}")
    return EXIT_OK


def _frame_record(i, qid, res, lib, truth: GeoTag) -> dict:
    ranked = [
        {"id": c.reference_id, "lat": lib.geotags[c.reference_id].lat, "lon": lib.geotags[c.reference_id].lon}
        for c in res.candidates[:RANKED_KEEP]
    ]
    f, l, r = res.per_view_costs
    return {
        "index": i,
        "query_id": qid,
        "reference_id": res.reference_id,
        "source_id": lib.source_ids[res.reference_id],
        "predicted": {"lat": res.predicted.lat, "lon": res.predicted.lon},
        "truth": {"lat": truth.lat, "lon": truth.lon},
        "total_cost": res.total_cost,
        "per_view_costs": {"front": f, "left": l, "right": r},
        "ranked": ranked,
    }


def cmd_localize(cfg: RunConfig, args) -> int:
    lib = load_library(_require(cfg.library, "library"))
    frames, truth, qids = _load_queries(_require(cfg.queries, "queries"))
    run = localize_sequence(frames, lib, cfg.alpha, cfg.shortlist_n, cfg.checks, workers=cfg.workers)
    out = _out_dir(cfg)
    results = {
        "alpha": cfg.alpha,
        "shortlist_n": cfg.shortlist_n,
        "checks": cfg.checks,
        "frames": [_frame_record(i, q, r, lib, t) for i, (q, r, t) in enumerate(zip(qids, run.results, truth))],
    }
    _write_json(out / "results.json", results)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "elapsed_ms"])
        for i, r in enumerate(run.results):
            w.writerow([i, f"{r.elapsed:.6f}"])
    records = _records_from_json(results)
    hits = sum(bool(r.hits(cfg.threshold)[:1].any()) for r in records)
    print(f"frames         {len(run)}")
    print(f"accuracy       {100.0 * hits / len(run):.2f} % within {cfg.threshold:g} m")
    print(f"runtime mean   {run.mean_ms:.3f} ms/frame")
    print(f"runtime p95    {run.p95_ms:.3f} ms/frame")
    print(f"results        {out / 'results.json'}")
    print(f"timing         {out / 'timing.csv'}")
    return EXIT_OK


def _records_from_json(results: dict) -> list[EvalRecord]:
    recs = []
    for fr in results["frames"]:
        ranked = [GeoTag(c["lat"], c["lon"]) for c in fr["ranked"]]
        truth = GeoTag(fr["truth"]["lat"], fr["truth"]["lon"])
        recs.append(EvalRecord(str(fr["query_id"]), ranked, truth))
    return recs


def _read_results(path: Path) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        data["frames"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a results file ({exc})") from exc
    return data


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    results = _read_results(Path(args.results) if args.results else out / "results.json")
    records = _records_from_json(results)
    timing = Path(args.timing) if args.timing else out / "timing.csv"
    if timing.exists():
        with open(timing, newline="", encoding="utf-8") as fh:
            elapsed = {int(row["frame"]): float(row["elapsed_ms"]) for row in csv.DictReader(fh)}
        records = [replace(r, elapsed_ms=elapsed.get(i, 0.0)) for i, r in enumerate(records)]
    report = evaluate(records, cfg.recall_ns, cfg.thresholds, cfg.threshold)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    _write_json(
        out / "report.json",
        {
            "num_queries": report.num_queries,
            "accuracy": report.accuracy,
            "recall_at": {str(k): v for k, v in report.recall_at.items()},
            "map_at": {f"{k:g}": v for k, v in report.map_at.items()},
            "runtime_mean_ms": report.runtime_mean_ms,
            "runtime_p95_ms": report.runtime_p95_ms,
        },
    )
    print(report.summary())
    return EXIT_OK


def cmd_sweep_alpha(cfg: RunConfig, args) -> int:
    lib = load_library(_require(cfg.library, "library"))
    frames, truth, _ = _load_queries(_require(cfg.queries, "queries"))
    dataset = SimpleNamespace(queries=frames, ground_truth=truth)
    shortlist = None if args.exhaustive else cfg.shortlist_n
    rows = alpha_sweep(dataset, lib, cfg.alphas, cfg.threshold, shortlist, cfg.checks)
    out = _out_dir(cfg)
    (out / "sweep.csv").write_text(sweep_csv(rows), encoding="utf-8")
    print("alpha   accuracy")
    for r in rows:
        print(f"{r.alpha:5.2f}   {r.accuracy:6.2f} %")
    print(f"optimum {sweep_optimum(rows):g}")
    print(f"sweep   {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = ingest_manifest(_require(cfg.manifest, "manifest"), workers=cfg.workers)
    pairs = pairs_from_records(ds.records, seed=cfg.seed, extra=cfg.extra_negatives)
    if not pairs:
        raise ValidationError("manifest has no perturbed views to pair with", field="manifest")
    tcfg = TrainConfig(
        iterations=cfg.iterations,
        lr=cfg.lr,
        decay=cfg.decay,
        decay_every=cfg.decay_every,
        decay_mode=cfg.decay_mode,
        margin=cfg.margin,
        seed=cfg.seed,
    )
    result = train(pairs, tcfg)
    out = _out_dir(cfg)
    model_path = Path(cfg.model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model_path, result.model)
    write_loss_csv(out / "loss.csv", result.history)
    print(f"pairs          {len(pairs)}")
    print(f"loss first     {result.history[0].loss:.6f}")
    print(f"loss last      {result.history[-1].loss:.6f}")
    print(f"model          {model_path}")
    print(f"loss csv       {out / 'loss.csv'}")
    return EXIT_OK


def synth_config(cfg: RunConfig) -> SynthWorldConfig:
    """World settings for a preset; explicit size and noise settings win over the fixture's."""
    preset = cfg.synth_preset
    if preset == "aliased":
        base = ALIASED_FIXTURE
    elif preset == "fast":
        base = replace(FAST_SLOW_FIXTURE, **FAST_SCENE)
    elif preset == "slow":
        base = replace(FAST_SLOW_FIXTURE, **SLOW_SCENE)
    elif preset == "custom":
        base = SynthWorldConfig(
            front_alias_period=cfg.synth_alias_period, side_change_rate=cfg.synth_side_change_rate, noise_sigma=0.0
        )
    else:
        raise ValidationError(f"unknown synth preset {preset!r}", field="synth_preset")
    base = replace(base, spacing=cfg.synth_spacing, seed=cfg.seed)
    if cfg.synth_num_locations is not None:
        base = replace(base, num_locations=cfg.synth_num_locations)
    if cfg.synth_noise_sigma is not None:
        base = replace(base, noise_sigma=cfg.synth_noise_sigma)
    if preset == "slow":
        # slow scenes never repeat their front view
        base = replace(base, front_alias_period=base.num_locations)
    return base


def cmd_synth(cfg: RunConfig, args) -> int:
    wcfg = synth_config(cfg)
    ds = generate_world(wcfg, label=cfg.synth_preset)
    paths = ds.write(_out_dir(cfg))
    print(f"locations      {len(ds)}")
    print(f"alias period   {wcfg.front_alias_period}")
    print(f"side change    {wcfg.side_change_rate}")
    print(f"noise sigma    {wcfg.noise_sigma}")
    print(f"references     {paths['references']}")
    print(f"queries        {paths['queries']}")
    return EXIT_OK


def _feature_collection(features) -> dict:
    return {"type": "FeatureCollection", "features": features}


def _point(lat, lon, props) -> dict:
    return {"type": "Feature", "geometry": {"type": "Point", "coordinates": [lon, lat]}, "properties": props}


def geojson_collections(results: dict) -> dict:
    """Trajectory line, predicted points and ground-truth points as FeatureCollections."""
    frames = results["frames"]
    if not frames:
        raise ValidationError("results contain no frames", field="results")
    line = {
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": [[f["predicted"]["lon"], f["predicted"]["lat"]] for f in frames]},
        "properties": {"name": "predicted trajectory", "frames": len(frames)},
    }
    predicted = [
        _point(
            f["predicted"]["lat"],
            f["predicted"]["lon"],
            {"frame": f["index"], "query_id": f["query_id"], "reference_id": f["reference_id"], "total_cost": f["total_cost"]},
        )
        for f in frames
    ]
    truth = [_point(f["truth"]["lat"], f["truth"]["lon"], {"frame": f["index"], "query_id": f["query_id"]}) for f in frames]
    return {
        "trajectory": _feature_collection([line]),
        "predicted": _feature_collection(predicted),
        "ground_truth": _feature_collection(truth),
    }


def cmd_export_geojson(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    results = _read_results(Path(args.results) if args.results else out / "results.json")
    for name, fc in geojson_collections(results).items():
        path = out / f"{name}.geojson"
        _write_json(path, fc)
        print(f"{name:<14} {path}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--output", help="output directory")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trinoloc", description="Three-view visual localization toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a location library from a manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--library", help="library file to write")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="localize one frame given three view files")
    _common(p)
    p.add_argument("--library")
    p.add_argument("--front", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("localize", help="localize every frame of a query manifest")
    _common(p)
    p.add_argument("--library")
    p.add_argument("--queries")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="recall, mAP and runtime from a results file")
    _common(p)
    p.add_argument("--results")
    p.add_argument("--timing")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="accuracy over a list of fusion weights")
    _common(p)
    p.add_argument("--library")
    p.add_argument("--queries")
    p.add_argument("--alphas", help="comma-separated list")
    p.add_argument("--exhaustive", action="store_true", help="score every reference instead of a shortlist")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("train", help="train the descriptor projection on view pairs")
    _common(p)
    p.add_argument("--manifest", help="manifest with perturbed view columns")
    p.add_argument("--model", help="model file to write")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="write a synthetic street world")
    _common(p)
    p.add_argument("--preset", dest="synth_preset", choices=["aliased", "fast", "slow", "custom"])
    p.add_argument("--num-locations", dest="synth_num_locations", type=int)
    p.add_argument("--noise-sigma", dest="synth_noise_sigma", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-geojson", help="GeoJSON trajectory, predictions and ground truth")
    _common(p)
    p.add_argument("--results")
    p.set_defaults(func=cmd_export_geojson)
    return parser


_NOT_CONFIG = {"command", "func", "config", "set", "quiet", "results", "timing", "exhaustive", "front", "left", "right"}


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}", field="set")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for k, v in vars(args).items():
        if k not in _NOT_CONFIG and v is not None:
            out[k] = v if not isinstance(v, (int, float)) else str(v)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args.config, _overrides(args))
        log_config(cfg, args.command)
        return args.func(cfg, args)
    except FrameError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, ValidationError):
            return EXIT_VALIDATION
        return EXIT_IO if isinstance(cause, (FormatError, OSError)) else EXIT_INTERNAL
    except (ValidationError, MalformedRecordError, DuplicateIdError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FormatError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal-error exit code
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
