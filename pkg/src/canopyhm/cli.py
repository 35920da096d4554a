"""Batch command-line interface.

One subcommand per pipeline stage:
synth | extract | train-enhancer | enhance | train-head | infer | eval |
profile | detect | agb | growth | report

Every subcommand reads its inputs, writes declared outputs under --out,
and prints a one-line JSON summary to stdout. Logs go to stderr. Exit
codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import enhance, evalmetrics, forestry, height_head, scenegen
from .config import RunConfig
from .features import FeatureMap, read_features, write_features
from .raster import RasterGrid, Tile, TilingManifest, mosaic, read_raster, tile_grid, write_raster

logger = logging.getLogger("canopyhm")


class _CliInputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _CliInputError(message)


def _worker_count() -> int:
    env = os.environ.get("CANOPY_THREADS")
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _map_tiles(fn, items):
    """Apply fn over tile work items concurrently; results keep item order."""
    workers = _worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg, _ = _load_config_file(args.config)
    else:
        cfg = RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_config_file(path) -> tuple[RunConfig, dict | None]:
    with open(path) as fh:
        data = json.load(fh)
    scene = data.pop("scene", None)
    from dataclasses import fields
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data), scene


def _out_dir(args) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_rgb(path) -> FeatureMap:
    rgb = read_features(path)
    if rgb.channels != 3:
        raise ValueError(f"expected a 3-channel RGB tile file, got {rgb.channels} channels")
    return rgb


def _rgb_tiles(rgb: np.ndarray, cfg: RunConfig) -> tuple[list[np.ndarray], TilingManifest]:
    manifest = tile_grid(rgb.shape[1], rgb.shape[2], cfg.tile_size)
    tiles = [rgb[:, e["row_off"]:e["row_off"] + cfg.tile_size,
                 e["col_off"]:e["col_off"] + cfg.tile_size]
             for e in manifest.tiles]
    return tiles, manifest


def _write_manifest(manifest: TilingManifest, out: Path) -> None:
    (out / "tiles.json").write_text(manifest.to_json())


def _read_manifest(directory: Path) -> TilingManifest:
    path = directory / "tiles.json"
    if not path.exists():
        raise FileNotFoundError(f"missing tile manifest {path}")
    return TilingManifest.from_json(path.read_text())


def _tile_name(prefix: str, entry: dict, suffix: str) -> str:
    return f"{prefix}_r{entry['row_off']:06d}_c{entry['col_off']:06d}{suffix}"


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    cfg = _load_config(args)
    if not args.config:
        raise ValueError("synth requires --config with a 'scene' section")
    _, scene_dict = _load_config_file(args.config)
    if scene_dict is None:
        raise ValueError(f"config {args.config} has no 'scene' section")
    scene_cfg = scenegen.SceneConfig.from_json(json.dumps(scene_dict))
    if args.seed is not None:
        scene_cfg.seed = args.seed
    out = _out_dir(args)

    scene = scenegen.generate_scene(scene_cfg)
    write_raster(scene.chm, out / "chm.rst")
    write_features(FeatureMap(scene.rgb.astype(np.float32), stride_px=1),
                   out / "rgb.ftr")
    scenegen.write_trees_csv(scene.trees, out / "trees.csv")
    scenegen.write_parcels_json(scene.parcels, scenegen.parcel_rects(scene),
                                out / "parcels.json")
    (out / "scene_config.json").write_text(scene_cfg.to_json())
    return {"command": "synth", "out": str(out), "trees": len(scene.trees),
            "parcels": len(scene.parcels),
            "shape": [scene.chm.height, scene.chm.width]}


def cmd_extract(args) -> dict:
    cfg = _load_config(args)
    rgb = _read_rgb(args.rgb)
    tiles, manifest = _rgb_tiles(rgb.values, cfg)
    out = _out_dir(args)
    extractor = scenegen.StubExtractor(cfg.patch_stride, cfg.stub_channels, cfg.stub_seed)

    def work(item):
        entry, tile = item
        fmap = extractor.extract(tile)
        path = out / _tile_name("lf", entry, ".ftr")
        write_features(FeatureMap(fmap.values.astype(np.float32),
                                  stride_px=fmap.stride_px), path)
        return path.name

    names = _map_tiles(work, list(zip(manifest.tiles, tiles)))
    for entry, name in zip(manifest.tiles, names):
        entry["path"] = name
    _write_manifest(manifest, out)
    return {"command": "extract", "out": str(out), "tiles": len(tiles),
            "dropped": [manifest.dropped_bottom, manifest.dropped_right]}


def cmd_train_enhancer(args) -> dict:
    cfg = _load_config(args)
    rgb = _read_rgb(args.rgb)
    tiles, _ = _rgb_tiles(rgb.values, cfg)
    out = _out_dir(args)
    extractor = scenegen.StubExtractor(cfg.patch_stride, cfg.stub_channels, cfg.stub_seed)
    train_cfg = enhance.EnhancerTrainConfig(
        steps=cfg.enhancer_steps, n_views=cfg.n_views, lr=cfg.enhancer_lr,
        momentum=cfg.momentum, clip_grad=cfg.clip_grad, seed=cfg.seed,
        crop_px=cfg.enhancer_crop_px, factors=cfg.up_factors, k_up=cfg.k_up,
        c_mid=cfg.c_mid, dtype=cfg.dtype, cosine_decay=cfg.cosine_decay)
    params, log = enhance.train_enhancer(tiles, extractor, train_cfg)
    params.save(out / "enhancer.params")
    _write_csv(out / "enhancer_log.csv", ["step", "loss", "s_mean"],
               [row.as_list() for row in log])
    final_loss = log[-1].loss if log else None
    return {"command": "train-enhancer", "out": str(out), "steps": len(log),
            "final_loss": final_loss}


def cmd_enhance(args) -> dict:
    feat_dir = Path(args.features)
    manifest = _read_manifest(feat_dir)
    params = enhance.EnhancerParams.load(args.params)
    out = _out_dir(args)

    def work(entry):
        lf = read_features(feat_dir / entry["path"])
        hf = enhance.upsample(params, lf)
        path = out / _tile_name("hf", entry, ".ftr")
        write_features(hf, path)
        return path.name

    names = _map_tiles(work, manifest.tiles)
    new_manifest = TilingManifest(**{**manifest.__dict__, "tiles": []})
    for entry, name in zip(manifest.tiles, names):
        new_manifest.tiles.append({**entry, "path": name})
    _write_manifest(new_manifest, out)
    return {"command": "enhance", "out": str(out), "tiles": len(names),
            "factor": params.total_factor}


def cmd_train_head(args) -> dict:
    cfg = _load_config(args)
    feat_dir = Path(args.features)
    manifest = _read_manifest(feat_dir)
    ref = read_raster(args.ref)
    out = _out_dir(args)

    pairs = []
    for entry in manifest.tiles:
        hf = read_features(feat_dir / entry["path"], resolution="high")
        r0, c0 = entry["row_off"], entry["col_off"]
        size = manifest.tile_size
        window = ref.values[r0:r0 + size, c0:c0 + size]
        pairs.append((hf, RasterGrid(window, ref.cell_size, nodata=ref.nodata)))

    head = height_head.HeadParams.initialize(
        pairs[0][0].channels, cfg.head_hidden1, cfg.head_hidden2,
        h_max=cfg.h_max, seed=cfg.seed, dtype=np.dtype(cfg.dtype).type)
    train_cfg = height_head.HeadTrainConfig(
        epochs=cfg.head_epochs, lr=cfg.head_lr, momentum=cfg.momentum,
        seed=cfg.seed, crop_px=cfg.head_crop_px,
        crops_per_tile=cfg.head_crops_per_tile, cosine_decay=cfg.cosine_decay)
    head, log = height_head.train_head(head, pairs, train_cfg)
    head.save(out / "head.params")
    _write_csv(out / "head_log.csv", ["epoch", "loss"], log)
    return {"command": "train-head", "out": str(out), "epochs": len(log),
            "final_loss": log[-1][1] if log else None}


def cmd_infer(args) -> dict:
    cfg = _load_config(args)
    feat_dir = Path(args.features)
    manifest = _read_manifest(feat_dir)
    head = height_head.HeadParams.load(args.head)
    out = _out_dir(args)

    def work(entry):
        hf = read_features(feat_dir / entry["path"], resolution="high")
        pred = height_head.predict_height(head, hf, cell_size=cfg.cell_size_m)
        path = out / _tile_name("pred", entry, ".rst")
        write_raster(pred, path)
        return Tile(raster=pred, row_off=entry["row_off"], col_off=entry["col_off"])

    tiles = _map_tiles(work, manifest.tiles)
    full = mosaic(tiles, manifest.source_height, manifest.source_width,
                  cell_size=cfg.cell_size_m)
    write_raster(full, out / "pred_full.rst")
    return {"command": "infer", "out": str(out), "tiles": len(tiles),
            "mosaic": str(out / "pred_full.rst")}


def cmd_eval(args) -> dict:
    pred = read_raster(args.pred)
    ref = read_raster(args.ref)
    report = evalmetrics.compute_metrics(pred, ref)
    summary = report.to_dict()
    if args.det_r2:
        summary["r2_det"] = evalmetrics.coefficient_of_determination(pred, ref)
    if args.out:
        out = _out_dir(args)
        (out / "metrics.json").write_text(json.dumps(summary, indent=2))
        _write_csv(out / "metrics.csv", list(summary.keys()), [list(summary.values())])
    return summary


def cmd_profile(args) -> dict:
    from . import plots
    chm = read_raster(args.chm)
    ref = read_raster(args.ref) if args.ref else None
    out = _out_dir(args)
    axes = ["X", "Y"] if args.axis == "both" else [args.axis]
    summary = {"command": "profile", "out": str(out)}
    for axis in axes:
        prof = evalmetrics.profile(chm, axis)
        rows = [[i, "" if np.isnan(v) else f"{v:.6f}"]
                for i, v in enumerate(prof.values)]
        _write_csv(out / f"profile_{axis.lower()}.csv", ["index", "mean_height_m"], rows)
        corr = None
        ref_prof = None
        if ref is not None:
            ref_prof = evalmetrics.profile(ref, axis)
            corr = evalmetrics.profile_correlation(prof, ref_prof)
            summary[f"corr_{axis.lower()}"] = corr
        plots.plot_profiles(prof, ref_prof, out / f"profile_{axis.lower()}.svg",
                            correlation=corr)
    return summary


def cmd_detect(args) -> dict:
    cfg = _load_config(args)
    chm = read_raster(args.chm)
    radius = args.radius_m if args.radius_m is not None else cfg.detect_radius_m
    min_h = (args.min_height_m if args.min_height_m is not None
             else cfg.detect_min_height_m)
    trees = forestry.detect_trees(chm, radius_m=radius, min_height_m=min_h)
    out = _out_dir(args)
    _write_csv(out / "trees_detected.csv", ["id", "row", "col", "height_m"],
               [[i, t.row, t.col, f"{t.height_m:.6f}"] for i, t in enumerate(trees)])
    return {"command": "detect", "out": str(out), "trees": len(trees),
            "radius_m": radius, "min_height_m": min_h}


def _read_detected_csv(path) -> list[forestry.DetectedTree]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(forestry.DetectedTree(int(row["row"]), int(row["col"]),
                                             float(row["height_m"])))
    return out


def cmd_agb(args) -> dict:
    trees = _read_detected_csv(args.trees)
    shape_src = read_raster(args.raster)
    parcels = scenegen.read_parcels_json(args.parcels,
                                         (shape_src.height, shape_src.width))
    out = _out_dir(args)
    rows = []
    total = 0.0
    for parcel in parcels:
        inside = forestry.trees_in_parcel(parcel, trees)
        agg = forestry.parcel_agb(parcel, inside)
        total += agg.total_kg
        rows.append([agg.parcel_id, agg.species, agg.stand_age, agg.count,
                     "" if agg.mean_kg is None else f"{agg.mean_kg:.4f}",
                     f"{agg.total_kg:.4f}"])
    _write_csv(out / "parcel_agb.csv",
               ["parcel_id", "species", "age", "count", "mean_kg", "total_kg"], rows)
    return {"command": "agb", "out": str(out), "parcels": len(rows),
            "total_kg": total}


def cmd_growth(args) -> dict:
    series: dict[str, list[tuple[float, float]]] = {}
    with open(args.series, newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["species"], []).append(
                (float(row["year"]), float(row["mean_kg"])))
    out = _out_dir(args)
    rows = []
    rates = {}
    for species, points in sorted(series.items()):
        years = {p[0] for p in points}
        if len(years) < 2:
            logger.warning("species %s has fewer than 2 distinct years, skipped", species)
            continue
        rate = forestry.growth_rate(points)
        rates[species] = rate
        rows.append([species, f"{rate:.6f}", len(points)])
    _write_csv(out / "growth_rates.csv", ["species", "rate_kg_per_yr", "n_points"], rows)
    return {"command": "growth", "out": str(out), "rates": rates}


def cmd_report(args) -> dict:
    from . import plots
    cfg = _load_config(args)
    pred = read_raster(args.pred)
    ref = read_raster(args.ref)
    out = _out_dir(args)
    written = []

    report = evalmetrics.compute_metrics(pred, ref)
    summary_metrics = report.to_dict()
    if args.det_r2:
        summary_metrics["r2_det"] = evalmetrics.coefficient_of_determination(pred, ref)
    (out / "metrics.json").write_text(json.dumps(summary_metrics, indent=2))
    _write_csv(out / "metrics.csv", list(summary_metrics.keys()),
               [list(summary_metrics.values())])
    written += ["metrics.json", "metrics.csv"]

    for axis in ("X", "Y"):
        p_prof = evalmetrics.profile(pred, axis)
        r_prof = evalmetrics.profile(ref, axis)
        corr = evalmetrics.profile_correlation(p_prof, r_prof)
        rows = [[i,
                 "" if np.isnan(pv) else f"{pv:.6f}",
                 "" if np.isnan(rv) else f"{rv:.6f}"]
                for i, (pv, rv) in enumerate(zip(p_prof.values, r_prof.values))]
        _write_csv(out / f"profile_{axis.lower()}.csv",
                   ["index", "pred_mean_m", "ref_mean_m"], rows)
        plots.plot_profiles(p_prof, r_prof, out / f"profile_{axis.lower()}.svg",
                            correlation=corr)
        written += [f"profile_{axis.lower()}.csv", f"profile_{axis.lower()}.svg"]

    m = pred.valid_mask() & ref.valid_mask()
    plots.plot_scatter_density(ref.values[m], pred.values[m],
                               out / "scatter_heights.svg")
    written.append("scatter_heights.svg")

    if args.parcels:
        parcels = scenegen.read_parcels_json(args.parcels, (ref.height, ref.width))
        pred_trees = forestry.detect_trees(pred, cfg.detect_radius_m,
                                           cfg.detect_min_height_m)
        ref_trees = forestry.detect_trees(ref, cfg.detect_radius_m,
                                          cfg.detect_min_height_m)
        rows, ref_means, pred_means, species = [], [], [], []
        for parcel in parcels:
            agg_p = forestry.parcel_agb(parcel, forestry.trees_in_parcel(parcel, pred_trees))
            agg_r = forestry.parcel_agb(parcel, forestry.trees_in_parcel(parcel, ref_trees))
            rows.append([parcel.id, agg_p.species, agg_p.stand_age,
                         agg_r.count, agg_p.count,
                         "" if agg_r.mean_kg is None else f"{agg_r.mean_kg:.4f}",
                         "" if agg_p.mean_kg is None else f"{agg_p.mean_kg:.4f}",
                         f"{agg_r.total_kg:.4f}", f"{agg_p.total_kg:.4f}"])
            if agg_r.mean_kg is not None and agg_p.mean_kg is not None:
                ref_means.append(agg_r.mean_kg)
                pred_means.append(agg_p.mean_kg)
                species.append(agg_p.species)
        _write_csv(out / "agb_report.csv",
                   ["parcel_id", "species", "age", "count_ref", "count_pred",
                    "mean_kg_ref", "mean_kg_pred", "total_kg_ref", "total_kg_pred"],
                   rows)
        plots.plot_agb_scatter(ref_means, pred_means, species, out / "agb_scatter.svg")
        written += ["agb_report.csv", "agb_scatter.svg"]

    for log_arg, name in ((args.enhancer_log, "enhancer"), (args.head_log, "head")):
        if log_arg:
            with open(log_arg, newline="") as fh:
                rows = list(csv.DictReader(fh))
            xcol = "step" if name == "enhancer" else "epoch"
            plots.plot_training_curve([float(r[xcol]) for r in rows],
                                      [float(r["loss"]) for r in rows],
                                      out / f"training_curve_{name}.svg",
                                      xlabel=xcol, title=f"{name} training loss")
            written.append(f"training_curve_{name}.svg")

    return {"command": "report", "out": str(out), "written": written,
            **{k: v for k, v in summary_metrics.items()}}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, default=None, help="override config seed")
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="canopyhm",
                     description="canopy height mapping and plantation analytics")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic plantation scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common],
                       help="tile an RGB image and extract low-res features")
    p.add_argument("--rgb", required=True, help="RGB tile file (.ftr, stride 1)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-enhancer", parents=[common],
                       help="fit the self-supervised feature enhancer")
    p.add_argument("--rgb", required=True)
    p.set_defaults(func=cmd_train_enhancer)

    p = sub.add_parser("enhance", parents=[common],
                       help="upsample low-res feature tiles")
    p.add_argument("--features", required=True, help="directory with lf tiles + tiles.json")
    p.add_argument("--params", required=True, help="enhancer parameter file")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("train-head", parents=[common],
                       help="fit the height estimator on reference CHM tiles")
    p.add_argument("--features", required=True, help="directory with hf tiles + tiles.json")
    p.add_argument("--ref", required=True, help="reference CHM raster")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("infer", parents=[common], help="predict CHM tiles + mosaic")
    p.add_argument("--features", required=True)
    p.add_argument("--head", required=True, help="head parameter file")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="pixel-wise CHM metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--det-r2", action="store_true",
                   help="also report the coefficient of determination")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", parents=[common], help="axis profiles (+SVG)")
    p.add_argument("--chm", required=True)
    p.add_argument("--ref", default=None)
    p.add_argument("--axis", choices=["X", "Y", "both"], default="both")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("detect", parents=[common], help="local-maxima tree detection")
    p.add_argument("--chm", required=True)
    p.add_argument("--radius-m", type=float, default=None)
    p.add_argument("--min-height-m", type=float, default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("agb", parents=[common], help="per-parcel AGB aggregation")
    p.add_argument("--trees", required=True, help="detected trees CSV")
    p.add_argument("--parcels", required=True, help="parcels JSON")
    p.add_argument("--raster", required=True, help="raster defining the grid shape")
    p.set_defaults(func=cmd_agb)

    p = sub.add_parser("growth", parents=[common], help="per-species growth rates")
    p.add_argument("--series", required=True,
                   help="CSV with columns species,year,mean_kg")
    p.set_defaults(func=cmd_growth)

    p = sub.add_parser("report", parents=[common],
                       help="figures + delimited evaluation report")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--parcels", default=None)
    p.add_argument("--enhancer-log", default=None)
    p.add_argument("--head-log", default=None)
    p.add_argument("--det-r2", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _CliInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        summary = args.func(args)
    except (_CliInputError, FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
