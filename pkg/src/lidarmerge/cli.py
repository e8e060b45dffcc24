"""Command-line pipelines over the library modules.

Every subcommand produces machine-readable CSV/JSON artifacts that are
byte-identical across runs and worker-thread counts; errors exit nonzero
with the failing module and file in the message.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from functools import reduce
from pathlib import Path

import numpy as np

from . import dataspace, fileio, geometry, losses, metrics, panoptic
from .config import ENV_CONFIG, load_tool_config
from .errors import LidarMergeError, ConfigError, InvalidInputError
from .labelspace import load_label_space, remap_labels

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def _read_cloud(path: str, fmt: str) -> geometry.PointCloud:
    if fmt == "kitti":
        return fileio.read_kitti_bin(path)
    if fmt == "nuscenes":
        return fileio.read_nuscenes_bin(path)
    raise InvalidInputError(f"unknown cloud format {fmt!r}")


def _write_text(path: str, text: str) -> None:
    Path(path).write_text(text)


def _write_json(path: str, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _percent(x) -> float | None:
    """Presentation rounding: fraction -> percent with 4 decimals."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return round(float(x) * 100.0, 4)


def _round4(x) -> float | None:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return round(float(x), 4)


def _chunks(n: int, parts: int) -> list[slice]:
    parts = max(1, min(parts, n)) if n else 1
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_project(args) -> int:
    cloud = _read_cloud(args.cloud, args.format)
    cams = geometry.parse_calibration(args.calib)
    pairs = geometry.pair_points_pixels(cloud, cams)
    projections = [geometry.project_points(cloud, cam) for cam in cams]

    lines = ["point_index,camera_index,u,v,depth"]
    for k in range(len(pairs)):
        point = int(pairs.point_indices[k])
        cam = int(pairs.camera_indices[k])
        depth = float(projections[cam].depth[point])
        lines.append(f"{point},{cam},{int(pairs.pixel_coords[k, 0])},"
                     f"{int(pairs.pixel_coords[k, 1])},{depth!r}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_voxelize(args) -> int:
    cloud = _read_cloud(args.cloud, args.format)
    voxel = args.voxel_size if len(args.voxel_size) == 3 else args.voxel_size * 3
    if len(voxel) != 3:
        raise InvalidInputError("--voxel-size takes 1 or 3 values")
    grid = dataspace.voxelize(cloud, voxel)
    sizes = grid.cell_sizes()
    lines = ["cell_x,cell_y,cell_z,count"]
    for i in range(grid.num_cells):
        cx, cy, cz = (int(c) for c in grid.cell_ids[i])
        lines.append(f"{cx},{cy},{cz},{int(sizes[i])}")
    _write_text(args.out, "\n".join(lines) + "\n")
    if args.downsample_out:
        fileio.write_kitti_bin(dataspace.downsample_one_per_voxel(grid, cloud),
                               args.downsample_out)
    return 0


def cmd_stats(args) -> int:
    cloud = _read_cloud(args.cloud, args.format)
    semantic, _ = fileio.read_kitti_label(args.labels)
    if len(semantic) != len(cloud):
        raise InvalidInputError(
            f"{args.labels} has {len(semantic)} labels for {len(cloud)} points")
    cloud = geometry.PointCloud(coords=cloud.coords, intensity=cloud.intensity,
                                semantic=semantic)

    def shard_hist(sl: slice):
        shard = geometry.PointCloud(coords=cloud.coords[sl], semantic=cloud.semantic[sl])
        return dataspace.range_class_histogram(shard, args.bin_width, args.max_range)

    slices = _chunks(len(cloud), args.threads)
    if args.threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            partials = list(pool.map(shard_hist, slices))
    else:
        partials = [shard_hist(sl) for sl in slices]

    merged: dict[int, np.ndarray] = {}
    for part in partials:
        for cls, counts in part.items():
            merged[cls] = merged.get(cls, 0) + counts

    lines = ["class,bin_lo,bin_hi,count"]
    for cls in sorted(merged):
        counts = merged[cls]
        for b, count in enumerate(counts):
            lo = b * args.bin_width
            hi = min((b + 1) * args.bin_width, args.max_range)
            lines.append(f"{cls},{lo:.10g},{hi:.10g},{int(count)}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_remap(args) -> int:
    space, _ = load_label_space(args.space)
    semantic, instance = fileio.read_kitti_label(args.labels)
    unified = remap_labels(semantic, space, args.dataset)
    fileio.write_kitti_label(unified, instance, args.out)
    return 0


def _int_tensor(arr: np.ndarray, name: str) -> np.ndarray:
    rounded = np.rint(arr)
    if np.abs(arr - rounded).max(initial=0.0) > 1e-6:
        raise InvalidInputError(f"{name} tensor does not hold integral values")
    return rounded.astype(np.int64)


def _loss_from_spec(spec: dict, base_dir: Path, cfg) -> losses.LossResult:
    kind = spec.get("kind")
    params = spec.get("params", {})
    if kind == "total":
        return losses.total_objective({k: float(v) for k, v in params.get("parts", {}).items()})
    inputs = {name: fileio.read_tensor_file(base_dir / rel).astype(float)
              for name, rel in spec.get("inputs", {}).items()}
    return _loss_from_arrays(kind, inputs, params, cfg)


_GRADCHECK_STEP = {"lovasz_softmax": 2e-7}


def cmd_losses(args) -> int:
    cfg = load_tool_config(args.config)
    spec_path = Path(args.spec)
    with open(spec_path, "rb") as fh:
        spec = tomllib.load(fh)
    base_dir = spec_path.parent
    for override in args.inputs or []:
        name, sep, rel = override.partition("=")
        if not sep:
            raise InvalidInputError(f"--inputs entries are name=path, got {override!r}")
        spec.setdefault("inputs", {})[name] = rel
    if args.normalize_embeddings is not None:
        spec.setdefault("params", {})["normalize_embeddings"] = args.normalize_embeddings

    result = _loss_from_spec(spec, base_dir, cfg)
    report = {
        "kind": spec.get("kind"),
        "value": result.value,
        "components": {k: v for k, v in sorted(result.components.items())},
    }

    if args.grad_check:
        h = float(spec.get("params", {}).get("grad_check_step",
                                             _GRADCHECK_STEP.get(spec.get("kind"), 1e-5)))
        checks = {}
        inputs = spec.get("inputs", {})
        for name, grad in sorted(result.gradients.items()):
            if name not in inputs:
                continue
            x0 = fileio.read_tensor_file(base_dir / inputs[name]).astype(float)
            fd = losses.central_difference_gradient(
                lambda x, _name=name: _loss_value_with_override(spec, base_dir, cfg, _name, x),
                x0, h=h)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(grad)), 1e-8)
            max_rel = float((np.abs(fd - grad) / denom).max(initial=0.0))
            checks[name] = {"max_relative_error": max_rel, "ok": max_rel < 1e-4}
        report["grad_check"] = checks

    _write_json(args.out, report)
    return 0


def _loss_value_with_override(spec: dict, base_dir: Path, cfg, name: str,
                              value: np.ndarray) -> float:
    """Evaluate the configured loss with one named input replaced."""
    inputs = {k: (value if k == name else fileio.read_tensor_file(base_dir / rel).astype(float))
              for k, rel in spec.get("inputs", {}).items()}
    return _loss_from_arrays(spec.get("kind"), inputs, spec.get("params", {}), cfg).value


def _loss_from_arrays(kind: str, inputs: dict[str, np.ndarray], params: dict, cfg):
    tau = float(params.get("tau", cfg.tau))
    normalize = bool(params.get("normalize_embeddings", cfg.normalize_embeddings))
    ignore_id = int(params.get("ignore_id", -1))
    if kind == "cosine_alignment":
        return losses.cosine_alignment_loss(inputs["a"], inputs["b"])
    if kind == "text_contrastive":
        mask = inputs["mask"] != 0 if "mask" in inputs \
            else np.ones(inputs["text"].shape[0], dtype=bool)
        return losses.text_contrastive_loss(inputs["items"], inputs["text"],
                                            _int_tensor(inputs["classes"], "classes"),
                                            mask, tau=tau, normalize=normalize)
    if kind == "label_alignment":
        mask = inputs["mask"] != 0 if "mask" in inputs \
            else np.ones(inputs["text"].shape[0], dtype=bool)
        return losses.label_alignment_loss(
            inputs["point_logits"], inputs["pixel_logits"], inputs["point_feats"],
            inputs["pixel_feats"], inputs["text"],
            _int_tensor(inputs["classes"], "classes"), mask,
            tau=tau, normalize=normalize)
    if kind == "cross_entropy":
        return losses.cross_entropy_loss(inputs["logits"],
                                         _int_tensor(inputs["targets"], "targets"), ignore_id)
    if kind == "lovasz_softmax":
        return losses.lovasz_softmax_loss(inputs["probs"],
                                          _int_tensor(inputs["targets"], "targets"), ignore_id)
    if kind == "l1_offset":
        return losses.l1_offset_loss(inputs["pred"], inputs["target"], inputs["mask"] != 0)
    raise ConfigError(f"unknown loss kind {kind!r}")


def cmd_cluster(args) -> int:
    cfg = load_tool_config(args.config)
    cloud = _read_cloud(args.coords, args.format)
    offsets = fileio.read_tensor_file(args.offsets).astype(float)
    semantic, _ = fileio.read_kitti_label(args.semantic)
    n = len(cloud)
    if offsets.shape != (n, 3):
        raise InvalidInputError(f"offsets must be ({n}, 3), got {offsets.shape}")
    if semantic.shape[0] != n:
        raise InvalidInputError(f"{args.semantic} has {semantic.shape[0]} labels for {n} points")

    thing_ids = _parse_int_list(args.things)
    size = int(max([semantic.max(initial=0)] + thing_ids)) + 1
    thing_mask = np.zeros(size, dtype=bool)
    thing_mask[thing_ids] = True

    instance_cfg = panoptic.InstanceConfig(
        bandwidth=args.bandwidth,
        max_iterations=args.max_iterations if args.max_iterations is not None
        else cfg.cluster.max_iterations,
        shift_tolerance=args.shift_tolerance if args.shift_tolerance is not None
        else cfg.cluster.shift_tolerance,
        mode_merge_radius=cfg.cluster.mode_merge_radius,
        min_cluster_size=args.min_cluster_size if args.min_cluster_size is not None
        else cfg.cluster.min_cluster_size,
    )
    thing_idx = panoptic.filter_thing_points(semantic, thing_mask)
    shifted = panoptic.shift_points(cloud.coords[thing_idx], offsets[thing_idx])
    cluster_ids = panoptic.mean_shift_cluster(shifted, instance_cfg)
    labels = panoptic.assemble_panoptic(semantic, thing_idx, cluster_ids, thing_mask)
    if labels.instance.max(initial=0) > 0xFFFF:
        raise InvalidInputError("more than 65535 instances cannot be packed")
    fileio.write_kitti_label(labels.semantic, labels.instance, args.out)
    return 0


def _paired_files(gt: list[str], pred: list[str]) -> list[tuple[str, str]]:
    if len(gt) != len(pred):
        raise InvalidInputError(f"{len(gt)} gt files vs {len(pred)} pred files")
    return list(zip(gt, pred))


def cmd_eval_sem(args) -> int:
    tasks = []
    for gt_path, pred_path in _paired_files(args.gt, args.pred):
        gt_sem, _ = fileio.read_kitti_label(gt_path)
        pred_sem, _ = fileio.read_kitti_label(pred_path)
        if gt_sem.shape != pred_sem.shape:
            raise InvalidInputError(f"{gt_path} and {pred_path} differ in length")
        for sl in _chunks(gt_sem.shape[0], args.threads):
            tasks.append((gt_sem[sl], pred_sem[sl]))

    def accumulate(task):
        gt_arr, pred_arr = task
        return metrics.accumulate_confusion(gt_arr, pred_arr, args.classes, args.ignore)

    if args.threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            parts = list(pool.map(accumulate, tasks))
    else:
        parts = [accumulate(t) for t in tasks]
    cm = reduce(lambda a, b: a + b, parts,
                metrics.ConfusionMatrix(args.classes, args.ignore))
    scores = metrics.semantic_scores(cm)

    report = {
        "num_classes": args.classes,
        "ignore_id": args.ignore,
        "points_evaluated": cm.total,
        "miou_percent": _percent(scores.miou),
        "macc_percent": _percent(scores.macc),
        "per_class": [
            {
                "class": c,
                "iou_percent": _percent(scores.per_class_iou[c]),
                "acc_percent": _percent(scores.per_class_acc[c]),
                "present": bool(scores.present[c]),
            }
            for c in range(args.classes)
        ],
    }
    _write_json(args.out, report)
    return 0


def cmd_eval_pan(args) -> int:
    thing_ids = _parse_int_list(args.things)
    thing_mask = np.zeros(args.classes, dtype=bool)
    for t in thing_ids:
        if not 0 <= t < args.classes:
            raise InvalidInputError(f"thing id {t} outside [0, {args.classes})")
        thing_mask[t] = True

    def evaluate(pair):
        gt_path, pred_path = pair
        gt_sem, gt_inst = fileio.read_kitti_label(gt_path)
        pred_sem, pred_inst = fileio.read_kitti_label(pred_path)
        gt_labels = panoptic.PanopticLabels(gt_sem, gt_inst)
        pred_labels = panoptic.PanopticLabels(pred_sem, pred_inst)
        stats = metrics.panoptic_match(gt_labels, pred_labels, args.classes, args.ignore)
        cm = metrics.accumulate_confusion(gt_sem, pred_sem, args.classes, args.ignore)
        return stats, cm

    pairs = _paired_files(args.gt, args.pred)
    if args.threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(evaluate, pairs))
    else:
        results = [evaluate(p) for p in pairs]

    stats = reduce(lambda a, b: a + b, (r[0] for r in results),
                   metrics.PanopticStats(args.classes))
    cm = reduce(lambda a, b: a + b, (r[1] for r in results),
                metrics.ConfusionMatrix(args.classes, args.ignore))
    sem = metrics.semantic_scores(cm)
    pan = metrics.panoptic_scores(stats, sem.per_class_iou, thing_mask)

    report = {
        "num_classes": args.classes,
        "ignore_id": args.ignore,
        "miou_percent": _percent(sem.miou),
        "pq_percent": _percent(pan.pq),
        "pq_dagger_percent": _percent(pan.pq_dagger),
        "sq_percent": _percent(pan.sq),
        "rq_percent": _percent(pan.rq),
        "things": {
            "pq_percent": _percent(pan.pq_things),
            "sq_percent": _percent(pan.sq_things),
            "rq_percent": _percent(pan.rq_things),
        },
        "stuff": {
            "pq_percent": _percent(pan.pq_stuff),
            "sq_percent": _percent(pan.sq_stuff),
            "rq_percent": _percent(pan.rq_stuff),
        },
        "per_class": [
            {
                "class": c,
                "thing": bool(thing_mask[c]),
                "present": bool(pan.present[c]),
                "pq_percent": _percent(pan.per_class_pq[c]) if pan.present[c] else None,
                "sq_percent": _percent(pan.per_class_sq[c]) if pan.present[c] else None,
                "rq_percent": _percent(pan.per_class_rq[c]) if pan.present[c] else None,
                "tp": int(stats.tp[c]),
                "fp": int(stats.fp[c]),
                "fn": int(stats.fn[c]),
            }
            for c in range(args.classes)
        ],
    }
    _write_json(args.out, report)
    return 0


def _table_from_csvs(table_path: str, baseline_path: str) -> metrics.RobustnessTable:
    cand_entries, clean = fileio.read_robustness_csv(table_path)
    base_entries, _ = fileio.read_robustness_csv(baseline_path)
    if clean is None:
        raise InvalidInputError(f"{table_path}: missing 'clean,<miou>' row")
    corruptions = []
    for corruption, _severity in cand_entries:
        if corruption not in corruptions:
            corruptions.append(corruption)
    severities = sorted({s for _, s in cand_entries})
    candidate = np.empty((len(corruptions), len(severities)))
    baseline = np.empty_like(candidate)
    for i, corruption in enumerate(corruptions):
        for j, severity in enumerate(severities):
            key = (corruption, severity)
            if key not in cand_entries:
                raise InvalidInputError(f"{table_path}: missing entry for {key}")
            if key not in base_entries:
                raise InvalidInputError(f"{baseline_path}: missing entry for {key}")
            candidate[i, j] = cand_entries[key]
            baseline[i, j] = base_entries[key]
    return metrics.RobustnessTable(corruptions, candidate, baseline, clean)


def cmd_eval_robust(args) -> int:
    table = _table_from_csvs(args.table, args.baseline)
    scores = metrics.robustness_scores(table)
    report = {
        "clean_miou_percent": _round4(table.clean * 100.0),
        "mce_percent": _round4(scores.mce),
        "mrr_percent": _round4(scores.mrr),
        "per_corruption": [
            {
                "corruption": name,
                "ce_percent": _round4(scores.ce[i]),
                "rr_percent": _round4(scores.rr[i]),
            }
            for i, name in enumerate(scores.corruptions)
        ],
    }
    _write_json(args.out, report)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarmerge",
        description="Deterministic pipelines for multi-dataset LiDAR segmentation "
                    "tooling: projection, rasterization, label unification, loss "
                    "kernels, instance clustering, and evaluation.",
        epilog=f"Set ${ENV_CONFIG} to point at a config TOML used when --config "
               "is omitted; the packaged defaults apply otherwise.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=False, threads=False, fmt=False):
        if config:
            p.add_argument("--config", default=None, help="tool config TOML")
        if threads:
            p.add_argument("--threads", type=int, default=1,
                           help="worker threads (results are identical for any count)")
        if fmt:
            p.add_argument("--format", choices=["kitti", "nuscenes"], default="kitti",
                           help="point cloud record layout")

    p = sub.add_parser("project", help="project a cloud into calibrated cameras")
    p.add_argument("--cloud", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", required=True)
    add_common(p, threads=True, fmt=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("voxelize", help="rasterize a cloud into voxel cells")
    p.add_argument("--cloud", required=True)
    p.add_argument("--voxel-size", type=float, nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--downsample-out", default=None,
                   help="also write a one-point-per-voxel cloud")
    add_common(p, threads=True, fmt=True)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("stats", help="per-class radial distribution histogram")
    p.add_argument("--cloud", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bin-width", type=float, default=0.5)
    p.add_argument("--max-range", type=float, default=50.0)
    p.add_argument("--out", required=True)
    add_common(p, threads=True, fmt=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("remap", help="remap dataset labels into the unified space")
    p.add_argument("--space", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    add_common(p, threads=True)
    p.set_defaults(func=cmd_remap)

    p = sub.add_parser("losses", help="evaluate a loss kernel on tensor files")
    p.add_argument("--spec", required=True, help="loss spec TOML")
    p.add_argument("--inputs", nargs="+", default=None, metavar="NAME=PATH",
                   help="override/extend the spec's [inputs] table "
                        "(paths relative to the spec file)")
    p.add_argument("--grad-check", action="store_true",
                   help="verify analytic gradients against central differences")
    p.add_argument("--normalize-embeddings", action=argparse.BooleanOptionalAction,
                   default=None,
                   help="L2-normalize items/text before scalar products in the "
                        "contrastive kernels (default: config value, on)")
    p.add_argument("--out", required=True)
    add_common(p, config=True, threads=True)
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("cluster", help="mean-shift instance extraction")
    p.add_argument("--coords", required=True)
    p.add_argument("--offsets", required=True, help="N x 3 tensor file")
    p.add_argument("--semantic", required=True, help="packed label file")
    p.add_argument("--things", required=True, help="comma-separated thing class ids")
    p.add_argument("--bandwidth", type=float, required=True)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--shift-tolerance", type=float, default=None)
    p.add_argument("--min-cluster-size", type=int, default=None)
    p.add_argument("--out", required=True)
    add_common(p, config=True, threads=True, fmt=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval-sem", help="semantic segmentation scores")
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--ignore", type=int, default=65535)
    p.add_argument("--out", required=True)
    add_common(p, threads=True)
    p.set_defaults(func=cmd_eval_sem)

    p = sub.add_parser("eval-pan", help="panoptic segmentation scores")
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--ignore", type=int, default=65535)
    p.add_argument("--things", required=True, help="comma-separated thing class ids")
    p.add_argument("--out", required=True)
    add_common(p, threads=True)
    p.set_defaults(func=cmd_eval_pan)

    p = sub.add_parser("eval-robust", help="corruption error and resilience rate")
    p.add_argument("--table", required=True, help="candidate robustness CSV")
    p.add_argument("--baseline", required=True, help="baseline robustness CSV")
    p.add_argument("--out", required=True)
    add_common(p, threads=True)
    p.set_defaults(func=cmd_eval_robust)

    return parser


def run_pipeline(argv: list[str]) -> int:
    """Parse and dispatch one CLI invocation; returns the exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def main(argv: list[str] | None = None) -> int:
    try:
        return run_pipeline(sys.argv[1:] if argv is None else argv)
    except LidarMergeError as exc:
        print(f"lidarmerge: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"lidarmerge: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
