"""Command-line interface.

Subcommands: ``synth`` (generate a synthetic multi-view dataset),
``annotate`` (run the instance annotation pipeline), ``finetune`` (IG or
MVIG fine-tuning of the toy parser), ``predict`` (run a trained parser over
a dataset), ``evaluate`` (overlap-stratified metric reports) and ``sweep``
(view-count / beta ablations). Exit codes: 0 success, 1 runtime failure,
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import annotation, dataset, metrics, synth, toyparser
from .config import ConfigError, RunConfig, load_config, save_config

VIEW_SWEEP = (2, 4, 8)
BETA_SWEEP = (0.20, 0.30, 0.40)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for attr, field in (("people", "n_people"), ("overlap", "overlap_target"),
                        ("size", "image_size"), ("frames", "frames"),
                        ("seed", "rng_seed"), ("beta", "beta"),
                        ("lam", "lam"), ("points", "n_points"),
                        ("lr", "learning_rate"), ("batch", "batch_size"),
                        ("epochs", "max_epochs")):
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = value
    if getattr(args, "views", None) is not None:
        # synth interprets --views as camera count, finetune as loss views
        overrides["cameras" if args.cmd == "synth" else "n_views"] = args.views
    if overrides:
        d = cfg.to_dict()
        d.update({k if k != "lam" else "lambda": v for k, v in overrides.items()})
        cfg = RunConfig.from_dict(d)
    return cfg


def _map_frames(frames, worker_fn, n_workers: int):
    """Run one task per frame; results return in frame order regardless of
    scheduling, so output bytes are independent of the worker count."""
    if n_workers <= 1:
        return [worker_fn(f) for f in frames]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker_fn, frames))


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out = args.output
    os.makedirs(out, exist_ok=True)
    frames = [dataset.frame_name(i) for i in range(cfg.frames)]

    def build(frame):
        idx = int(frame)
        scene = synth.generate_scene(
            cfg.n_people, cfg.cameras, cfg.overlap_target,
            image_size=cfg.image_size, seed=[cfg.rng_seed, idx])
        dataset.save_scene(out, scene, frame)
        return scene

    scenes = _map_frames(frames, build, args.workers)
    dataset.save_calibration(out, scenes[0].calibrations)
    meta = cfg.to_dict()
    meta["overlap_measured"] = {f: s.overlap for f, s in zip(frames, scenes)}
    with open(os.path.join(out, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {len(frames)} frames x {cfg.cameras} views to {out}")
    return 0


def _make_segmenter(spec_str: str, cfg: RunConfig):
    if spec_str == "baseline":
        return annotation.BaselineSegmenter(cfg.tau_c, cfg.tau_d, cfg.tau_m)
    if spec_str.startswith("external:"):
        return annotation.ExternalProcessSegmenter(spec_str[len("external:"):])
    raise ConfigError(f"unknown segmenter {spec_str!r}")


def cmd_annotate(args) -> int:
    cfg = _load_run_config(args)
    root = args.dataset
    calibs = dataset.load_calibration(root)
    frames = dataset.list_frames(root)
    if not frames:
        print("dataset has no frames", file=sys.stderr)
        return 1
    local = threading.local()

    def get_segmenter():
        if not hasattr(local, "seg"):
            local.seg = _make_segmenter(args.segmenter, cfg)
        return local.seg

    def work(frame):
        try:
            data = dataset.load_frame(root, frame, calibs)
        except (OSError, KeyError, ValueError) as exc:
            return frame, f"load failed: {exc}"
        fuse_views = [(v.depth, v.calib, v.rgb) for v in data.views]
        cloud = geometry_fuse(fuse_views, cfg)
        cloud = annotation.label_points_by_nearest_joint(cloud, data.skeletons)
        seg = get_segmenter()
        for view in data.views:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ann = annotation.annotate_view(
                    cloud, data.skeletons, view.rgb, view.depth, view.calib, seg,
                    beta=cfg.beta, density=cfg.density, k_min=cfg.k_min,
                    k_max=cfg.k_max, rng_seed=cfg.rng_seed)
            provenance = {
                "frame": frame,
                "view": view.calib.view_id,
                "order": ann.order,
                "skipped": ann.skipped,
                "seeds": {str(i): [{"u": u, "v": v, "tag": t}
                                   for (u, v), t in zip(s.seeds, s.tags)]
                          for i, s in sorted(ann.seeds.items())},
                "parameters": {"beta": cfg.beta, "density": cfg.density,
                               "k_min": cfg.k_min, "k_max": cfg.k_max,
                               "tau_c": cfg.tau_c, "tau_d": cfg.tau_d,
                               "tau_m": cfg.tau_m, "rng_seed": cfg.rng_seed,
                               "segmenter": args.segmenter},
            }
            dataset.save_instance_masks(root, view.calib.view_id, frame,
                                        ann.masks, provenance)
        return frame, None

    results = _map_frames(frames, work, args.workers)
    failures = [(f, err) for f, err in results if err]
    for f, err in failures:
        print(f"frame {f}: {err}", file=sys.stderr)
    if len(failures) == len(frames):
        return 1
    print(f"annotated {len(frames) - len(failures)}/{len(frames)} frames in {root}")
    return 0


def geometry_fuse(fuse_views, cfg: RunConfig):
    from .geometry import fuse_and_clean
    return fuse_and_clean(fuse_views, k=cfg.outlier_k, std_ratio=cfg.std_ratio,
                          stride=cfg.fuse_stride)


def _load_train_scenes(root, cfg: RunConfig, masks_source: str):
    calibs = dataset.load_calibration(root)
    scenes = []
    for frame in dataset.list_frames(root):
        data = dataset.load_frame(root, frame, calibs)
        scenes.append(dataset.build_train_scene(
            data, masks_source=masks_source, mask_root=root,
            fuse_stride=cfg.fuse_stride, outlier_k=cfg.outlier_k,
            std_ratio=cfg.std_ratio))
    return scenes


def _resolve_masks_source(args, root) -> str:
    if args.masks != "auto":
        return args.masks
    return "annotated" if os.path.isdir(os.path.join(root, "masks")) else "gt"


def history_csv(path, history, mode: str) -> None:
    cols = ["epoch", "l_fg", "l_miou"]
    if mode == "mvig":
        cols += ["l_identity", "l_part"]
    cols.append("total")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for entry in history:
            writer.writerow([entry["epoch"]] +
                            [f"{entry[c]:.10g}" for c in cols[1:]])


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    root = args.dataset
    out = args.out or root
    os.makedirs(out, exist_ok=True)
    masks_source = _resolve_masks_source(args, root)
    scenes = _load_train_scenes(root, cfg, masks_source)
    if args.init:
        parser = toyparser.load_weights(args.init)
    else:
        parser = toyparser.ToyParser.zeros(cfg.labels().names)
    trained, history = toyparser.finetune(parser, scenes, cfg.finetune_config(),
                                          mode=args.mode)
    weights_path = os.path.join(out, f"weights_{args.mode}.bin")
    toyparser.save_weights(weights_path, trained)
    csv_path = os.path.join(out, f"history_{args.mode}.csv")
    history_csv(csv_path, history, args.mode)
    save_config(os.path.join(out, f"config_{args.mode}.json"), cfg)
    print(f"wrote {weights_path} and {csv_path} "
          f"(masks: {masks_source}, final loss {history[-1]['total']:.6g})")
    return 0


def _predict_dataset(parser, root, out_root):
    calibs = dataset.load_calibration(root)
    skel_cache = {}
    count = 0
    for frame in dataset.list_frames(root):
        data = dataset.load_frame(root, frame, calibs)
        skel = {s.instance_id: s for s in data.skeletons}
        skel_cache[frame] = skel
        for view in data.views:
            masks = dataset.masks_from_gt(view)
            regions = []
            for inst in sorted(masks):
                reg = toyparser.region_from_mask(inst, masks[inst], skel[inst])
                if reg is not None:
                    regions.append(reg)
            part_map, inst_masks, confs, _ = toyparser.predict_view(
                parser, view.rgb, view.depth, view.calib, regions)
            owner = np.zeros(view.depth.shape, np.int64)
            for inst, m in sorted(inst_masks.items()):
                owner[m != 0] = inst
            dataset.save_predictions(out_root, view.calib.view_id, frame,
                                     part_map, owner, confs)
            count += 1
    return count


def cmd_predict(args) -> int:
    parser = toyparser.load_weights(args.weights)
    out = args.out or args.dataset
    n = _predict_dataset(parser, args.dataset, out)
    print(f"wrote predictions for {n} images under {os.path.join(out, 'pred')}")
    return 0


def _image_eval_from_frame(view, pred_parts, pred_inst, confs) -> metrics.ImageEval:
    gt_instances = []
    for inst in np.unique(view.gt_instance):
        if inst == 0:
            continue
        mask = view.gt_instance == inst
        parts = np.where(mask, view.gt_part, 0)
        gt_instances.append((mask.astype(np.uint8), parts))
    pred_instances = []
    for inst in np.unique(pred_inst):
        if inst == 0:
            continue
        mask = pred_inst == inst
        parts = np.where(mask, pred_parts, 0)
        pred_instances.append((confs.get(int(inst), 0.0), mask.astype(np.uint8), parts))
    return metrics.ImageEval(pred_parts=pred_parts, gt_parts=view.gt_part,
                             pred_instances=pred_instances, gt_instances=gt_instances)


def evaluate_predictions(pred_root, data_root, labels: metrics.LabelSpace):
    """Collect ImageEvals plus per-image overlap degrees; returns
    (reports dict, degrees, missing list)."""
    calibs = dataset.load_calibration(data_root)
    images = []
    degrees = []
    missing = []
    for frame in dataset.list_frames(data_root):
        data = dataset.load_frame(data_root, frame, calibs)
        for view in data.views:
            if view.gt_instance is None or view.gt_part is None:
                missing.append((frame, view.calib.view_id, "no ground truth"))
                continue
            if not dataset.has_predictions(pred_root, view.calib.view_id, frame):
                missing.append((frame, view.calib.view_id, "no prediction"))
                continue
            parts, inst, confs = dataset.load_predictions(
                pred_root, view.calib.view_id, frame)
            images.append(_image_eval_from_frame(view, parts, inst, confs))
            boxes = list(metrics.instance_boxes(view.gt_instance).values())
            degrees.append(metrics.overlap_degree(boxes))
    partition = metrics.OverlapPartition(np.asarray(degrees, dtype=np.float64))
    reports = {}
    for name, idx in partition.subsets().items():
        reports[name] = metrics.evaluate_images([images[i] for i in idx], labels)
    return reports, partition.degrees, missing


def cmd_evaluate(args) -> int:
    labels = metrics.LabelSpace.from_dict(
        json.load(open(args.labelspace))) if args.labelspace else metrics.LabelSpace()
    reports, degrees, missing = evaluate_predictions(args.predictions, args.dataset,
                                                     labels)
    for frame, view, why in missing:
        print(f"missing: frame {frame} view {view}: {why}", file=sys.stderr)
    total = len(degrees) + len(missing)
    out = args.out or args.predictions
    os.makedirs(out, exist_ok=True)
    payload = {
        "conventions": metrics.CONVENTIONS,
        "overlap_degrees": [float(d) for d in degrees],
        "subsets": {name: rep.as_dict() for name, rep in reports.items()},
    }
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    table = metrics.format_report_table(reports)
    with open(os.path.join(out, "metrics.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    if total and len(missing) / total > 0.10:
        print(f"{len(missing)}/{total} images missing predictions", file=sys.stderr)
        return 1
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    root = args.dataset
    eval_root = args.eval_dataset or root
    out = args.out or os.path.join(root, "sweep")
    os.makedirs(out, exist_ok=True)
    masks_source = _resolve_masks_source(args, root)
    scenes = _load_train_scenes(root, cfg, masks_source)
    labels = cfg.labels()

    if args.axis == "views":
        settings = [("views", v, replace(cfg, n_views=v)) for v in VIEW_SWEEP]
    else:
        settings = [("beta", b, replace(cfg, beta=b)) for b in BETA_SWEEP]

    rows = []
    for axis, value, sub_cfg in settings:
        if args.init:
            parser = toyparser.load_weights(args.init)
        else:
            parser = toyparser.ToyParser.zeros(cfg.labels().names)
        trained, _ = toyparser.finetune(parser, scenes, sub_cfg.finetune_config(),
                                        mode="mvig")
        run_dir = os.path.join(out, f"{axis}_{value:g}")
        os.makedirs(run_dir, exist_ok=True)
        toyparser.save_weights(os.path.join(run_dir, "weights.bin"), trained)
        _predict_dataset(trained, eval_root, run_dir)
        reports, _, _ = evaluate_predictions(run_dir, eval_root, labels)
        rows.append((f"{value:g} {axis}",
                     {name: (rep.miou_p, rep.miou_h)
                      for name, rep in reports.items()}))

    subset_names = list(rows[0][1])
    header = ["setting"]
    for name in subset_names:
        header += [f"{name}:mIoU_p", f"{name}:mIoU_h"]
    lines = ["  ".join(header)]
    payload = {}
    for label, per_subset in rows:
        cells = [label]
        payload[label] = {}
        for name in subset_names:
            p, h = per_subset[name]
            cells += [f"{p:.4f}", f"{h:.4f}"]
            payload[label][name] = {"miou_p": p, "miou_h": h}
        lines.append("  ".join(cells))
    table = "\n".join(lines)
    with open(os.path.join(out, "ablation.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    print(table)
    return 0


def _positive_int(name):
    def parse(text):
        value = int(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvparse",
                                description="multi-view weakly supervised "
                                            "multi-human parsing toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    sp.add_argument("output")
    sp.add_argument("--config")
    sp.add_argument("--people", type=_positive_int("--people"))
    sp.add_argument("--views", type=_positive_int("--views"))
    sp.add_argument("--frames", type=_positive_int("--frames"))
    sp.add_argument("--overlap", type=float)
    sp.add_argument("--size", type=_positive_int("--size"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    ap = sub.add_parser("annotate", help="run the annotation pipeline")
    ap.add_argument("dataset")
    ap.add_argument("--config")
    ap.add_argument("--segmenter", default="baseline",
                    help="baseline or external:<command>")
    ap.add_argument("--beta", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.set_defaults(func=cmd_annotate)

    fp = sub.add_parser("finetune", help="fine-tune the toy parser")
    fp.add_argument("dataset")
    fp.add_argument("--config")
    fp.add_argument("--mode", choices=("ig", "mvig"), required=True)
    fp.add_argument("--views", type=_positive_int("--views"))
    fp.add_argument("--beta", type=float)
    fp.add_argument("--lambda", dest="lam", type=float)
    fp.add_argument("--points", type=_positive_int("--points"))
    fp.add_argument("--lr", type=float)
    fp.add_argument("--batch", type=_positive_int("--batch"))
    fp.add_argument("--epochs", type=_positive_int("--epochs"))
    fp.add_argument("--seed", type=int)
    fp.add_argument("--masks", choices=("auto", "gt", "annotated"), default="auto")
    fp.add_argument("--init", help="initial weights file")
    fp.add_argument("--out", help="output directory (default: dataset)")
    fp.set_defaults(func=cmd_finetune)

    pp = sub.add_parser("predict", help="run a trained parser over a dataset")
    pp.add_argument("dataset")
    pp.add_argument("--weights", required=True)
    pp.add_argument("--out", help="output root (default: dataset)")
    pp.set_defaults(func=cmd_predict)

    ep = sub.add_parser("evaluate", help="evaluate predictions against ground truth")
    ep.add_argument("predictions", help="root containing pred/<view>/...")
    ep.add_argument("dataset")
    ep.add_argument("--labelspace", help="label space JSON file")
    ep.add_argument("--out", help="report directory (default: predictions)")
    ep.set_defaults(func=cmd_evaluate)

    wp = sub.add_parser("sweep", help="view-count / beta ablation")
    wp.add_argument("dataset")
    wp.add_argument("--axis", choices=("views", "beta"), required=True)
    wp.add_argument("--config")
    wp.add_argument("--seed", type=int)
    wp.add_argument("--epochs", type=_positive_int("--epochs"))
    wp.add_argument("--masks", choices=("auto", "gt", "annotated"), default="auto")
    wp.add_argument("--init", help="initial weights file")
    wp.add_argument("--eval-dataset", help="held-out dataset (default: training)")
    wp.add_argument("--out")
    wp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except toyparser.FinetuneDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures -> exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
