"""On-disk dataset layout.

::

    root/
      calibration.json                 array of per-view pinhole records
      meta.json                        generator provenance
      views/<view>/rgb_<frame>.png     8-bit RGB
      views/<view>/depth_<frame>.png   16-bit grayscale, millimeters, 0 = invalid
      views/<view>/gtinst_<frame>.png  8-bit ground-truth instance ids (synthetic)
      views/<view>/gtpart_<frame>.png  8-bit ground-truth part ids (synthetic)
      skeletons/<frame>.json           per-instance named joints, meters
      masks/<view>/<frame>/instance_<k>.png   annotation output, 0/255
      masks/<view>/<frame>/provenance.json

Predictions use ``pred/<view>/parts_<frame>.png``, ``instances_<frame>.png``
and ``conf_<frame>.json`` under a separate root. All JSON is written with
sorted keys; PNG encoding is deterministic, so fixed seeds give
byte-identical trees.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .annotation import label_points_by_nearest_joint
from .geometry import CameraCalibration, fuse_and_clean
from .synth import Skeleton, SyntheticScene
from .toyparser import TrainScene

DEPTH_UNIT = 1000.0  # stored millimeters, held in meters


def frame_name(i: int) -> str:
    return f"{i:04d}"


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def save_rgb(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path)


def load_rgb(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_depth(path, depth_m) -> None:
    mm = np.clip(np.floor(np.asarray(depth_m) * DEPTH_UNIT + 0.5), 0, 65535)
    Image.fromarray(mm.astype("<u2"), "I;16").save(path)


def load_depth(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.uint16)
    return arr.astype(np.float64) / DEPTH_UNIT


def save_label_map(path, labels) -> None:
    arr = np.asarray(labels)
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("label map does not fit 8 bits")
    Image.fromarray(arr.astype(np.uint8), "L").save(path)


def load_label_map(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def save_mask(path, mask) -> None:
    Image.fromarray(((np.asarray(mask) != 0) * 255).astype(np.uint8), "L").save(path)


def load_mask(path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) != 0).astype(np.uint8)


def save_calibration(root, calibs) -> None:
    records = [{
        "view_id": c.view_id, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
        "rotation": c.rotation.tolist(), "translation": c.translation.tolist(),
        "width": c.width, "height": c.height,
    } for c in calibs]
    _write_json(os.path.join(root, "calibration.json"), records)


def load_calibration(root) -> list:
    records = _read_json(os.path.join(root, "calibration.json"))
    return [CameraCalibration(
        view_id=r["view_id"], fx=r["fx"], fy=r["fy"], cx=r["cx"], cy=r["cy"],
        rotation=np.array(r["rotation"]), translation=np.array(r["translation"]),
        width=r["width"], height=r["height"]) for r in records]


def save_skeletons(root, frame: str, skeletons) -> None:
    os.makedirs(os.path.join(root, "skeletons"), exist_ok=True)
    payload = {"instances": [
        {"instance_id": s.instance_id,
         "joints": {k: v.tolist() for k, v in sorted(s.joints.items())}}
        for s in sorted(skeletons, key=lambda s: s.instance_id)]}
    _write_json(os.path.join(root, "skeletons", f"{frame}.json"), payload)


def load_skeletons(root, frame: str) -> list:
    payload = _read_json(os.path.join(root, "skeletons", f"{frame}.json"))
    return [Skeleton(rec["instance_id"],
                     {k: np.array(v) for k, v in rec["joints"].items()})
            for rec in payload["instances"]]


def save_scene(root, scene: SyntheticScene, frame: str) -> None:
    """Write one rendered scene as one frame of the dataset."""
    for view, calib in zip(scene.views, scene.calibrations):
        vdir = os.path.join(root, "views", calib.view_id)
        os.makedirs(vdir, exist_ok=True)
        save_rgb(os.path.join(vdir, f"rgb_{frame}.png"), view.rgb)
        save_depth(os.path.join(vdir, f"depth_{frame}.png"), view.depth)
        save_label_map(os.path.join(vdir, f"gtinst_{frame}.png"), view.instance_mask)
        save_label_map(os.path.join(vdir, f"gtpart_{frame}.png"), view.part_mask)
    save_skeletons(root, frame, scene.skeletons)


def list_views(root) -> list:
    return sorted(os.listdir(os.path.join(root, "views")))


def list_frames(root) -> list:
    frames = set()
    for view in list_views(root):
        for name in os.listdir(os.path.join(root, "views", view)):
            if name.startswith("rgb_") and name.endswith(".png"):
                frames.add(name[4:-4])
    return sorted(frames)


@dataclass
class ViewRecord:
    calib: CameraCalibration
    rgb: np.ndarray
    depth: np.ndarray
    gt_instance: Optional[np.ndarray] = None
    gt_part: Optional[np.ndarray] = None


@dataclass
class FrameData:
    frame_id: str
    skeletons: list
    views: list  # ViewRecord, calibration order


def load_frame(root, frame: str, calibs=None) -> FrameData:
    calibs = calibs or load_calibration(root)
    views = []
    for calib in calibs:
        vdir = os.path.join(root, "views", calib.view_id)
        rec = ViewRecord(
            calib=calib,
            rgb=load_rgb(os.path.join(vdir, f"rgb_{frame}.png")),
            depth=load_depth(os.path.join(vdir, f"depth_{frame}.png")),
        )
        gtinst = os.path.join(vdir, f"gtinst_{frame}.png")
        if os.path.exists(gtinst):
            rec.gt_instance = load_label_map(gtinst)
        gtpart = os.path.join(vdir, f"gtpart_{frame}.png")
        if os.path.exists(gtpart):
            rec.gt_part = load_label_map(gtpart)
        views.append(rec)
    return FrameData(frame, load_skeletons(root, frame), views)


def mask_dir(root, view: str, frame: str) -> str:
    return os.path.join(root, "masks", view, frame)


def save_instance_masks(root, view: str, frame: str, masks: dict,
                        provenance: Optional[dict] = None) -> None:
    d = mask_dir(root, view, frame)
    os.makedirs(d, exist_ok=True)
    for inst, mask in sorted(masks.items()):
        save_mask(os.path.join(d, f"instance_{inst}.png"), mask)
    if provenance is not None:
        _write_json(os.path.join(d, "provenance.json"), provenance)


def load_instance_masks(root, view: str, frame: str) -> dict:
    d = mask_dir(root, view, frame)
    out = {}
    if not os.path.isdir(d):
        return out
    for name in sorted(os.listdir(d)):
        if name.startswith("instance_") and name.endswith(".png"):
            inst = int(name[len("instance_"):-len(".png")])
            out[inst] = load_mask(os.path.join(d, name))
    return out


def save_predictions(root, view: str, frame: str, part_map, instance_map,
                     confidences: dict) -> None:
    vdir = os.path.join(root, "pred", view)
    os.makedirs(vdir, exist_ok=True)
    save_label_map(os.path.join(vdir, f"parts_{frame}.png"), part_map)
    save_label_map(os.path.join(vdir, f"instances_{frame}.png"), instance_map)
    _write_json(os.path.join(vdir, f"conf_{frame}.json"),
                {str(k): v for k, v in confidences.items()})


def load_predictions(root, view: str, frame: str):
    vdir = os.path.join(root, "pred", view)
    parts = load_label_map(os.path.join(vdir, f"parts_{frame}.png"))
    inst = load_label_map(os.path.join(vdir, f"instances_{frame}.png"))
    confs = {int(k): float(v)
             for k, v in _read_json(os.path.join(vdir, f"conf_{frame}.json")).items()}
    return parts, inst, confs


def has_predictions(root, view: str, frame: str) -> bool:
    vdir = os.path.join(root, "pred", view)
    return all(os.path.exists(os.path.join(vdir, n))
               for n in (f"parts_{frame}.png", f"instances_{frame}.png",
                         f"conf_{frame}.json"))


# ---------------------------------------------------------------------------
# Training-scene assembly


def masks_from_gt(view: ViewRecord) -> dict:
    if view.gt_instance is None:
        raise ValueError("frame has no ground-truth instance masks")
    return {int(k): (view.gt_instance == k).astype(np.uint8)
            for k in np.unique(view.gt_instance) if k != 0}


def build_train_scene(frame: FrameData, masks_source: str = "gt",
                      mask_root=None, fuse_stride: int = 2,
                      outlier_k: int = 20, std_ratio: float = 2.0) -> TrainScene:
    """Assemble a TrainScene from one frame: fuse the depth maps into a
    labeled cloud and collect per-view instance masks ('gt' or 'annotated').
    """
    fuse_views = [(v.depth, v.calib, v.rgb) for v in frame.views]
    cloud = fuse_and_clean(fuse_views, k=outlier_k, std_ratio=std_ratio,
                           stride=fuse_stride)
    cloud = label_points_by_nearest_joint(cloud, frame.skeletons)
    inst_masks = []
    for v in frame.views:
        if masks_source == "gt":
            inst_masks.append(masks_from_gt(v))
        elif masks_source == "annotated":
            masks = load_instance_masks(mask_root, v.calib.view_id, frame.frame_id)
            if not masks:
                raise ValueError(
                    f"no annotated masks for view {v.calib.view_id} frame {frame.frame_id}")
            inst_masks.append(masks)
        else:
            raise ValueError(f"unknown masks_source {masks_source!r}")
    return TrainScene(
        frame_id=frame.frame_id,
        calibs=[v.calib for v in frame.views],
        rgbs=[v.rgb for v in frame.views],
        depths=[v.depth for v in frame.views],
        instance_masks=inst_masks,
        part_maps=[v.gt_part for v in frame.views],
        skeletons=sorted(frame.skeletons, key=lambda s: s.instance_id),
        points=cloud.positions,
        point_instance=cloud.instance_ids,
    )


def scene_to_train(scene: SyntheticScene, frame_id: str = "0000",
                   fuse_stride: int = 2, outlier_k: int = 20,
                   std_ratio: float = 2.0) -> TrainScene:
    """In-memory twin of build_train_scene for freshly generated scenes."""
    fuse_views = [(v.depth, c, v.rgb)
                  for v, c in zip(scene.views, scene.calibrations)]
    cloud = fuse_and_clean(fuse_views, k=outlier_k, std_ratio=std_ratio,
                           stride=fuse_stride)
    cloud = label_points_by_nearest_joint(cloud, scene.skeletons)
    inst_masks = [{int(k): (v.instance_mask == k).astype(np.uint8)
                   for k in np.unique(v.instance_mask) if k != 0}
                  for v in scene.views]
    return TrainScene(
        frame_id=frame_id,
        calibs=list(scene.calibrations),
        rgbs=[v.rgb for v in scene.views],
        depths=[v.depth for v in scene.views],
        instance_masks=inst_masks,
        part_maps=[v.part_mask for v in scene.views],
        skeletons=sorted(scene.skeletons, key=lambda s: s.instance_id),
        points=cloud.positions,
        point_instance=cloud.instance_ids,
    )
