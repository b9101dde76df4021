"""Semi-automatic multi-view human instance annotation.

Fused scene points are labeled by their nearest skeleton joint, projected
into each view, visibility-filtered, and condensed into seed prompts
(k-means cluster centers plus knee/ankle joints). A promptable segmenter
turns seeds into masks; instances are segmented farthest-to-nearest so
nearer people overwrite occluded ones, then each mask is refined once by
re-prompting with itself as prior. Output masks per view are pairwise
disjoint.
"""

from __future__ import annotations

import json
import os
import selectors
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import (CameraCalibration, LabeledPointCloud, project_points,
                       round_half_up, visibility_filter)

DEFAULT_POINTS_PER_SEED = 50
DEFAULT_K_MIN = 3
DEFAULT_K_MAX = 10
DEFAULT_TAU_C = 30.0     # RGB L2 units
DEFAULT_TAU_D = 0.10     # meters
DEFAULT_TAU_M = 5        # prior-mask dilation, pixels
DEFAULT_BETA = 0.30      # meters
KMEANS_MAX_ITER = 50

LEG_JOINTS = (("LKnee", "knee"), ("RKnee", "knee"),
              ("LAnkle", "ankle"), ("RAnkle", "ankle"))


@dataclass
class SeedSet:
    """Positive point prompts for one instance in one view."""

    instance_id: int
    seeds: list = field(default_factory=list)   # (u, v) int pixel coords
    tags: list = field(default_factory=list)    # cluster-center | knee | ankle
    empty_warning: bool = False

    def __len__(self) -> int:
        return len(self.seeds)


class PromptableSegmenter(Protocol):
    """Anything that turns point prompts into a binary mask."""

    def segment(self, image: np.ndarray, depth: Optional[np.ndarray],
                seeds: Sequence, prior_mask: Optional[np.ndarray] = None
                ) -> np.ndarray: ...


def label_points_by_nearest_joint(cloud: LabeledPointCloud,
                                  skeletons: Sequence) -> LabeledPointCloud:
    """Assign each point the instance of its globally nearest skeleton
    joint (ties -> lowest instance id)."""
    skeletons = sorted(skeletons, key=lambda s: s.instance_id)
    if not skeletons or not any(len(s.joints) for s in skeletons):
        raise ValueError("no skeletons")
    joints = []
    owners = []
    for skel in skeletons:
        for name in sorted(skel.joints):
            joints.append(skel.joints[name])
            owners.append(skel.instance_id)
    joints = np.stack(joints)
    owners = np.asarray(owners, dtype=np.int32)
    pts = cloud.positions
    labels = np.empty(len(cloud), dtype=np.int32)
    chunk = max(1, 4_000_000 // max(len(owners), 1))
    for s in range(0, len(cloud), chunk):
        e = min(len(cloud), s + chunk)
        d2 = ((pts[s:e, None, :] - joints[None, :, :]) ** 2).sum(axis=2)
        # owners are sorted by instance id, argmin's first-hit rule breaks
        # distance ties toward the lowest instance id
        labels[s:e] = owners[np.argmin(d2, axis=1)]
    return LabeledPointCloud(pts.copy(),
                             None if cloud.colors is None else cloud.colors.copy(),
                             labels,
                             None if cloud.part_ids is None else cloud.part_ids.copy())


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
            max_iter: int = KMEANS_MAX_ITER) -> np.ndarray:
    """Deterministic Lloyd's k-means with k-means++ init; returns centers."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = centers[0]
            break
        probs = d2 / total
        centers[i] = points[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    for _ in range(max_iter):
        d2_all = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2_all.argmin(axis=1)
        new_centers = centers.copy()
        for i in range(k):
            members = points[assign == i]
            if len(members):
                new_centers[i] = members.mean(axis=0)
            else:
                # deterministic: re-seed an empty cluster at the farthest point
                new_centers[i] = points[int(d2_all.min(axis=1).argmax())]
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return centers


def extract_seeds(pixels, skeleton, calib: CameraCalibration,
                  depth_map: np.ndarray,
                  density: int = DEFAULT_POINTS_PER_SEED,
                  k_min: int = DEFAULT_K_MIN, k_max: int = DEFAULT_K_MAX,
                  beta: float = DEFAULT_BETA,
                  rng_seed: int = 0) -> SeedSet:
    """Build the seed prompt set for one instance in one view.

    ``pixels``: (N, 2) continuous (u, v) positions of the instance's valid,
    visibility-filtered projections. k = clamp(round(N / density), k_min,
    k_max) k-means centers snapped to their nearest member pixel, plus the
    projected knee/ankle joints where valid and within ``beta`` of the
    view's depth surface.
    """
    if density < 1 or k_min < 1:
        raise ValueError("density and k_min must be >= 1")
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    out = SeedSet(skeleton.instance_id)
    if pixels.shape[0] == 0:
        out.empty_warning = True
        warnings.warn(f"instance {skeleton.instance_id}: no projected points")
        return out
    n = pixels.shape[0]
    k = int(np.clip(int(np.floor(n / density + 0.5)), k_min, k_max))
    k = min(k, n)
    rng = np.random.default_rng(rng_seed)
    centers = _kmeans(pixels, k, rng)
    seen = set()
    for center in centers:
        d2 = ((pixels - center) ** 2).sum(axis=1)
        member = pixels[int(d2.argmin())]
        uv = (int(round_half_up(member[0])), int(round_half_up(member[1])))
        if uv not in seen:
            seen.add(uv)
            out.seeds.append(uv)
            out.tags.append("cluster-center")
    joint_pos = [skeleton.joints[name] for name, _ in LEG_JOINTS
                 if name in skeleton.joints]
    tags = [tag for name, tag in LEG_JOINTS if name in skeleton.joints]
    if joint_pos:
        pts = np.stack(joint_pos)
        keep = visibility_filter(pts, depth_map, calib, beta)
        u, v, _, _ = project_points(pts, calib)
        for idx in keep:
            uv = (int(round_half_up(u[idx])), int(round_half_up(v[idx])))
            uv = (min(max(uv[0], 0), calib.width - 1),
                  min(max(uv[1], 0), calib.height - 1))
            out.seeds.append(uv)
            out.tags.append(tags[idx])
    return out


def baseline_segmenter(image: np.ndarray, depth: np.ndarray, seeds,
                       prior_mask: Optional[np.ndarray] = None,
                       tau_c: float = DEFAULT_TAU_C,
                       tau_d: float = DEFAULT_TAU_D,
                       tau_m: int = DEFAULT_TAU_M) -> np.ndarray:
    """Seeded region growing over joint color / depth continuity.

    Growth crosses a 4-neighbor edge only when both pixels have valid
    depth, RGB L2 distance <= tau_c and |depth difference| <= tau_d. With a
    prior mask, growth is confined to its tau_m-pixel dilation. Seeds on
    invalid-depth pixels are skipped (empty mask + warning if all are).
    """
    seeds = [s if isinstance(s, tuple) else tuple(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    live = [(u, v) for u, v in seeds
            if 0 <= int(v) < h and 0 <= int(u) < w and depth[int(v), int(u)] > 0]
    if not live:
        warnings.warn("all seeds on invalid-depth pixels; empty mask")
        return np.zeros((h, w), np.uint8)
    allowed = None
    if prior_mask is not None:
        allowed = ndimage.binary_dilation(
            np.asarray(prior_mask) != 0,
            structure=np.ones((3, 3), bool), iterations=int(tau_m)).astype(np.uint8)
    rows_cols = np.array([(int(v), int(u)) for u, v in live], dtype=np.int64)
    return _kernels.region_grow(image, depth, rows_cols, allowed, tau_c, tau_d)


class BaselineSegmenter:
    """Deterministic offline stand-in for a promptable segmentation model."""

    def __init__(self, tau_c: float = DEFAULT_TAU_C, tau_d: float = DEFAULT_TAU_D,
                 tau_m: int = DEFAULT_TAU_M):
        self.tau_c = tau_c
        self.tau_d = tau_d
        self.tau_m = tau_m

    def segment(self, image, depth, seeds, prior_mask=None):
        return baseline_segmenter(image, depth, seeds, prior_mask,
                                  self.tau_c, self.tau_d, self.tau_m)


class ExternalSegmenterError(RuntimeError):
    pass


class ExternalProcessSegmenter:
    """Adapter for an external promptable segmenter (e.g. a real SAM).

    Speaks line-delimited JSON over the child's stdin/stdout: request
    ``{"image_path", "seeds": [[u, v], ...], "prior_mask_path"?}``,
    response ``{"mask_path"}``. One request at a time, 60 s timeout each.
    """

    def __init__(self, command, timeout: float = 60.0, workdir: Optional[str] = None):
        self.command = command
        self.timeout = timeout
        self._tmp = tempfile.TemporaryDirectory(prefix="mvparse-seg-", dir=workdir)
        self._proc = subprocess.Popen(
            command if isinstance(command, (list, tuple)) else ["sh", "-c", command],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        self._count = 0

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        self._tmp.cleanup()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _read_line(self) -> str:
        sel = selectors.DefaultSelector()
        sel.register(self._proc.stdout, selectors.EVENT_READ)
        if not sel.select(timeout=self.timeout):
            self._proc.kill()
            raise ExternalSegmenterError("external segmenter timed out")
        line = self._proc.stdout.readline()
        sel.close()
        if not line:
            raise ExternalSegmenterError("external segmenter closed its stdout")
        return line

    def segment(self, image, depth, seeds, prior_mask=None):
        from PIL import Image

        self._count += 1
        image_path = os.path.join(self._tmp.name, f"img_{self._count}.png")
        Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(image_path)
        request = {"image_path": image_path,
                   "seeds": [[int(u), int(v)] for u, v in seeds]}
        if prior_mask is not None:
            prior_path = os.path.join(self._tmp.name, f"prior_{self._count}.png")
            arr = (np.asarray(prior_mask) != 0).astype(np.uint8) * 255
            Image.fromarray(arr, "L").save(prior_path)
            request["prior_mask_path"] = prior_path
        self._proc.stdin.write(json.dumps(request) + "\n")
        self._proc.stdin.flush()
        reply = json.loads(self._read_line())
        mask = np.asarray(Image.open(reply["mask_path"]).convert("L"))
        if mask.shape != np.asarray(image).shape[:2]:
            raise ExternalSegmenterError("mask size does not match image")
        return (mask != 0).astype(np.uint8)


@dataclass
class ViewAnnotation:
    """Per-instance masks for one view, plus provenance."""

    masks: dict                    # instance id -> (H, W) uint8
    order: list                    # instance ids, farthest first
    seeds: dict                    # instance id -> SeedSet
    skipped: list = field(default_factory=list)


def annotate_view(cloud: LabeledPointCloud, skeletons: Sequence,
                  rgb: np.ndarray, depth: np.ndarray,
                  calib: CameraCalibration, segmenter: PromptableSegmenter,
                  beta: float = DEFAULT_BETA,
                  density: int = DEFAULT_POINTS_PER_SEED,
                  k_min: int = DEFAULT_K_MIN, k_max: int = DEFAULT_K_MAX,
                  rng_seed: int = 0) -> ViewAnnotation:
    """Segment every instance in one view, farthest to nearest.

    Later (nearer) instances overwrite earlier claims, both after the first
    pass and after the single refinement pass, so the returned masks are
    pairwise disjoint.
    """
    if cloud.instance_ids is None:
        raise ValueError("cloud must be labeled")
    skeletons = {s.instance_id: s for s in skeletons}
    u, v, z, valid = project_points(cloud.positions, calib)
    vis = np.zeros(len(cloud), bool)
    vis[visibility_filter(cloud.positions, depth, calib, beta)] = True

    per_instance = {}
    skipped = []
    for inst in sorted(int(i) for i in np.unique(cloud.instance_ids)):
        sel = (cloud.instance_ids == inst) & vis
        if not sel.any():
            warnings.warn(f"instance {inst}: no visible points in view {calib.view_id}")
            skipped.append(inst)
            continue
        per_instance[inst] = {
            "pixels": np.stack([u[sel], v[sel]], axis=1),
            "mean_z": float(z[sel].mean()),
        }
    order = sorted(per_instance, key=lambda i: (-per_instance[i]["mean_z"], i))

    seed_sets = {}
    first_pass = {}
    for inst in order:
        seeds = extract_seeds(per_instance[inst]["pixels"], skeletons[inst],
                              calib, depth, density=density, k_min=k_min,
                              k_max=k_max, beta=beta,
                              rng_seed=rng_seed + inst)
        seed_sets[inst] = seeds
        if len(seeds) == 0:
            skipped.append(inst)
            continue
        first_pass[inst] = segmenter.segment(rgb, depth, seeds.seeds)

    def resolve(masks_by_inst):
        owner = np.zeros(depth.shape, np.int32)
        for inst in order:  # far to near: later assignments overwrite
            if inst in masks_by_inst:
                owner[masks_by_inst[inst] != 0] = inst
        return {inst: (owner == inst).astype(np.uint8)
                for inst in masks_by_inst}

    resolved = resolve(first_pass)
    refined = {}
    for inst in order:
        if inst not in resolved:
            continue
        prior = resolved[inst]
        if prior.any():
            refined[inst] = segmenter.segment(rgb, depth, seed_sets[inst].seeds,
                                              prior_mask=prior)
        else:
            refined[inst] = prior
    final = resolve(refined)
    kept_order = [i for i in order if i in final]
    return ViewAnnotation(masks=final, order=kept_order, seeds=seed_sets,
                          skipped=sorted(set(skipped)))
