"""Minimal differentiable multi-human parser and its fine-tuning loop.

The parser is a per-pixel linear softmax over hand-crafted features
(color, normalized position inside the detection box, depth, distances to
the instance's projected skeleton joints, nearest-joint part one-hot).
Detection is frozen: per-instance boxes and skeletons are given, mirroring
a top-down model whose parsing head alone is tuned. Optimization is plain
constant-rate SGD, deterministic for a fixed seed.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from .geometry import CameraCalibration, project_points
from .metrics import DEFAULT_PART_NAMES, greedy_match
from .synth import JOINT_NAMES

FEATURE_RECIPE = "capsule-v1"
BOX_PAD = 2           # detection boxes are gt boxes padded by this margin
DEPTH_SCALE = 5.0     # meters mapped to ~O(1) raw features
# All features are premultiplied by this factor; it sets the metric of the
# weight space so the reference learning rate (3e-4) produces useful steps
# within the 20-epoch budget.
FEATURE_SCALE = 10.0
FORCED_BG_LOGIT = 20.0

# joint -> part id used for the nearest-joint one-hot feature
_JOINT_PART = {
    "Head": 1, "Neck": 2,
    "LShoulder": 3, "RShoulder": 3, "LElbow": 4, "RElbow": 4,
    "LWrist": 4, "RWrist": 4,
    "LHip": 5, "RHip": 5, "LKnee": 6, "RKnee": 6,
    "LAnkle": 6, "RAnkle": 6,
}

WEIGHTS_MAGIC = b"MVPW"
WEIGHTS_VERSION = 1


def feature_dim(n_parts: int) -> int:
    # bias + rgb + box uv + depth + joint distances + part one-hot
    return 1 + 3 + 2 + 1 + len(JOINT_NAMES) + n_parts


@dataclass
class ToyParser:
    """Linear softmax parsing head: logits = features @ weights."""

    weights: np.ndarray                     # (F, C+1)
    label_names: tuple = DEFAULT_PART_NAMES
    recipe: str = FEATURE_RECIPE

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        expect = feature_dim(len(self.label_names) - 1)
        if self.weights.shape != (expect, len(self.label_names)):
            raise ValueError(f"weights must be {(expect, len(self.label_names))}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @classmethod
    def zeros(cls, label_names=DEFAULT_PART_NAMES) -> "ToyParser":
        f = feature_dim(len(label_names) - 1)
        return cls(np.zeros((f, len(label_names))), tuple(label_names))

    def copy(self) -> "ToyParser":
        return replace(self, weights=self.weights.copy())


@dataclass
class FinetuneConfig:
    lam: float = 0.5
    beta: float = 0.30
    n_points: int = 50
    n_views: int = 4
    learning_rate: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 20
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        for name in ("beta", "n_points", "n_views", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class Region:
    """Frozen-detector output for one instance in one view."""

    instance_id: int
    box: tuple            # (r0, c0, r1, c1) half-open pixel rows/cols
    skeleton: object      # synth.Skeleton


@dataclass
class ForwardCache:
    region: Region
    rows: slice
    cols: slice
    feats: np.ndarray     # (n_pixels, F)


@dataclass
class ForwardResult:
    maps: list            # list[PartProbMaps], aligned with regions
    caches: list          # list[ForwardCache]


@dataclass
class InstanceMatching:
    """One-to-one mapping predicted instance -> gt instance for a view."""

    pairs: dict           # predicted instance id -> gt instance id
    iou: dict             # predicted instance id -> matched IoU
    unmatched_pred: list = field(default_factory=list)
    unmatched_gt: list = field(default_factory=list)

    def channel_map(self, maps: Sequence) -> dict:
        """gt instance id -> channel index into ``maps``."""
        by_id = {m.instance_id: k for k, m in enumerate(maps)}
        return {gt: by_id[pred] for pred, gt in self.pairs.items() if pred in by_id}


def region_from_mask(instance_id: int, mask: np.ndarray, skeleton,
                     pad: int = BOX_PAD) -> Optional[Region]:
    """Detection stand-in: padded tight box of a gt instance mask."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    h, w = np.asarray(mask).shape
    return Region(instance_id,
                  (max(int(rows[0]) - pad, 0), max(int(cols[0]) - pad, 0),
                   min(int(rows[-1]) + 1 + pad, h), min(int(cols[-1]) + 1 + pad, w)),
                  skeleton)


def _region_features(rgb, depth, calib: CameraCalibration, region: Region,
                     n_parts: int) -> np.ndarray:
    r0, c0, r1, c1 = region.box
    if r1 <= r0 or c1 <= c0:
        raise ValueError("empty region")
    rows = np.arange(r0, r1, dtype=np.float64)
    cols = np.arange(c0, c1, dtype=np.float64)
    vg, ug = np.meshgrid(rows, cols, indexing="ij")
    n = ug.size
    diag = float(np.hypot(calib.width, calib.height))

    feats = np.empty((n, feature_dim(n_parts)))
    feats[:, 0] = 1.0
    feats[:, 1:4] = rgb[r0:r1, c0:c1].reshape(n, 3) / 255.0
    feats[:, 4] = ((ug - c0) / max(c1 - c0 - 1, 1)).ravel()
    feats[:, 5] = ((vg - r0) / max(r1 - r0 - 1, 1)).ravel()
    feats[:, 6] = depth[r0:r1, c0:c1].reshape(n) / DEPTH_SCALE

    joints = region.skeleton.joint_array(JOINT_NAMES)
    ju, jv, _, jvalid = project_points(joints, calib)
    base = 7
    dists = np.empty((n, len(JOINT_NAMES)))
    for idx in range(len(JOINT_NAMES)):
        if jvalid[idx]:
            du = ug.ravel() - ju[idx]
            dv = vg.ravel() - jv[idx]
            dists[:, idx] = np.sqrt(du * du + dv * dv) / diag
        else:
            dists[:, idx] = 1.0
    feats[:, base:base + len(JOINT_NAMES)] = dists

    onehot = np.zeros((n, n_parts))
    if jvalid.any():
        valid_idx = np.flatnonzero(jvalid)
        nearest = valid_idx[dists[:, valid_idx].argmin(axis=1)]
        part = np.array([_JOINT_PART[JOINT_NAMES[i]] for i in nearest])
        onehot[np.arange(n), part - 1] = 1.0
    feats[:, base + len(JOINT_NAMES):] = onehot
    return feats * FEATURE_SCALE


def forward(parser: ToyParser, rgb, depth, calib: CameraCalibration,
            regions: Sequence[Region]) -> ForwardResult:
    """Per-instance part logits; pixels outside each region are forced to
    background with no dependence on the weights."""
    h, w = depth.shape
    n_cat = len(parser.label_names)
    n_parts = n_cat - 1
    maps = []
    caches = []
    for region in regions:
        r0, c0, r1, c1 = region.box
        if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
            raise ValueError("region outside image")
        feats = _region_features(rgb, depth, calib, region, n_parts)
        logits = np.full((h, w, n_cat), -FORCED_BG_LOGIT)
        logits[..., 0] = FORCED_BG_LOGIT
        inner = np.einsum("nf,fc->nc", feats, parser.weights)
        logits[r0:r1, c0:c1, :] = inner.reshape(r1 - r0, c1 - c0, n_cat)
        maps.append(L.PartProbMaps(region.instance_id, logits))
        caches.append(ForwardCache(region, slice(r0, r1), slice(c0, c1), feats))
    return ForwardResult(maps, caches)


def backprop_weights(result: ForwardResult, grad_logits: Sequence[np.ndarray]
                     ) -> np.ndarray:
    """Accumulate d loss / d weights from per-map logit gradients."""
    grad_w = None
    for cache, g in zip(result.caches, grad_logits):
        inner = g[cache.rows, cache.cols, :].reshape(cache.feats.shape[0], -1)
        contrib = np.einsum("nf,nc->fc", cache.feats, inner)
        grad_w = contrib if grad_w is None else grad_w + contrib
    return grad_w


def match_instances(pred_maps: Sequence, gt_masks: dict) -> InstanceMatching:
    """Greedy descending-IoU one-to-one matching of binarized predictions
    (p_h >= 0.5) against gt instance masks."""
    if not pred_maps or not gt_masks:
        raise ValueError("need at least one predicted and one gt instance")
    pred_ids = [m.instance_id for m in pred_maps]
    pred_bins = [L.part_union(m)[0] >= 0.5 for m in pred_maps]
    gt_ids = sorted(gt_masks)
    gt_bins = [np.asarray(gt_masks[g]) != 0 for g in gt_ids]
    pairs = {}
    ious = {}
    for pi, gi, iou in greedy_match(pred_bins, gt_bins):
        pairs[pred_ids[pi]] = gt_ids[gi]
        ious[pred_ids[pi]] = iou
    return InstanceMatching(
        pairs, ious,
        unmatched_pred=[p for p in pred_ids if p not in pairs],
        unmatched_gt=[g for g in gt_ids if g not in pairs.values()])


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainScene:
    """One multi-view sample of the training corpus."""

    frame_id: str
    calibs: list                     # ring order
    rgbs: list                       # per view (H, W, 3) uint8
    depths: list                     # per view (H, W) float64
    instance_masks: list             # per view: {instance id -> uint8 mask}
    part_maps: list                  # per view: (H, W) int labels (gt supervision)
    skeletons: list                  # synth.Skeleton, sorted by instance id
    points: np.ndarray               # (N, 3) labeled 3D points
    point_instance: np.ndarray       # (N,)

    def regions(self, view: int) -> list:
        skel = {s.instance_id: s for s in self.skeletons}
        regs = []
        for inst in sorted(self.instance_masks[view]):
            reg = region_from_mask(inst, self.instance_masks[view][inst], skel[inst])
            if reg is not None:
                regs.append(reg)
        return regs


class FinetuneDiverged(RuntimeError):
    pass


def _adjacent_views(n_total: int, n_views: int, start: int) -> list:
    return [(start + i) % n_total for i in range(min(n_views, n_total))]


def scene_objective(parser: ToyParser, scene: TrainScene, view_ids: Sequence[int],
                    mode: str, config: FinetuneConfig,
                    point_idx: Optional[np.ndarray] = None):
    """Loss value, weight gradient and components for one scene.

    mode "ig": instance-guided loss averaged over views and instances.
    mode "mvig": adds the multi-view identity and part consistency terms
    over the sampled points.
    """
    results = []
    all_targets = []
    for v in view_ids:
        regs = scene.regions(v)
        if not regs:
            raise ValueError(f"view {v} has no instances")
        res = forward(parser, scene.rgbs[v], scene.depths[v], scene.calibs[v], regs)
        results.append(res)
        all_targets.append([L.InstanceTarget(
            (np.asarray(scene.instance_masks[v][r.instance_id]) != 0).astype(np.int64))
            for r in regs])

    if mode == "ig":
        total = 0.0
        grad_w = np.zeros_like(parser.weights)
        comp = {"l_fg": [], "l_miou": []}
        n_maps = 0
        for res, targets in zip(results, all_targets):
            grads = []
            for m, t in zip(res.maps, targets):
                out = L.ig_loss(m, t, config.lam)
                total += out.value
                grads.append(out.grad)
                comp["l_fg"].append(out.components["l_fg"])
                comp["l_miou"].append(out.components["l_miou"])
                n_maps += 1
            grad_w += backprop_weights(res, grads)
        total /= n_maps
        grad_w /= n_maps
        components = {k: float(np.mean(v)) for k, v in comp.items()}
        components["total"] = float(total)
        return float(total), grad_w, components

    if mode != "mvig":
        raise ValueError(f"unknown mode {mode!r}")

    if point_idx is None:
        point_idx = np.arange(min(config.n_points, scene.points.shape[0]))
    views = []
    for res, v in zip(results, view_ids):
        gt_masks = scene.instance_masks[v]
        matching = match_instances(res.maps, gt_masks)
        views.append(L.ViewSample(scene.calibs[v], scene.depths[v], res.maps,
                                  matching.channel_map(res.maps)))
    sample = L.build_multiview_sample(scene.points[point_idx],
                                      scene.point_instance[point_idx],
                                      views, config.beta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = L.mvig_loss(sample, all_targets, config.lam)
    grad_w = np.zeros_like(parser.weights)
    for res, grads in zip(results, out.grad):
        grad_w += backprop_weights(res, grads)
    components = {k: float(v) for k, v in out.components.items()}
    components["total"] = float(out.value)
    return float(out.value), grad_w, components


def finetune(parser: ToyParser, scenes: Sequence[TrainScene],
             config: FinetuneConfig, mode: str = "mvig"):
    """Plain SGD on the chosen objective; returns (parser, history).

    Per scene and batch: a contiguous arc of ``n_views`` adjacent cameras
    and ``n_points`` labeled 3D points are drawn from the run RNG. History
    records per-epoch means of every loss component. Deterministic for a
    fixed seed; raises FinetuneDiverged when the loss stops being finite.
    """
    if not scenes:
        raise ValueError("empty dataset")
    mode = mode.lower()
    parser = parser.copy()
    rng = np.random.default_rng(config.rng_seed)
    history = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(scenes))
        comps: dict = {}
        n_terms = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grad_w = np.zeros_like(parser.weights)
            for si in batch:
                scene = scenes[si]
                arc = int(rng.integers(len(scene.calibs)))
                view_ids = _adjacent_views(len(scene.calibs), config.n_views, arc)
                n_pts = scene.points.shape[0]
                take = min(config.n_points, n_pts)
                point_idx = rng.choice(n_pts, size=take, replace=False)
                value, g, c = scene_objective(parser, scene, view_ids, mode,
                                              config, point_idx)
                if not np.isfinite(value):
                    raise FinetuneDiverged(
                        f"non-finite loss at epoch {epoch}, scene {scene.frame_id}")
                grad_w += g
                for k, v in c.items():
                    comps[k] = comps.get(k, 0.0) + v
                n_terms += 1
            parser.weights = parser.weights - config.learning_rate * (grad_w / len(batch))
            if not np.all(np.isfinite(parser.weights)):
                raise FinetuneDiverged(f"non-finite weights at epoch {epoch}")
        entry = {"epoch": epoch}
        entry.update({k: v / n_terms for k, v in comps.items()})
        history.append(entry)
    return parser, history


def pretrain(parser: ToyParser, scenes: Sequence[TrainScene], epochs: int = 30,
             learning_rate: float = 0.5, rng_seed: int = 0):
    """Supervised pretraining on gt part labels inside detection regions
    (the stand-in for a parser pretrained on a fully labeled corpus)."""
    parser = parser.copy()
    rng = np.random.default_rng(rng_seed)
    history = []
    n_cat = len(parser.label_names)
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        epoch_loss = 0.0
        n_seen = 0
        for si in order:
            scene = scenes[si]
            grad_w = np.zeros_like(parser.weights)
            loss = 0.0
            n_px = 0
            for v in range(len(scene.calibs)):
                regs = scene.regions(v)
                if not regs:
                    continue
                res = forward(parser, scene.rgbs[v], scene.depths[v],
                              scene.calibs[v], regs)
                for m, cache in zip(res.maps, res.caches):
                    probs = L.softmax(np.einsum("nf,fc->nc", cache.feats,
                                                parser.weights))
                    gt = np.asarray(scene.part_maps[v])[cache.rows, cache.cols].ravel()
                    own = np.asarray(scene.instance_masks[v][m.instance_id])[
                        cache.rows, cache.cols].ravel()
                    target = np.where(own != 0, gt, 0)
                    n = target.size
                    p_t = np.clip(probs[np.arange(n), target], L.CLAMP_EPS, None)
                    loss += -np.log(p_t).sum()
                    g = probs.copy()
                    g[np.arange(n), target] -= 1.0
                    grad_w += np.einsum("nf,nc->fc", cache.feats, g)
                    n_px += n
            if n_px == 0:
                continue
            parser.weights = parser.weights - learning_rate * (grad_w / n_px)
            epoch_loss += loss / n_px
            n_seen += 1
        history.append({"epoch": epoch, "ce": epoch_loss / max(n_seen, 1)})
    return parser, history


# ---------------------------------------------------------------------------
# Prediction and weight serialization


def predict_view(parser: ToyParser, rgb, depth, calib: CameraCalibration,
                 regions: Sequence[Region]):
    """Compose per-instance maps into a semantic part map, disjoint
    instance masks and per-instance confidences.

    Pixel ownership goes to the instance with the highest foreground
    probability; a pixel is foreground only if that probability >= 0.5.
    """
    h, w = depth.shape
    if not regions:
        return (np.zeros((h, w), np.int64), {}, {},
                {})
    res = forward(parser, rgb, depth, calib, regions)
    best_ph = np.zeros((h, w))
    owner = np.zeros((h, w), np.int64)
    arg_by_inst = {}
    for m in res.maps:
        p_h, argc, probs = L.part_union(m)
        lbl = probs.argmax(axis=-1)
        arg_by_inst[m.instance_id] = lbl
        claim = (p_h >= 0.5) & (p_h > best_ph) & (lbl > 0)
        best_ph = np.where(claim, p_h, best_ph)
        owner = np.where(claim, m.instance_id, owner)
    part_map = np.zeros((h, w), np.int64)
    masks = {}
    confs = {}
    part_maps = {}
    for m in res.maps:
        mine = owner == m.instance_id
        masks[m.instance_id] = mine.astype(np.uint8)
        part_map[mine] = arg_by_inst[m.instance_id][mine]
        p_h = L.part_union(m)[0]
        confs[m.instance_id] = float(p_h[mine].mean()) if mine.any() else 0.0
        inst_parts = np.zeros((h, w), np.int64)
        inst_parts[mine] = arg_by_inst[m.instance_id][mine]
        part_maps[m.instance_id] = inst_parts
    return part_map, masks, confs, part_maps


def save_weights(path, parser: ToyParser) -> None:
    """Versioned flat binary of little-endian float64 plus a text manifest."""
    w = np.ascontiguousarray(parser.weights, dtype="<f8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<III", WEIGHTS_VERSION, w.shape[0], w.shape[1]))
        f.write(w.tobytes())
    manifest = [
        f"format: mvparse-weights v{WEIGHTS_VERSION}",
        f"recipe: {parser.recipe}",
        f"feature_dim: {w.shape[0]}",
        f"categories: {','.join(parser.label_names)}",
        "dtype: float64 little-endian row-major",
    ]
    with open(f"{path}.manifest.txt", "w") as f:
        f.write("\n".join(manifest) + "\n")


def load_weights(path) -> ToyParser:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError("not a parser weights file")
        version, rows, cols = struct.unpack("<III", f.read(12))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        data = np.frombuffer(f.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
    label_names = DEFAULT_PART_NAMES
    try:
        with open(f"{path}.manifest.txt") as f:
            for line in f:
                if line.startswith("categories:"):
                    label_names = tuple(line.split(":", 1)[1].strip().split(","))
    except FileNotFoundError:
        pass
    return ToyParser(np.array(data), label_names)
