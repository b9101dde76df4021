"""Occlusion-stratified evaluation protocol.

Images are stratified by overlap degree (max pairwise IoU of ground-truth
human boxes) into nested subsets at 20/40/60/80%, and scored with part- and
human-level mIoU variants, pixel accuracies and part-based average
precision. Dataset-level mIoU accumulates intersections and unions over all
images before dividing.

Conventions the source paper leaves open (flagged in report headers):
AP^p matching is greedy in descending confidence with all-point PR
interpolation over thresholds 0.1..0.9; human mIoU is the two-class mean
(background + foreground); IoU of two empty masks is 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

OVERLAP_THRESHOLDS = (0.20, 0.40, 0.60, 0.80)
AP_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))

CONVENTIONS = (
    "AP^p_vol: greedy confidence-ordered matching, all-point PR interpolation, "
    "thresholds 0.1:0.1:0.9; mIoU_h: mean of background and human-foreground IoU; "
    "empty-vs-empty IoU = 0"
)

DEFAULT_PART_NAMES = ("background", "head", "torso", "upper-arm",
                      "lower-arm", "upper-leg", "lower-leg")


class LabelSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    """Ordered part categories (index 0 = background) plus the ignore set
    and source->target mapping used by the mIoU variants."""

    names: tuple = DEFAULT_PART_NAMES
    ignore: frozenset = frozenset()
    mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "ignore", frozenset(self.ignore))
        object.__setattr__(self, "mapping", dict(self.mapping))
        background = self.names[0]
        for name in self.ignore:
            if name not in self.names:
                raise LabelSpaceError(f"unknown ignored category {name!r}")
        if background in self.ignore:
            raise LabelSpaceError("background cannot be ignored")
        for src, dst in self.mapping.items():
            if src not in self.names or dst not in self.names:
                raise LabelSpaceError(f"mapping {src!r}->{dst!r} uses unknown categories")
        if background in self.mapping:
            raise LabelSpaceError("background cannot be mapped away")

    @property
    def num_categories(self) -> int:
        """Part categories excluding background."""
        return len(self.names) - 1

    def index(self, name: str) -> int:
        return self.names.index(name)

    def ignore_ids(self) -> np.ndarray:
        return np.array(sorted(self.index(n) for n in self.ignore), dtype=np.int64)

    def mapping_lut(self) -> np.ndarray:
        lut = np.arange(len(self.names), dtype=np.int64)
        for src, dst in self.mapping.items():
            lut[self.index(src)] = self.index(dst)
        return lut

    def to_dict(self) -> dict:
        return {"names": list(self.names), "ignore": sorted(self.ignore),
                "mapping": dict(sorted(self.mapping.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(tuple(d.get("names", DEFAULT_PART_NAMES)),
                   frozenset(d.get("ignore", ())), dict(d.get("mapping", {})))


def mask_iou(a, b) -> float:
    """IoU of two binary grids or two (x0, y0, x1, y1) boxes; 0 when both
    are empty."""
    a_arr = np.asarray(a)
    if a_arr.ndim == 2:
        b_arr = np.asarray(b)
        if a_arr.shape != b_arr.shape:
            raise ValueError("mask shapes differ")
        am = a_arr != 0
        bm = b_arr != 0
        union = np.logical_or(am, bm).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(am, bm).sum() / union)
    ax0, ay0, ax1, ay1 = (float(x) for x in a)
    bx0, by0, bx1, by1 = (float(x) for x in b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_bbox(mask) -> Optional[tuple]:
    """Tight (x0, y0, x1, y1) box of a binary mask, or None if empty."""
    mask = np.asarray(mask) != 0
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def instance_boxes(instance_map) -> dict:
    """Per-instance tight boxes from a labeled instance map (0 = none)."""
    instance_map = np.asarray(instance_map)
    out = {}
    for k in np.unique(instance_map):
        if k == 0:
            continue
        out[int(k)] = mask_bbox(instance_map == k)
    return out


def overlap_degree(gt_boxes: Sequence) -> float:
    """Max pairwise box IoU; 0 with fewer than two boxes."""
    boxes = list(gt_boxes)
    if len(boxes) < 2:
        return 0.0
    best = 0.0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            best = max(best, mask_iou(boxes[i], boxes[j]))
    return best


@dataclass
class OverlapPartition:
    """Per-image overlap degrees and the nested threshold subsets."""

    degrees: np.ndarray
    thresholds: tuple = OVERLAP_THRESHOLDS

    def members(self, threshold: float) -> np.ndarray:
        return np.flatnonzero(self.degrees >= threshold)

    def subsets(self) -> dict:
        out = {"all": np.arange(self.degrees.size)}
        for t in self.thresholds:
            out[f"O{int(round(t * 100))}"] = self.members(t)
        return out


def partition_by_overlap(gt_box_lists: Sequence[Sequence]) -> OverlapPartition:
    degrees = np.array([overlap_degree(boxes) for boxes in gt_box_lists], dtype=np.float64)
    return OverlapPartition(degrees)


def _as_list(x):
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return list(x)


def semantic_miou(preds, gts, labels: LabelSpace, variant: str = "full") -> float:
    """Dataset-level part mIoU: full / ignore / mapped variants."""
    preds = _as_list(preds)
    gts = _as_list(gts)
    if len(preds) != len(gts):
        raise ValueError("pred/gt image counts differ")
    n_cat = len(labels.names)
    if variant not in ("full", "ignore", "mapped"):
        raise ValueError(f"unknown variant {variant!r}")
    lut = labels.mapping_lut() if variant == "mapped" else np.arange(n_cat)
    drop = labels.ignore_ids() if variant == "ignore" else np.empty(0, np.int64)
    inter = np.zeros(n_cat, dtype=np.int64)
    union = np.zeros(n_cat, dtype=np.int64)
    present = np.zeros(n_cat, dtype=bool)
    for p, g in zip(preds, gts):
        p = lut[np.asarray(p, dtype=np.int64)]
        g = lut[np.asarray(g, dtype=np.int64)]
        if p.shape != g.shape:
            raise ValueError("pred/gt shapes differ")
        keep = ~np.isin(g, drop) if drop.size else np.ones(g.shape, bool)
        for c in range(n_cat):
            if c in drop:
                continue
            pc = (p == c) & keep
            gc = (g == c) & keep
            inter[c] += np.logical_and(pc, gc).sum()
            union[c] += np.logical_or(pc, gc).sum()
            if gc.any():
                present[c] = True
    if not present.any():
        return 0.0
    ious = [inter[c] / union[c] for c in range(n_cat) if present[c]]
    return float(np.mean(ious))


def human_miou(preds, gts, level: str = "global") -> float:
    """Part-agnostic human mIoU.

    global: ``preds``/``gts`` are per-image binary foreground-union masks
    (probabilistic inputs are thresholded at 0.5); score is the mean of the
    accumulated background and foreground IoUs.
    instance: ``preds``/``gts`` are per-image lists of binary instance
    masks; predictions are greedily matched to ground truth by descending
    IoU and the matched IoUs are averaged over all gt instances.
    """
    if level == "global":
        preds = _as_list(preds)
        gts = _as_list(gts)
        inter = np.zeros(2, dtype=np.int64)
        union = np.zeros(2, dtype=np.int64)
        for p, g in zip(preds, gts):
            p = _binarize(p)
            g = _binarize(g)
            for cls, (pm, gm) in enumerate(((~p, ~g), (p, g))):
                inter[cls] += np.logical_and(pm, gm).sum()
                union[cls] += np.logical_or(pm, gm).sum()
        ious = [inter[c] / union[c] if union[c] > 0 else 0.0 for c in range(2)]
        return float(np.mean(ious))
    if level == "instance":
        if len(preds) and isinstance(preds[0], np.ndarray) and preds[0].ndim == 2 \
                and len(gts) and isinstance(gts[0], np.ndarray) and gts[0].ndim == 2:
            preds, gts = [preds], [gts]
        total = 0.0
        n_gt = 0
        for p_list, g_list in zip(preds, gts):
            n_gt += len(g_list)
            for _, _, iou in greedy_match([_binarize(m) for m in p_list],
                                          [_binarize(m) for m in g_list]):
                total += iou
        return float(total / n_gt) if n_gt else 0.0
    raise ValueError(f"unknown level {level!r}")


def _binarize(m):
    m = np.asarray(m)
    if m.dtype.kind == "f":
        return m >= 0.5
    return m != 0


def greedy_match(pred_masks, gt_masks):
    """One-to-one matching by descending IoU; returns (pred_i, gt_j, iou)
    triples, including zero-IoU pairs until one side is exhausted."""
    pairs = []
    for i, pm in enumerate(pred_masks):
        for j, gm in enumerate(gt_masks):
            pairs.append((-mask_iou(pm, gm), i, j))
    pairs.sort()
    used_p = set()
    used_g = set()
    out = []
    for neg_iou, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, -neg_iou))
    return out


def accuracies(preds, gts) -> tuple:
    """(pixel accuracy, mean per-category recall over gt-present categories)."""
    preds = _as_list(preds)
    gts = _as_list(gts)
    correct = 0
    total = 0
    cat_correct: dict = {}
    cat_total: dict = {}
    for p, g in zip(preds, gts):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError("pred/gt shapes differ")
        eq = p == g
        correct += eq.sum()
        total += g.size
        for c in np.unique(g):
            cm = g == c
            cat_correct[int(c)] = cat_correct.get(int(c), 0) + int((eq & cm).sum())
            cat_total[int(c)] = cat_total.get(int(c), 0) + int(cm.sum())
    if total == 0:
        return 0.0, 0.0
    recalls = [cat_correct[c] / cat_total[c] for c in sorted(cat_total)]
    return float(correct / total), float(np.mean(recalls))


def mean_part_iou(pred_parts, gt_parts) -> float:
    """Mean per-category IoU over the part categories present in the gt
    instance (background excluded); the pairwise score behind AP^p."""
    pred_parts = np.asarray(pred_parts)
    gt_parts = np.asarray(gt_parts)
    cats = [c for c in np.unique(gt_parts) if c != 0]
    if not cats:
        return 0.0
    return float(np.mean([mask_iou(pred_parts == c, gt_parts == c) for c in cats]))


def _average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def ap_p_vol(pred_instances, gt_instances) -> float:
    """Average precision based on parts, averaged over IoU thresholds.

    ``pred_instances``: per image, a list of (confidence, part_map);
    ``gt_instances``: per image, a list of part_map. A prediction is a true
    positive at threshold t when the best still-unmatched gt instance in
    its image has mean part IoU > t.
    """
    pred_instances = list(pred_instances)
    gt_instances = list(gt_instances)
    n_gt = sum(len(g) for g in gt_instances)
    if n_gt == 0:
        warnings.warn("AP^p_vol: no ground-truth instances; defined as 0")
        return 0.0
    entries = []  # (-conf, image, pred index)
    pair_iou = {}
    for im, (p_list, g_list) in enumerate(zip(pred_instances, gt_instances)):
        for pi, (conf, p_parts) in enumerate(p_list):
            entries.append((-float(conf), im, pi))
            for gi, g_parts in enumerate(g_list):
                pair_iou[(im, pi, gi)] = mean_part_iou(p_parts, g_parts)
    entries.sort()
    aps = []
    for t in AP_THRESHOLDS:
        used = set()
        flags = np.zeros(len(entries), dtype=bool)
        for n, (_, im, pi) in enumerate(entries):
            n_g = len(gt_instances[im])
            if n_g == 0:
                continue
            best_gi = max(range(n_g), key=lambda gi: (pair_iou[(im, pi, gi)], -gi))
            if pair_iou[(im, pi, best_gi)] > t and (im, best_gi) not in used:
                used.add((im, best_gi))
                flags[n] = True
        aps.append(_average_precision(flags, n_gt))
    return float(np.mean(aps))


@dataclass
class ImageEval:
    """Everything needed to score one image."""

    pred_parts: np.ndarray                 # (H, W) category labels
    gt_parts: np.ndarray                   # (H, W)
    pred_instances: list                   # of (confidence, mask, part_map)
    gt_instances: list                     # of (mask, part_map)


@dataclass
class MetricsReport:
    miou_p: float
    miou_p_m: float
    miou_p_ig: float
    miou_h_i: float
    miou_h: float
    acc_pixel: float
    acc_mean: float
    ap_p_vol: float
    n_images: int = 0

    FIELDS = ("miou_p", "miou_p_m", "miou_p_ig", "miou_h_i", "miou_h",
              "acc_pixel", "acc_mean", "ap_p_vol")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.FIELDS}
        d["n_images"] = self.n_images
        return d


def evaluate_images(images: Sequence[ImageEval], labels: LabelSpace) -> MetricsReport:
    """Score one dataset subset."""
    images = list(images)
    if not images:
        return MetricsReport(*([0.0] * 8), n_images=0)
    pred_parts = [im.pred_parts for im in images]
    gt_parts = [im.gt_parts for im in images]
    pred_fg = [_union_masks([m for _, m, _ in im.pred_instances], im.pred_parts.shape)
               for im in images]
    gt_fg = [_union_masks([m for m, _ in im.gt_instances], im.gt_parts.shape)
             for im in images]
    acc_pixel, acc_mean = accuracies(pred_parts, gt_parts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ap = ap_p_vol([[(c, pm) for c, _, pm in im.pred_instances] for im in images],
                      [[pm for _, pm in im.gt_instances] for im in images])
    return MetricsReport(
        miou_p=semantic_miou(pred_parts, gt_parts, labels, "full"),
        miou_p_m=semantic_miou(pred_parts, gt_parts, labels, "mapped"),
        miou_p_ig=semantic_miou(pred_parts, gt_parts, labels, "ignore"),
        miou_h_i=human_miou([[m for _, m, _ in im.pred_instances] for im in images],
                            [[m for m, _ in im.gt_instances] for im in images],
                            level="instance"),
        miou_h=human_miou(pred_fg, gt_fg, level="global"),
        acc_pixel=acc_pixel,
        acc_mean=acc_mean,
        ap_p_vol=ap,
        n_images=len(images),
    )


def _union_masks(masks, shape):
    out = np.zeros(shape, bool)
    for m in masks:
        out |= _binarize(m)
    return out


def format_report_table(reports: dict) -> str:
    """Aligned text table: one row per subset, one column per metric."""
    cols = ["subset", "n"] + list(MetricsReport.FIELDS)
    rows = [cols]
    for name, rep in reports.items():
        rows.append([name, str(rep.n_images)] +
                    [f"{getattr(rep, f):.4f}" for f in MetricsReport.FIELDS])
    widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    return "\n".join([f"# {CONVENTIONS}"] + lines)
