"""Training objectives with analytic gradients.

Two families: single-view instance guidance (foreground BCE + binary
Lovász IoU surrogate, blended by lambda) and multi-view consistency
(identity + part agreement of sparse 3D point projections across views).
All objectives consume per-instance logit grids of shape (H, W, C+1)
(channel 0 = background), apply softmax internally and return the loss
value together with the gradient with respect to those logits.

Subgradient choices, fixed for determinism: the per-pixel foreground
probability is the max over part channels and routes its gradient to the
argmax channel (ties -> lowest category index); Lovász sorting breaks ties
by pixel index; the aggregated cross-view part label is a detached
constant. Every loss is normalized by the number of contributing pixels
or point-view pairs, so values are resolution independent (set
``normalize=False`` for sum semantics). Probabilities entering logs are
clamped to [1e-7, 1 - 1e-7].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import CameraCalibration, project_points, round_half_up, visibility_filter

CLAMP_EPS = 1e-7


@dataclass
class PartProbMaps:
    """Per-instance part logits for one view."""

    instance_id: int
    logits: np.ndarray  # (H, W, C+1) float64

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[2] < 2:
            raise ValueError("logits must be (H, W, C+1) with C >= 1")

    @property
    def num_parts(self) -> int:
        return self.logits.shape[2] - 1

    def probs(self) -> np.ndarray:
        return softmax(self.logits)


@dataclass
class InstanceTarget:
    """Binary mask: 1 = this human, 0 = background or other humans."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.isin(m, (0, 1)).all():
            raise ValueError("target mask must be binary")
        self.mask = m.astype(np.float64)


@dataclass
class LossOutput:
    """Loss value plus gradient grids matching the input logits."""

    value: float
    grad: object  # ndarray or nested lists of ndarrays
    components: dict = field(default_factory=dict)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def part_union(maps: PartProbMaps):
    """Per-pixel foreground probability p_h = max over part channels, plus
    the argmax channel used for gradient routing (ties -> lowest index)."""
    p = maps.probs()
    parts = p[..., 1:]
    argc = parts.argmax(axis=-1) + 1
    p_h = np.take_along_axis(p, argc[..., None], axis=-1)[..., 0]
    return p_h, argc, p


def _grad_ph_to_logits(g_ph: np.ndarray, probs: np.ndarray,
                       argc: np.ndarray) -> np.ndarray:
    """Chain d loss / d p_h through p_h = p[argc] and the softmax."""
    p_a = np.take_along_axis(probs, argc[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, argc[..., None], 1.0, axis=-1)
    return (g_ph * p_a)[..., None] * (onehot - probs)


def _clamped_log_grad(p: np.ndarray):
    """log(clamp(p)) and d/dp (zero where the clamp is active)."""
    pc = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    inside = (p > CLAMP_EPS) & (p < 1.0 - CLAMP_EPS)
    return np.log(pc), np.where(inside, 1.0 / pc, 0.0)


def binary_cross_entropy(p_h: np.ndarray, y: np.ndarray, normalize: bool = True):
    """Probability-level BCE; returns (value, d value / d p_h)."""
    if p_h.shape != y.shape:
        raise ValueError("shape mismatch")
    log_p, dlog_p = _clamped_log_grad(p_h)
    log_q, dlog_q = _clamped_log_grad(1.0 - p_h)
    n = p_h.size if normalize else 1
    value = -(y * log_p + (1.0 - y) * log_q).sum() / n
    grad = -(y * dlog_p - (1.0 - y) * dlog_q) / n
    return float(value), grad


def _lovasz_grad_from_sorted(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss with respect to
    descending-sorted errors (Berman et al. construction)."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def lovasz_binary(p_h: np.ndarray, y: np.ndarray):
    """Binary Lovász IoU surrogate on a foreground-probability grid.

    Symmetric mean over the background and foreground Jaccard terms; a
    class absent from the ground truth contributes 0. Returns
    (value, d value / d p_h). Equals the mean Jaccard loss exactly at hard
    0/1 predictions.
    """
    if p_h.shape != y.shape:
        raise ValueError("shape mismatch")
    yf = y.reshape(-1)
    qf = p_h.reshape(-1)
    total = 0.0
    grad = np.zeros_like(qf)
    for cls in (0, 1):
        gt = yf if cls == 1 else 1.0 - yf
        if gt.sum() == 0:
            continue
        q = qf if cls == 1 else 1.0 - qf
        errors = np.where(gt == 1.0, 1.0 - q, q)
        order = np.argsort(-errors, kind="stable")  # ties -> pixel index
        g = _lovasz_grad_from_sorted(gt[order])
        total += errors[order] @ g
        # d errors / d q = -1 on gt pixels else +1; d q / d p_h = +-1.
        sign_err = np.where(gt == 1.0, -1.0, 1.0)
        sign_cls = 1.0 if cls == 1 else -1.0
        gcls = np.zeros_like(qf)
        gcls[order] = g
        grad += sign_cls * sign_err * gcls
    return float(0.5 * total), 0.5 * grad.reshape(p_h.shape)


def foreground_bce(maps: PartProbMaps, target: InstanceTarget,
                   normalize: bool = True) -> LossOutput:
    """Weak-supervision foreground loss L_fg on the part-union probability."""
    p_h, argc, probs = part_union(maps)
    value, g_ph = binary_cross_entropy(p_h, target.mask, normalize=normalize)
    return LossOutput(value, _grad_ph_to_logits(g_ph, probs, argc))


def lovasz_miou(maps: PartProbMaps, target: InstanceTarget) -> LossOutput:
    """IoU surrogate loss L_mIoU on the part-union probability."""
    p_h, argc, probs = part_union(maps)
    value, g_ph = lovasz_binary(p_h, target.mask)
    return LossOutput(value, _grad_ph_to_logits(g_ph, probs, argc))


def ig_loss(maps: PartProbMaps, target: InstanceTarget, lam: float,
            normalize: bool = True) -> LossOutput:
    """Instance-guided objective: lam * L_fg + (1 - lam) * L_mIoU."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    fg = foreground_bce(maps, target, normalize=normalize)
    lv = lovasz_miou(maps, target)
    value = lam * fg.value + (1.0 - lam) * lv.value
    grad = lam * fg.grad + (1.0 - lam) * lv.grad
    return LossOutput(value, grad,
                      components={"l_fg": fg.value, "l_miou": lv.value})


# ---------------------------------------------------------------------------
# Multi-view consistency


@dataclass
class ViewSample:
    """One view inside a MultiViewSample."""

    calib: CameraCalibration
    depth: np.ndarray
    maps: list                      # list[PartProbMaps], the view's instances
    channel_of_instance: dict       # gt instance id -> index into maps

    # filled by build_multiview_sample
    cols: np.ndarray = None
    rows: np.ndarray = None
    z: np.ndarray = None
    valid: np.ndarray = None
    in_beta: np.ndarray = None


@dataclass
class MultiViewSample:
    """Sparse labeled 3D points observed by N views, with projections,
    per-view visibility flags and the per-view probability maps."""

    points: np.ndarray          # (P, 3)
    point_instance: np.ndarray  # (P,) gt instance ids
    views: list                 # list[ViewSample]
    beta: float

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


def build_multiview_sample(points, point_instance, views: Sequence[ViewSample],
                           beta: float) -> MultiViewSample:
    """Project the points into every view and compute validity and the
    beta visibility flags (via geometry.visibility_filter)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    point_instance = np.asarray(point_instance, dtype=np.int64).reshape(-1)
    if points.shape[0] != point_instance.shape[0]:
        raise ValueError("points and instance ids differ in length")
    views = list(views)
    for vs in views:
        u, v, z, valid = project_points(points, vs.calib)
        cols = np.zeros(points.shape[0], np.int64)
        rows = np.zeros(points.shape[0], np.int64)
        if valid.any():
            cols[valid] = np.clip(round_half_up(u[valid]), 0, vs.calib.width - 1)
            rows[valid] = np.clip(round_half_up(v[valid]), 0, vs.calib.height - 1)
        vs.cols, vs.rows, vs.z, vs.valid = cols, rows, z, valid
        in_beta = np.zeros(points.shape[0], bool)
        in_beta[visibility_filter(points, vs.depth, vs.calib, beta)] = True
        vs.in_beta = in_beta
    return MultiViewSample(points, point_instance, views, beta)


def _empty_grads(sample: MultiViewSample):
    return [[np.zeros_like(m.logits) for m in vs.maps] for vs in sample.views]


def identity_loss(sample: MultiViewSample, normalize: bool = True) -> LossOutput:
    """Cross-view instance identity consistency.

    For every valid projection of every point: BCE pushing the matched
    instance channel's foreground probability to 1 and every other
    channel's to 0. Invalid projections contribute nothing.
    """
    if not sample.views:
        raise ValueError("no views")
    unions = [[part_union(m) for m in vs.maps] for vs in sample.views]
    grads_ph = [[np.zeros(m.logits.shape[:2]) for m in vs.maps] for vs in sample.views]
    total = 0.0
    n_pairs = 0
    for vi, vs in enumerate(sample.views):
        for j in range(sample.num_points):
            if not vs.valid[j]:
                continue
            n_pairs += 1
            r, c = vs.rows[j], vs.cols[j]
            matched = vs.channel_of_instance.get(int(sample.point_instance[j]))
            for k in range(len(vs.maps)):
                p_h = unions[vi][k][0][r, c]
                y = 1.0 if k == matched else 0.0
                log_p, dlog_p = _clamped_log_grad(np.float64(p_h))
                log_q, dlog_q = _clamped_log_grad(np.float64(1.0 - p_h))
                total += -(y * log_p + (1.0 - y) * log_q)
                grads_ph[vi][k][r, c] += -(y * dlog_p - (1.0 - y) * dlog_q)
    if n_pairs == 0:
        warnings.warn("identity_loss: no valid projections")
        return LossOutput(0.0, _empty_grads(sample))
    denom = n_pairs if normalize else 1
    grads = []
    for vi, vs in enumerate(sample.views):
        row = []
        for k, m in enumerate(vs.maps):
            p_h, argc, probs = unions[vi][k]
            row.append(_grad_ph_to_logits(grads_ph[vi][k] / denom, probs, argc))
        grads.append(row)
    return LossOutput(float(total / denom), grads)


def aggregate_part_label(sample: MultiViewSample, point_index: int,
                         probs_cache=None) -> int:
    """Cross-view aggregated part label c*: argmax over part categories of
    the summed per-view confidences at the point's valid projections (ties
    -> lowest category index)."""
    sums = None
    for vi, vs in enumerate(sample.views):
        if not vs.valid[point_index]:
            continue
        matched = vs.channel_of_instance.get(int(sample.point_instance[point_index]))
        if matched is None:
            continue
        probs = (probs_cache[vi][matched] if probs_cache is not None
                 else vs.maps[matched].probs())
        r, c = vs.rows[point_index], vs.cols[point_index]
        contrib = probs[r, c, 1:]
        sums = contrib.copy() if sums is None else sums + contrib
    if sums is None:
        raise ValueError("point invisible everywhere")
    return int(sums.argmax()) + 1


def part_loss(sample: MultiViewSample, normalize: bool = True) -> LossOutput:
    """Cross-view part consistency over the beta-filtered point set.

    Categorical cross-entropy between the detached aggregated label c* and
    each view's category distribution at the projection; only projections
    within beta of the visible surface contribute.
    """
    if not sample.views:
        raise ValueError("no views")
    probs_cache = [[m.probs() for m in vs.maps] for vs in sample.views]
    grads = _empty_grads(sample)
    total = 0.0
    n_terms = 0
    cstar: dict = {}
    for vi, vs in enumerate(sample.views):
        for j in range(sample.num_points):
            if not vs.in_beta[j]:
                continue
            matched = vs.channel_of_instance.get(int(sample.point_instance[j]))
            if matched is None:
                continue
            if j not in cstar:
                cstar[j] = aggregate_part_label(sample, j, probs_cache)
            c_star = cstar[j]
            r, c = vs.rows[j], vs.cols[j]
            p_vec = probs_cache[vi][matched][r, c]
            p_c = p_vec[c_star]
            log_p, dlog_p = _clamped_log_grad(np.float64(p_c))
            total += -log_p
            if dlog_p != 0.0:
                # d(-log p_c)/d logits = p - onehot(c*)
                grads[vi][matched][r, c, :] += p_vec
                grads[vi][matched][r, c, c_star] -= 1.0
            n_terms += 1
    if n_terms == 0:
        warnings.warn("part_loss: beta filter removed every projection")
        return LossOutput(0.0, grads)
    denom = n_terms if normalize else 1
    grads = [[g / denom for g in row] for row in grads]
    return LossOutput(float(total / denom), grads)


def mvig_loss(sample: MultiViewSample, targets: Sequence[Sequence[InstanceTarget]],
              lam: float, normalize: bool = True) -> LossOutput:
    """Full objective: identity + part consistency plus the instance-guided
    term averaged over views and instances.

    ``targets[vi][k]`` is the InstanceTarget for ``sample.views[vi].maps[k]``.
    """
    ident = identity_loss(sample, normalize=normalize)
    prt = part_loss(sample, normalize=normalize)
    n_maps = sum(len(vs.maps) for vs in sample.views)
    ig_values = []
    fg_values = []
    miou_values = []
    grads = [[g.copy() for g in row] for row in ident.grad]
    for vi, vs in enumerate(sample.views):
        for k, m in enumerate(vs.maps):
            grads[vi][k] += prt.grad[vi][k]
            out = ig_loss(m, targets[vi][k], lam, normalize=normalize)
            ig_values.append(out.value)
            fg_values.append(out.components["l_fg"])
            miou_values.append(out.components["l_miou"])
            grads[vi][k] += out.grad / n_maps
    ig_mean = float(np.sum(ig_values) / n_maps) if n_maps else 0.0
    value = ident.value + prt.value + ig_mean
    components = {
        "l_identity": ident.value,
        "l_part": prt.value,
        "l_ig": ig_mean,
        "l_fg": float(np.mean(fg_values)) if fg_values else 0.0,
        "l_miou": float(np.mean(miou_values)) if miou_values else 0.0,
    }
    return LossOutput(float(value), grads, components=components)


def finite_difference_check(loss_fn: Callable[[np.ndarray], float],
                            logits: np.ndarray,
                            analytic_grad: np.ndarray,
                            h: float = 1e-5,
                            mask: Optional[np.ndarray] = None) -> float:
    """Max relative error between ``analytic_grad`` and central finite
    differences of ``loss_fn`` at ``logits``.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8);
    ``mask`` (same shape) excludes coordinates (e.g. sorting ties).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(logits, dtype=np.float64)
    worst = 0.0
    it = np.ndindex(x.shape)
    for idx in it:
        if mask is not None and not mask[idx]:
            continue
        orig = x[idx]
        x[idx] = orig + h
        f_plus = loss_fn(x)
        x[idx] = orig - h
        f_minus = loss_fn(x)
        x[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = analytic_grad[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
