"""Set matching, detection loss, Laplacian trajectory losses, scoring
losses, loss composition, and the teacher-forcing curriculum."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .diffcore import Tensor, as_tensor, softmax


class LossInputError(ValueError):
    """Raised for invalid loss inputs (e.g. nonpositive scales)."""


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]            # (query index, gt index)
    unmatched_queries: list[int]
    unmatched_gts: list[int]
    gate_flags: list[bool]                  # per pair: center distance <= gate

    @property
    def gated_pairs(self) -> list[tuple[int, int]]:
        return [p for p, g in zip(self.pairs, self.gate_flags) if g]


@dataclass
class LossReport:
    l_det: float
    l_past: float
    l_future: float
    total: float
    breakdown: dict = field(default_factory=dict)


def match_detections(pred_centers: np.ndarray, class_logits: np.ndarray,
                     gt_centers: np.ndarray, gt_classes: np.ndarray,
                     gate_distance: float = 1.0) -> Assignment:
    """Hungarian assignment on center L2 distance plus classification cost."""
    n_pred = len(pred_centers)
    n_gt = len(gt_centers)
    if n_gt == 0:
        return Assignment([], list(range(n_pred)), [], [])
    pred_xy = np.asarray(pred_centers)[:, :2]
    gt_xy = np.asarray(gt_centers)[:, :2]
    dist = np.linalg.norm(pred_xy[:, None, :] - gt_xy[None, :, :], axis=-1)
    logits = np.asarray(class_logits)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cls_cost = -probs[:, np.asarray(gt_classes, dtype=int)]
    rows, cols = linear_sum_assignment(dist + cls_cost)
    pairs = list(zip(rows.tolist(), cols.tolist()))
    gates = [bool(dist[q, g] <= gate_distance) for q, g in pairs]
    matched_q = {q for q, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_queries=[i for i in range(n_pred) if i not in matched_q],
        unmatched_gts=[j for j in range(n_gt) if j not in matched_g],
        gate_flags=gates,
    )


def laplace_nll(pred_mean, pred_scale, target) -> Tensor:
    """Isotropic-Laplacian NLL log(2*sigma) + |x - mu| / sigma, summed over
    the trailing coordinate axis and averaged over everything else."""
    mean = as_tensor(pred_mean)
    scale = as_tensor(pred_scale)
    if np.any(scale.value <= 0):
        raise LossInputError("Laplacian scales must be strictly positive")
    target = as_tensor(target).detach()
    term = ((2.0 * scale).log() + (target - mean).abs() / scale).sum(axis=-1)
    return term.mean()


def past_score_targets(hyp_means: np.ndarray, gt_past: np.ndarray,
                       assignment: Assignment,
                       tau: float = 1.0) -> np.ndarray | None:
    """Detached scoring targets 2*sigmoid(-ADE/tau) per gated pair, or None
    when no pair passes the gate."""
    pairs = assignment.gated_pairs
    if not pairs:
        return None
    q_idx = np.array([q for q, _ in pairs])
    g_idx = np.array([g for _, g in pairs])
    hm = np.asarray(hyp_means)[q_idx][..., 0:2]  # (n, M_h, T_h, 2); tolerate
    #                                              a full mean+scale block
    gt = np.asarray(gt_past)[g_idx][:, None]     # (n, 1, T_h, 2)
    ade = np.linalg.norm(hm - gt, axis=-1).mean(axis=-1)   # (n, M_h)
    return 2.0 / (1.0 + np.exp(ade / tau))


def past_scoring_loss(scores: Tensor, hyp_means: Tensor, gt_past: np.ndarray,
                      assignment: Assignment, tau: float = 1.0,
                      targets: np.ndarray | None = None) -> Tensor:
    """BCE against targets 2*sigmoid(-ADE/tau): a perfect hypothesis maps to
    target 1, diverging ones to 0. Gated pairs only.

    The targets are treated as constants (no gradient flows through the
    hypothesis positions here); pass `targets` explicitly to hold them fixed
    across repeated evaluations, e.g. for finite-difference verification.
    """
    pairs = assignment.gated_pairs
    if not pairs:
        return Tensor(0.0)
    if targets is None:
        targets = past_score_targets(hyp_means.value, gt_past, assignment, tau)
    q_idx = np.array([q for q, _ in pairs])
    s = scores[q_idx]                            # (n, M_h)
    # stable BCE on logits: softplus(s) - t * s
    return (s.softplus() - Tensor(targets) * s).mean()


def future_score_targets(future_means: np.ndarray, gt_future: np.ndarray,
                         assignment: Assignment,
                         tau: float = 2.0) -> np.ndarray | None:
    """Detached soft mode targets softmax(-FDE_m/tau) per gated pair."""
    pairs = assignment.gated_pairs
    if not pairs:
        return None
    q_idx = np.array([q for q, _ in pairs])
    g_idx = np.array([g for _, g in pairs])
    fm = np.asarray(future_means)[q_idx]         # (n, M_f, T_f, 2)
    gt = np.asarray(gt_future)[g_idx]            # (n, T_f, 2)
    fde = np.linalg.norm(fm[:, :, -1, :] - gt[:, None, -1, :], axis=-1)  # (n, M_f)
    z = -fde / tau
    z -= z.max(axis=1, keepdims=True)
    return np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)


def future_scoring_loss(mode_scores: Tensor, future_means: Tensor,
                        gt_future: np.ndarray, assignment: Assignment,
                        tau: float = 2.0,
                        targets: np.ndarray | None = None) -> Tensor:
    """Cross-entropy against soft targets softmax(-FDE_m / tau) over modes.

    Targets are detached; see `past_scoring_loss` for the `targets` override.
    """
    pairs = assignment.gated_pairs
    if not pairs:
        return Tensor(0.0)
    if targets is None:
        targets = future_score_targets(future_means.value, gt_future,
                                       assignment, tau)
    q_idx = np.array([q for q, _ in pairs])
    s = mode_scores[q_idx]
    logp = log_softmax(s, axis=-1)
    return -(Tensor(targets) * logp).sum(axis=-1).mean()


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shift = x - Tensor(x.value.max(axis=axis, keepdims=True))
    lse = shift.exp().sum(axis=axis, keepdims=True).log()
    return shift - lse


def cross_entropy(logits: Tensor, targets: np.ndarray,
                  weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean CE over integer class targets."""
    logp = log_softmax(logits, axis=-1)
    n = logits.shape[0]
    picked = logp[np.arange(n), np.asarray(targets, dtype=int)]
    if weights is None:
        return -picked.mean()
    w = np.asarray(weights, dtype=float)
    return -(picked * Tensor(w)).sum() / float(w.sum())


def detection_loss(boxes, class_logits: Tensor, assignment: Assignment,
                   gts: list[dict], no_object_weight: float = 0.5) -> Tensor:
    """L1 box regression on matched pairs + classification CE on all queries.

    `gts` entries carry center (3,), log_size (3,), yaw_sincos (2,),
    velocity (2,), class_id (int). The no-object class is the last logit.
    """
    n_queries, n_cls = class_logits.shape
    targets = np.full(n_queries, n_cls - 1, dtype=int)
    weights = np.full(n_queries, no_object_weight)
    reg_terms = []
    for q, g in assignment.pairs:
        gt = gts[g]
        targets[q] = gt["class_id"]
        weights[q] = 1.0
        diff = (
            (boxes.center[q] - Tensor(gt["center"])).abs().sum()
            + (boxes.log_size[q] - Tensor(gt["log_size"])).abs().sum()
            + (boxes.yaw_sincos[q] - Tensor(gt["yaw_sincos"])).abs().sum()
            + (boxes.velocity[q] - Tensor(gt["velocity"])).abs().sum()
        )
        reg_terms.append(diff)
    ce = cross_entropy(class_logits, targets, weights)
    if reg_terms:
        reg = sum(reg_terms[1:], reg_terms[0]) / float(len(reg_terms))
        return reg + ce
    return ce


def total_loss(l_det, l_past, l_future, lambda_past: float = 0.2,
               lambda_future: float = 0.1):
    """Weighted objective: detection + lambda_p * past + lambda_f * future.

    Accepts floats or Tensors; returns (total, LossReport) where the report
    carries float values.
    """
    det_t, past_t, fut_t = as_tensor(l_det), as_tensor(l_past), as_tensor(l_future)
    total = det_t + lambda_past * past_t + lambda_future * fut_t
    report = LossReport(
        l_det=float(det_t.value),
        l_past=float(past_t.value),
        l_future=float(fut_t.value),
        total=float(total.value),
    )
    return total, report


def curriculum_ratio(step: int, total_steps: int) -> float:
    """Teacher-forcing ratio: linear decay 1 -> 0 over the first half."""
    half = max(1, total_steps // 2)
    return max(0.0, 1.0 - step / half)


def teacher_forcing_mix(P_refined: Tensor, P_gt: np.ndarray, ratio: float,
                        assignment: Assignment, seed: int) -> Tensor:
    """Per assigned object, substitute the ground-truth past with probability
    `ratio` (seeded draw). Unassigned objects keep the refined trajectory.

    `P_gt` is indexed by query: rows for unassigned queries are ignored.
    """
    if not 0.0 <= ratio <= 1.0:
        raise LossInputError(f"teacher forcing ratio must be in [0, 1], got {ratio}")
    n = P_refined.shape[0]
    rng = np.random.default_rng([int(seed), 0x7F])
    draws = rng.random(n)
    mask = np.zeros((n, 1, 1))
    for q, _ in assignment.pairs:
        if draws[q] < ratio:
            mask[q] = 1.0
    return P_refined * Tensor(1.0 - mask) + Tensor(np.asarray(P_gt) * mask)
