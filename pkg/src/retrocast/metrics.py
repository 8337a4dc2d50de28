"""Forecasting and detection evaluation: minADE, minFDE, miss rate, EPA,
center-distance AP, and past-trajectory FDE.

Conventions:
- forecasting metrics are computed on confidence-greedy matches at a 2.0 m
  center-distance threshold, per dynamic class, then macro-averaged;
- empty inputs return 0.0 sentinels (never NaN) and the matched counts are
  reported alongside;
- past trajectories are ordered newest first, so index -1 is the oldest step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MISS_THRESHOLD = 2.0
MATCH_THRESHOLD = 2.0
DYNAMIC_CLASSES = ("car", "pedestrian")
AP_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class Detection:
    center_xy: np.ndarray
    class_name: str
    confidence: float
    futures: np.ndarray        # (M_f, T_f, 2)
    mode_scores: np.ndarray    # (M_f,)
    past: np.ndarray           # (T_h, 2), newest first


@dataclass
class GroundTruth:
    center_xy: np.ndarray
    class_name: str
    future: np.ndarray         # (T_f, 2)
    past: np.ndarray           # (T_h, 2), newest first
    is_dynamic: bool


@dataclass
class EvalFrame:
    detections: list[Detection]
    gts: list[GroundTruth]
    match_threshold: float = MATCH_THRESHOLD


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    epa: float
    fde_past: float
    ap: dict                     # threshold -> AP
    mean_ap: float
    per_class: dict = field(default_factory=dict)
    n_matched: int = 0
    n_gt: int = 0

    def to_dict(self) -> dict:
        return {
            "minADE": self.min_ade, "minFDE": self.min_fde,
            "MR": self.miss_rate, "EPA": self.epa, "FDE_past": self.fde_past,
            "AP": {str(k): v for k, v in self.ap.items()}, "mAP": self.mean_ap,
            "per_class": self.per_class,
            "n_matched": self.n_matched, "n_gt": self.n_gt,
        }


def min_ade(pred_modes: np.ndarray, gt: np.ndarray) -> float:
    """Min over modes of the mean step-wise L2 distance."""
    pred_modes = np.asarray(pred_modes)
    gt = np.asarray(gt)
    if pred_modes.shape[-2] != gt.shape[-2]:
        raise ValueError(
            f"horizon mismatch: {pred_modes.shape} vs {gt.shape}"
        )
    d = np.linalg.norm(pred_modes - gt[None], axis=-1)
    return float(d.mean(axis=-1).min())


def min_fde(pred_modes: np.ndarray, gt: np.ndarray) -> float:
    """Min over modes of the final-step L2 distance."""
    d = np.linalg.norm(np.asarray(pred_modes)[:, -1, :] - np.asarray(gt)[-1], axis=-1)
    return float(d.min())


def greedy_match(frame: EvalFrame) -> list[tuple[int, int]]:
    """Confidence-ordered greedy matching of detections to gts within the
    frame's center-distance threshold. Each gt matches at most once."""
    order = np.argsort([-d.confidence for d in frame.detections], kind="stable")
    taken: set[int] = set()
    pairs = []
    for di in order:
        det = frame.detections[di]
        best, best_d = -1, frame.match_threshold
        for gi, gt in enumerate(frame.gts):
            if gi in taken:
                continue
            dist = float(np.linalg.norm(det.center_xy - gt.center_xy))
            if dist <= best_d:
                best, best_d = gi, dist
        if best >= 0:
            taken.add(best)
            pairs.append((int(di), best))
    return pairs


def _class_forecast_stats(frames: list[EvalFrame], cls: str) -> dict:
    ades, fdes, misses = [], [], []
    past_fdes = []
    n_hit = 0
    n_fp = 0
    n_gt = 0
    for frame in frames:
        pairs = greedy_match(frame)
        matched_dets = {d for d, _ in pairs}
        for di, det in enumerate(frame.detections):
            if det.class_name == cls and di not in matched_dets:
                n_fp += 1
        n_gt += sum(1 for g in frame.gts if g.class_name == cls)
        for di, gi in pairs:
            gt = frame.gts[gi]
            if gt.class_name != cls:
                continue
            det = frame.detections[di]
            a = min_ade(det.futures, gt.future)
            f = min_fde(det.futures, gt.future)
            ades.append(a)
            fdes.append(f)
            misses.append(f > MISS_THRESHOLD)
            if f < MISS_THRESHOLD:
                n_hit += 1
            if gt.is_dynamic:
                past_fdes.append(
                    float(np.linalg.norm(det.past[-1] - gt.past[-1]))
                )
    epa_val = max(0.0, (n_hit - 0.5 * n_fp) / n_gt) if n_gt else 0.0
    return {
        "minADE": float(np.mean(ades)) if ades else 0.0,
        "minFDE": float(np.mean(fdes)) if fdes else 0.0,
        "MR": float(np.mean(misses)) if misses else 0.0,
        "EPA": epa_val,
        "FDE_past": float(np.mean(past_fdes)) if past_fdes else 0.0,
        "n_matched": len(ades),
        "n_gt": n_gt,
    }


def miss_rate(frames: list[EvalFrame]) -> float:
    """Fraction of matched gts whose best final-step error exceeds 2.0 m."""
    misses = []
    for frame in frames:
        for di, gi in greedy_match(frame):
            f = min_fde(frame.detections[di].futures, frame.gts[gi].future)
            misses.append(f > MISS_THRESHOLD)
    return float(np.mean(misses)) if misses else 0.0


def epa(frames: list[EvalFrame], alpha: float = 0.5) -> float:
    """(N_hit - alpha * N_FP) / N_gt, clamped below at zero.

    Hits are matched detections with min FDE < 2.0 m; FPs are unmatched
    detections. Returns 0.0 when there are no ground truths.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    n_hit = n_fp = n_gt = 0
    for frame in frames:
        pairs = greedy_match(frame)
        matched = {d for d, _ in pairs}
        n_fp += len(frame.detections) - len(matched)
        n_gt += len(frame.gts)
        for di, gi in pairs:
            if min_fde(frame.detections[di].futures, frame.gts[gi].future) < MISS_THRESHOLD:
                n_hit += 1
    if n_gt == 0:
        return 0.0
    return max(0.0, (n_hit - alpha * n_fp) / n_gt)


def fde_past(frames: list[EvalFrame]) -> float:
    """Mean L2 error at the oldest past step over matched dynamic gts."""
    errors = []
    for frame in frames:
        for di, gi in greedy_match(frame):
            gt = frame.gts[gi]
            if not gt.is_dynamic:
                continue
            errors.append(float(np.linalg.norm(
                frame.detections[di].past[-1] - gt.past[-1]
            )))
    return float(np.mean(errors)) if errors else 0.0


def detection_ap(frames: list[EvalFrame],
                 thresholds=AP_THRESHOLDS) -> dict[float, float]:
    """101-point interpolated center-distance AP per threshold.

    Detections are ranked by confidence across all frames; each gt may be
    matched once, greedily, to the closest free gt within the threshold.
    """
    out = {}
    n_gt = sum(len(f.gts) for f in frames)
    for thr in thresholds:
        records = []
        for fi, frame in enumerate(frames):
            for di, det in enumerate(frame.detections):
                records.append((det.confidence, fi, di))
        records.sort(key=lambda r: -r[0])
        taken: set[tuple[int, int]] = set()
        tp = []
        for conf, fi, di in records:
            det = frames[fi].detections[di]
            best, best_d = -1, thr
            for gi, gt in enumerate(frames[fi].gts):
                if (fi, gi) in taken:
                    continue
                dist = float(np.linalg.norm(det.center_xy - gt.center_xy))
                if dist <= best_d:
                    best, best_d = gi, dist
            if best >= 0:
                taken.add((fi, best))
                tp.append(1)
            else:
                tp.append(0)
        if n_gt == 0 or not records:
            out[thr] = 0.0
            continue
        tp = np.array(tp)
        cum_tp = np.cumsum(tp)
        precision = cum_tp / (np.arange(len(tp)) + 1)
        recall = cum_tp / n_gt
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 101):
            mask = recall >= r
            ap += precision[mask].max() if mask.any() else 0.0
        out[thr] = ap / 101.0
    return out


def evaluate_frames(frames: list[EvalFrame], alpha: float = 0.5) -> MetricsReport:
    """Aggregate report: forecasting metrics per dynamic class then
    macro-averaged over classes with matched instances; AP over all classes."""
    per_class = {}
    for cls in DYNAMIC_CLASSES:
        stats = _class_forecast_stats(frames, cls)
        if stats["n_gt"] > 0:
            per_class[cls] = stats
    present = [c for c in per_class if per_class[c]["n_matched"] > 0]

    def macro(key):
        return float(np.mean([per_class[c][key] for c in present])) if present else 0.0

    ap = detection_ap(frames)
    n_matched = sum(per_class[c]["n_matched"] for c in per_class)
    epa_val = epa(frames, alpha)
    return MetricsReport(
        min_ade=macro("minADE"),
        min_fde=macro("minFDE"),
        miss_rate=macro("MR"),
        epa=epa_val,
        fde_past=macro("FDE_past"),
        ap=ap,
        mean_ap=float(np.mean(list(ap.values()))) if ap else 0.0,
        per_class=per_class,
        n_matched=n_matched,
        n_gt=sum(len(f.gts) for f in frames),
    )
