"""Tracking benchmark metrics: precision/success, MPR/MSR and the F-score protocol.

All box arrays are (N, 4) rows of (cx, cy, w, h). Pooling is per frame over
everything passed in; callers concatenate sequences first.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRECISION_THRESHOLDS = np.arange(0, 51, 1.0)
SUCCESS_THRESHOLDS = np.round(np.arange(0, 1.0001, 0.05), 10)
PRECISION_AT = 20.0


@dataclass
class MetricsReport:
    precision: np.ndarray
    success: np.ndarray
    pr20: float
    auc: float
    mpr: float | None = None
    msr: float | None = None
    f_score: tuple | None = None  # (Pr, Re, F, threshold)
    extra: dict = field(default_factory=dict)

    def lines(self):
        out = [f"precision@20: {float(self.pr20)!r}", f"success_auc: {float(self.auc)!r}"]
        if self.mpr is not None:
            out += [f"mpr@20: {float(self.mpr)!r}", f"msr_auc: {float(self.msr)!r}"]
        if self.f_score is not None:
            pr, re, f, th = (float(v) for v in self.f_score)
            out += [f"pr: {pr!r}", f"re: {re!r}", f"f_score: {f!r}", f"f_threshold: {th!r}"]
        out += [f"{k}: {v!r}" for k, v in sorted(self.extra.items())]
        return out


def _as_boxes(a):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    return a


def center_distance(pred, gt) -> np.ndarray:
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    return np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])


def iou(pred, gt) -> np.ndarray:
    pred, gt = _as_boxes(pred), _as_boxes(gt)
    px1, py1 = pred[:, 0] - pred[:, 2] / 2, pred[:, 1] - pred[:, 3] / 2
    px2, py2 = pred[:, 0] + pred[:, 2] / 2, pred[:, 1] + pred[:, 3] / 2
    gx1, gy1 = gt[:, 0] - gt[:, 2] / 2, gt[:, 1] - gt[:, 3] / 2
    gx2, gy2 = gt[:, 0] + gt[:, 2] / 2, gt[:, 1] + gt[:, 3] / 2
    iw = np.clip(np.minimum(px2, gx2) - np.maximum(px1, gx1), 0, None)
    ih = np.clip(np.minimum(py2, gy2) - np.maximum(py1, gy1), 0, None)
    inter = iw * ih
    # areas from the same corners so identical boxes give exactly 1
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _check_lengths(*arrays):
    n = len(arrays[0])
    for a in arrays[1:]:
        if a is not None and len(a) != n:
            raise ValueError(f"length mismatch: {n} vs {len(a)}")


def curves_from(dist, overlap):
    """Precision and success curves from per-frame center distances and IoUs."""
    dist, overlap = np.asarray(dist), np.asarray(overlap)
    if len(dist) == 0:
        raise ValueError("no frames to evaluate")
    prec = (dist[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    succ = (overlap[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return prec, succ


def _pr20(prec):
    return float(prec[int(np.flatnonzero(PRECISION_THRESHOLDS == PRECISION_AT)[0])])


def precision_success(preds, gts, visible=None) -> MetricsReport:
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    _check_lengths(preds, gts, visible)
    if visible is not None:
        keep = np.asarray(visible, dtype=bool)
        preds, gts = preds[keep], gts[keep]
    prec, succ = curves_from(center_distance(preds, gts), iou(preds, gts))
    return MetricsReport(prec, succ, _pr20(prec), float(succ.mean()))


def mpr_msr(preds, gt_rgb, gt_x, visible=None):
    """Per frame, keep the more favorable of the two modality ground truths."""
    preds, gt_rgb, gt_x = _as_boxes(preds), _as_boxes(gt_rgb), _as_boxes(gt_x)
    _check_lengths(preds, gt_rgb, gt_x, visible)
    if visible is not None:
        keep = np.asarray(visible, dtype=bool)
        preds, gt_rgb, gt_x = preds[keep], gt_rgb[keep], gt_x[keep]
    dist = np.minimum(center_distance(preds, gt_rgb), center_distance(preds, gt_x))
    overlap = np.maximum(iou(preds, gt_rgb), iou(preds, gt_x))
    prec, succ = curves_from(dist, overlap)
    return _pr20(prec), float(succ.mean()), prec, succ


def f_score(preds, confidences, gts, visible, thresholds=None):
    """Confidence-gated (Pr, Re, F, threshold) maximizing F over the sweep.

    Pr averages IoU over frames where a prediction is made (confidence >=
    threshold); Re averages IoU over visible frames, with no prediction
    counting as 0. IoU on frames without a visible target is 0.
    """
    preds, gts = _as_boxes(preds), _as_boxes(gts)
    conf = np.asarray(confidences, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    _check_lengths(preds, gts, conf, vis)
    if not vis.any():
        raise ValueError("f_score: no visible frames")
    overlap = np.where(vis, iou(preds, gts), 0.0)
    if thresholds is None:
        thresholds = np.unique(np.concatenate([conf, [0.0]]))
    best = (0.0, 0.0, 0.0, float(thresholds[0]))
    for th in thresholds:
        made = conf >= th
        pr = float(overlap[made].mean()) if made.any() else 0.0
        re = float(np.where(made & vis, overlap, 0.0)[vis].mean())
        f = harmonic(pr, re)
        if f > best[2]:
            best = (pr, re, f, float(th))
    return best


def harmonic(pr, re):
    return 0.0 if pr + re == 0 else 2 * pr * re / (pr + re)


def evaluate(preds, confidences, gts, visible, gt_x=None) -> MetricsReport:
    """Full report: precision/success, F-score, and MPR/MSR when ``gt_x`` is given."""
    rep = precision_success(preds, gts, visible)
    rep.f_score = f_score(preds, confidences, gts, visible)
    if gt_x is not None:
        rep.mpr, rep.msr, _, _ = mpr_msr(preds, gts, gt_x, visible)
    return rep


def write_report(rep: MetricsReport, path_prefix):
    """``<prefix>report.txt`` plus threshold,value curve tables."""
    with open(f"{path_prefix}report.txt", "w") as fh:
        fh.write("\n".join(rep.lines()) + "\n")
    with open(f"{path_prefix}precision.csv", "w") as fh:
        fh.writelines(f"{float(t)!r},{float(v)!r}\n" for t, v in zip(PRECISION_THRESHOLDS, rep.precision))
    with open(f"{path_prefix}success.csv", "w") as fh:
        fh.writelines(f"{float(t)!r},{float(v)!r}\n" for t, v in zip(SUCCESS_THRESHOLDS, rep.success))


def read_predictions(path):
    """Prediction file -> (frame indices, (N, 4) center boxes, confidences)."""
    idx, boxes, conf = [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            f, l, t, w, h, s = line.strip().split(",")
            w, h = float(w), float(h)
            idx.append(int(f))
            boxes.append((float(l) + w / 2, float(t) + h / 2, w, h))
            conf.append(float(s))
    return np.array(idx), np.array(boxes).reshape(-1, 4), np.array(conf)


def write_predictions(path, boxes):
    """One "frame_index,x,y,w,h,score" line per BBox; x, y are the top-left corner."""
    with open(path, "w") as fh:
        for i, b in enumerate(boxes):
            l, t, w, h = (float(v) for v in b.to_xywh())
            s = 1.0 if b.score is None else float(b.score)
            fh.write(f"{i},{l!r},{t!r},{w!r},{h!r},{s!r}\n")
