"""Detection evaluation: greedy matching, AP/mAP over IoU sweeps, mF1, confusion.

AP integrates the exact area under the monotone precision envelope (every
distinct confidence is a threshold), so values depend only on confidence
ranks. Matching for AP is class-aware; the confusion matrix matches
class-agnostically to expose cross-class mistakes, with a background
row/column for missed and spurious boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import Box, iou
from .tensor import DomainError


@dataclass(frozen=True)
class Detection:
    class_id: int
    confidence: float
    box: Box
    image_id: str = "0"


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: Box
    image_id: str = "0"


@dataclass
class MatchCounts:
    n_tp: int = 0
    n_fp: int = 0
    n_fn: int = 0


@dataclass
class EvalReport:
    class_names: list[str]
    iou_thresholds: list[float]
    ap: dict  # (class_id, threshold) -> AP
    map50: float
    map50_95: float
    mf1: float
    mf1_confidence: float
    per_class: dict  # class_id -> {"precision", "recall", "f1"} at mf1_confidence
    confusion_raw: np.ndarray
    confusion_normalized: np.ndarray
    supported_classes: list[int] = field(default_factory=list)

    def to_text(self):
        primary = 0.5 if 0.5 in self.iou_thresholds else self.iou_thresholds[0]
        lines = ["detection evaluation report", ""]
        lines.append(f"iou_thresholds: {' '.join(f'{t:g}' for t in self.iou_thresholds)}")
        lines.append(f"map50: {self.map50:.6f}")
        lines.append(f"map50_95: {self.map50_95:.6f}")
        lines.append(f"mf1: {self.mf1:.6f}")
        lines.append(f"mf1_confidence: {self.mf1_confidence:.6f}")
        lines.append("")
        lines.append("class ap50 ap50_95 precision recall f1")
        for ci, name in enumerate(self.class_names):
            ap50 = self.ap.get((ci, primary), 0.0)
            ap_all = np.mean([self.ap.get((ci, t), 0.0) for t in self.iou_thresholds])
            pc = self.per_class.get(ci, {"precision": 0.0, "recall": 0.0, "f1": 0.0})
            lines.append(f"{name} {ap50:.6f} {ap_all:.6f} "
                         f"{pc['precision']:.6f} {pc['recall']:.6f} {pc['f1']:.6f}")
        lines.append("")
        lines.append("confusion_raw (rows: true incl background, cols: predicted)")
        for row in self.confusion_raw:
            lines.append(" ".join(str(int(v)) for v in row))
        lines.append("confusion_normalized")
        for row in self.confusion_normalized:
            lines.append(" ".join(f"{v:.6f}" for v in row))
        return "\n".join(lines) + "\n"


def _group(items):
    by_key = {}
    for it in items:
        by_key.setdefault(it.image_id, []).append(it)
    return by_key


def match(dets, gts, iou_t: float):
    """Greedy confidence-ordered matching within one class.

    Detections must already be sorted by descending confidence (ties keep
    input order). Each detection takes the unmatched ground truth of its
    image with the highest IoU >= iou_t (ties to the lower index). Returns
    (MatchCounts, tp_flags aligned with the detections).
    """
    gts_by_image = _group(gts)
    used = {img: [False] * len(g) for img, g in gts_by_image.items()}
    flags = []
    for det in dets:
        cand = gts_by_image.get(det.image_id, [])
        best_iou, best_idx = iou_t, -1
        for gi, gt in enumerate(cand):
            if used[det.image_id][gi]:
                continue
            val = iou(det.box, gt.box)
            if val <= 0:
                continue
            if val > best_iou or (val == best_iou and best_idx == -1):
                best_iou, best_idx = val, gi
        if best_idx >= 0:
            used[det.image_id][best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = sum(flags)
    counts = MatchCounts(n_tp=tp, n_fp=len(flags) - tp,
                         n_fn=len(gts) - tp)
    return counts, flags


def precision_recall(counts: MatchCounts):
    """P := 0 with no detections; R := 1 when there is nothing to recall."""
    dets = counts.n_tp + counts.n_fp
    gts = counts.n_tp + counts.n_fn
    p = counts.n_tp / dets if dets else 0.0
    r = counts.n_tp / gts if gts else 1.0
    return p, r


def _sorted_class_dets(dets, class_id):
    keyed = [d for d in dets if d.class_id == class_id]
    order = sorted(range(len(keyed)), key=lambda i: (-keyed[i].confidence, i))
    return [keyed[i] for i in order]


def average_precision(dets, gts, class_id: int, iou_t: float) -> float:
    """Exact all-point AP for one class at one IoU threshold."""
    class_gts = [g for g in gts if g.class_id == class_id]
    n_gt = len(class_gts)
    if n_gt == 0:
        return 0.0
    class_dets = _sorted_class_dets(dets, class_id)
    if not class_dets:
        return 0.0
    _, flags = match(class_dets, class_gts, iou_t)
    tp_cum = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    recalls = tp_cum / n_gt
    precisions = tp_cum / ranks
    # monotone envelope, then integrate over recall increments
    recalls = np.concatenate([[0.0], recalls])
    precisions = np.concatenate([[1.0], precisions])
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    return float(np.sum((recalls[1:] - recalls[:-1]) * env[1:]))


DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def map_and_mf1(dets, gts, num_classes, iou_thresholds=DEFAULT_IOU_THRESHOLDS):
    """(map50, map50_95, mf1, mf1_confidence, ap dict, per-class stats, support).

    Classes with no ground-truth instances are excluded from every mean.
    mF1 is evaluated at IoU 0.5 at the confidence (swept over all detection
    confidences) that maximizes the class-mean F1.
    """
    supported = [c for c in range(num_classes)
                 if any(g.class_id == c for g in gts)]
    primary = 0.5 if 0.5 in iou_thresholds else iou_thresholds[0]
    ap = {}
    for c in range(num_classes):
        for t in iou_thresholds:
            ap[(c, t)] = average_precision(dets, gts, c, t) if c in supported else 0.0
    if supported:
        map50 = float(np.mean([ap[(c, primary)] for c in supported]))
        map50_95 = float(np.mean([np.mean([ap[(c, t)] for t in iou_thresholds])
                                  for c in supported]))
    else:
        map50, map50_95 = 0.0, 0.0

    candidates = sorted({d.confidence for d in dets}, reverse=True) or [0.0]
    best_f1, best_conf, best_stats = -1.0, candidates[0], {}
    for conf in candidates:
        kept = [d for d in dets if d.confidence >= conf]
        f1s, stats = [], {}
        for c in supported:
            class_dets = _sorted_class_dets(kept, c)
            class_gts = [g for g in gts if g.class_id == c]
            counts, _ = match(class_dets, class_gts, 0.5)
            p, r = precision_recall(counts)
            f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
            f1s.append(f1)
            stats[c] = {"precision": p, "recall": r, "f1": f1}
        mean_f1 = float(np.mean(f1s)) if f1s else 0.0
        if mean_f1 > best_f1:
            best_f1, best_conf, best_stats = mean_f1, conf, stats
    return map50, map50_95, max(best_f1, 0.0), best_conf, ap, best_stats, supported


def confusion_matrix(dets, gts, conf_t: float, iou_t: float, num_classes: int):
    """(C+1)x(C+1) raw counts and row-normalized matrix, background last.

    Matching is class-agnostic, best IoU first, one-to-one. Matched pairs
    land at (true class, predicted class); unmatched ground truths at
    (true, background); unmatched detections at (background, predicted).
    """
    raw = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    kept = [d for d in dets if d.confidence >= conf_t]
    for img, img_gts in _group(gts).items():
        img_dets = [d for d in kept if d.image_id == img]
        pairs = []
        for di, d in enumerate(img_dets):
            for gi, g in enumerate(img_gts):
                val = iou(d.box, g.box)
                if val >= iou_t:
                    pairs.append((val, di, gi))
        pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
        det_used = [False] * len(img_dets)
        gt_used = [False] * len(img_gts)
        for val, di, gi in pairs:
            if det_used[di] or gt_used[gi]:
                continue
            det_used[di] = True
            gt_used[gi] = True
            raw[img_gts[gi].class_id, img_dets[di].class_id] += 1
        for gi, g in enumerate(img_gts):
            if not gt_used[gi]:
                raw[g.class_id, num_classes] += 1
        for di, d in enumerate(img_dets):
            if not det_used[di]:
                raw[num_classes, d.class_id] += 1
    # detections on images with no ground truth at all
    gt_images = set(_group(gts))
    for d in kept:
        if d.image_id not in gt_images:
            raw[num_classes, d.class_id] += 1

    norm = np.zeros_like(raw, dtype=np.float64)
    sums = raw.sum(axis=1)
    for i in range(num_classes + 1):
        if sums[i] > 0:
            norm[i] = raw[i] / sums[i]
    return raw, norm


def evaluate(dets, gts, class_names, iou_thresholds=DEFAULT_IOU_THRESHOLDS,
             confusion_conf=0.25, confusion_iou=0.5) -> EvalReport:
    """Full evaluation over a detection/ground-truth corpus."""
    if not class_names:
        raise DomainError("evaluate", "class name list is empty")
    nc = len(class_names)
    bad = [d for d in dets if not 0 <= d.class_id < nc]
    bad += [g for g in gts if not 0 <= g.class_id < nc]
    if bad:
        raise DomainError("evaluate", f"class id {bad[0].class_id} outside 0..{nc - 1}")
    map50, map50_95, mf1, mf1_conf, ap, per_class, supported = map_and_mf1(
        dets, gts, nc, iou_thresholds
    )
    raw, norm = confusion_matrix(dets, gts, confusion_conf, confusion_iou, nc)
    return EvalReport(
        class_names=list(class_names),
        iou_thresholds=list(iou_thresholds),
        ap=ap,
        map50=map50,
        map50_95=map50_95,
        mf1=mf1,
        mf1_confidence=mf1_conf,
        per_class=per_class,
        confusion_raw=raw,
        confusion_normalized=norm,
        supported_classes=supported,
    )


def pr_curve_rows(dets, gts, class_id: int, iou_t: float = 0.5):
    """(recall, precision) rows of the cumulative sweep, for CSV export."""
    class_gts = [g for g in gts if g.class_id == class_id]
    class_dets = _sorted_class_dets(dets, class_id)
    if not class_gts or not class_dets:
        return []
    _, flags = match(class_dets, class_gts, iou_t)
    tp_cum = np.cumsum(flags)
    rows = []
    for i, det in enumerate(class_dets):
        rows.append((det.confidence, tp_cum[i] / len(class_gts), tp_cum[i] / (i + 1)))
    return rows
