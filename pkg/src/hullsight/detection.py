"""Detection evaluation: IoU, greedy matching, AP and the mAP family.

Conventions:

* IoU thresholds are inclusive (``iou >= t`` matches).
* Detections are ranked by descending confidence, ties broken by input order.
* AP is the mean interpolated precision at the 101 recall points
  0.00, 0.01, ..., 1.00, with a monotone (non-increasing) precision envelope.
* A class with neither ground truths nor detections has no AP and is left
  out of the means; detections of a class with no ground truths give AP 0.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = 101


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"invalid box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    class_id: int
    image_id: Hashable = 0


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    confidence: float
    image_id: Hashable = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _ranking(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]]   # (det index, gt index, iou)
    unmatched_dets: List[int]
    unmatched_gts: List[int]

    @property
    def tp(self) -> int:
        return len(self.pairs)


def match(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float) -> MatchResult:
    """Greedy one-to-one matching within a single image.

    Each detection, in ranking order, takes the unmatched same-class ground
    truth of highest IoU, provided that IoU reaches the threshold.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    taken = [False] * len(gts)
    pairs, loose = [], []
    for di in _ranking(dets):
        d = dets[di]
        best, best_iou = -1, -1.0
        for gi, g in enumerate(gts):
            if taken[gi] or g.class_id != d.class_id:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            taken[best] = True
            pairs.append((di, best, best_iou))
        else:
            loose.append(di)
    return MatchResult(pairs, sorted(loose), [gi for gi, t in enumerate(taken) if not t])


def _tp_flags(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
              iou_threshold: float) -> Tuple[np.ndarray, int]:
    """TP indicator for the class's detections in dataset ranking order, and #gt."""
    cls_dets = [d for d in dets if d.class_id == class_id]
    cls_gts = [g for g in gts if g.class_id == class_id]
    by_image: Dict[Hashable, List[int]] = defaultdict(list)
    for gi, g in enumerate(cls_gts):
        by_image[g.image_id].append(gi)
    taken = [False] * len(cls_gts)
    flags = np.zeros(len(cls_dets), dtype=bool)
    for rank, di in enumerate(_ranking(cls_dets)):
        d = cls_dets[di]
        best, best_iou = -1, -1.0
        for gi in by_image.get(d.image_id, ()):
            if taken[gi]:
                continue
            v = iou(d.box, cls_gts[gi].box)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = gi, v
        if best >= 0:
            taken[best] = True
            flags[rank] = True
    return flags, len(cls_gts)


def precision_recall(dets, gts, class_id: int, iou_threshold: float):
    """Cumulative (precision, recall) arrays along the confidence ranking."""
    flags, n_gt = _tp_flags(dets, gts, class_id, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_gt if n_gt else np.zeros_like(precision, dtype=float)
    return precision, recall


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int,
                      iou_threshold: float) -> Optional[float]:
    """101-point interpolated AP; None when the class has no GT and no detections."""
    flags, n_gt = _tp_flags(dets, gts, class_id, iou_threshold)
    if n_gt == 0:
        return None if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(RECALL_POINTS):
        # recall >= k/100, compared exactly in integers
        reached = np.nonzero(tp * (RECALL_POINTS - 1) >= k * n_gt)[0]
        if reached.size:
            total += envelope[reached[0]]
    return float(total / RECALL_POINTS)


@dataclass
class ClassStats:
    ap: Dict[float, Optional[float]]
    n_gt: int
    n_det: int
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0


@dataclass
class EvalReport:
    per_class: Dict[int, ClassStats]
    map50: float
    map5095: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    iou_thresholds: Tuple[float, ...] = IOU_THRESHOLDS
    conf_threshold: float = 0.5
    unknown_class_ids: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        per = {}
        for c in sorted(self.per_class):
            s = self.per_class[c]
            per[str(c)] = {
                "ap": {f"{t:.2f}": s.ap[t] for t in self.iou_thresholds},
                "n_gt": s.n_gt, "n_det": s.n_det,
                "tp": s.tp, "fp": s.fp, "fn": s.fn,
                "precision": s.precision, "recall": s.recall,
            }
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "precision": self.precision,
            "recall": self.recall,
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "iou_thresholds": list(self.iou_thresholds),
            "conf_threshold": self.conf_threshold,
            "per_class": per,
            "unknown_class_ids": sorted(self.unknown_class_ids),
        }


def _count_at(dets, gts, class_id, iou_threshold, conf_threshold):
    kept = [d for d in dets if d.class_id == class_id and d.confidence >= conf_threshold]
    by_img_d: Dict[Hashable, List[Detection]] = defaultdict(list)
    by_img_g: Dict[Hashable, List[GroundTruth]] = defaultdict(list)
    for d in kept:
        by_img_d[d.image_id].append(d)
    for g in gts:
        if g.class_id == class_id:
            by_img_g[g.image_id].append(g)
    tp = 0
    for img, ds in by_img_d.items():
        tp += match(ds, by_img_g.get(img, []), iou_threshold).tp
    n_gt = sum(len(v) for v in by_img_g.values())
    return tp, len(kept) - tp, n_gt - tp


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth],
             classes: Optional[Iterable[int]] = None, conf_threshold: float = 0.5,
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """Dataset-level report: AP per class and threshold, mAP@0.5, mAP@0.5:0.95,
    and precision/recall at IoU 0.5 with the given confidence cut."""
    thresholds = tuple(iou_thresholds)
    unknown: List[int] = []
    if classes is not None:
        known = set(classes)
        unknown = sorted({d.class_id for d in dets if d.class_id not in known})
        dets = [d for d in dets if d.class_id in known]
        universe = sorted(known | {g.class_id for g in gts})
    else:
        universe = sorted({g.class_id for g in gts} | {d.class_id for d in dets})

    per_class: Dict[int, ClassStats] = {}
    for c in universe:
        aps = {t: average_precision(dets, gts, c, t) for t in thresholds}
        tp, fp, fn = _count_at(dets, gts, c, thresholds[0], conf_threshold)
        per_class[c] = ClassStats(aps, sum(g.class_id == c for g in gts),
                                  sum(d.class_id == c for d in dets), tp, fp, fn)

    defined = [s for s in per_class.values() if s.ap[thresholds[0]] is not None]
    map50 = float(np.mean([s.ap[thresholds[0]] for s in defined])) if defined else 0.0
    map5095 = float(np.mean([[s.ap[t] for t in thresholds] for s in defined])) if defined else 0.0
    tp = sum(s.tp for s in per_class.values())
    fp = sum(s.fp for s in per_class.values())
    fn = sum(s.fn for s in per_class.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvalReport(per_class, map50, map5095, precision, recall, tp, fp, fn,
                      thresholds, conf_threshold, unknown)
