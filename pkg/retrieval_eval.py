#!/usr/bin/env python3
"""
Retrieval Eval - AP@k / mAP@k for instance search and IoU-matched AP (mAPʳ) for segmentation.

Truncated AP normalizer: AP@k = (1 / min(|relevant|, k)) · Σ_{i≤k} P(i)·rel(i).
A perfect top-k ranking scores 1.0 even when more than k relevant images exist, and
k = None (the "all" column) is classical full AP.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from mask_utils import decode_rle, mask_overlap
from search_errors import EvaluationError, ShapeMismatchError
from seg_kernels import BBox


DEFAULT_KS = (10, 20, 50, 100, None)
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

Region = Union[BBox, np.ndarray, Dict]


def k_label(k: Optional[int]) -> str:
    return 'all' if k is None else str(k)


@dataclass(frozen=True)
class GroundTruth:
    """query_id → image ids relevant to it (the frames that contain the query instance)."""

    relevant: Dict[str, FrozenSet[str]]

    def __post_init__(self):
        for query_id, images in self.relevant.items():
            if not images:
                raise EvaluationError(f"query {query_id} has an empty relevant set", {'query_id': query_id})

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[str]]) -> 'GroundTruth':
        return cls({query_id: frozenset(images) for query_id, images in mapping.items()})

    @classmethod
    def from_manifest(cls, manifest) -> 'GroundTruth':
        return cls.from_mapping(manifest.ground_truth)

    @property
    def query_ids(self) -> List[str]:
        return sorted(self.relevant)


@dataclass
class EvalReport:
    ks: List[Optional[int]]
    per_query: Dict[str, Dict[str, float]]
    mean_ap: Dict[str, float]
    scan_counts: Dict[str, int] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> Dict:
        report = {
            'ks': [k_label(k) for k in self.ks],
            'mean_ap': self.mean_ap,
            'per_query': self.per_query,
            'scan_counts': self.scan_counts,
            'query_count': len(self.per_query),
        }
        if include_timings:
            report['timings'] = self.timings
        return report

    def csv_rows(self) -> List[List]:
        return [[query_id, k_label(k), self.per_query[query_id][k_label(k)]]
                for query_id in sorted(self.per_query) for k in self.ks]


def average_precision_at_k(ranked_images: Sequence[str], relevant: Iterable[str], k: Optional[int] = None) -> float:
    relevant = set(relevant)
    if not relevant:
        raise EvaluationError("relevant set is empty")
    if len(set(ranked_images)) != len(ranked_images):
        raise EvaluationError("ranking must be deduplicated by image before evaluation")
    if k is not None and k < 1:
        raise EvaluationError(f"k must be positive, got {k}")
    depth = len(ranked_images) if k is None else min(k, len(ranked_images))
    normalizer = len(relevant) if k is None else min(len(relevant), k)
    hits = 0
    total = 0.0
    for i in range(depth):
        if ranked_images[i] in relevant:
            hits += 1
            total += hits / (i + 1)
    return total / normalizer


def map_at_k(rankings: Mapping[str, Sequence[str]], gt: GroundTruth,
             ks: Sequence[Optional[int]] = DEFAULT_KS,
             query_ids: Optional[Sequence[str]] = None,
             scan_counts: Optional[Mapping[str, int]] = None,
             timings: Optional[Mapping[str, float]] = None) -> EvalReport:
    """Arithmetic mean of AP@k over the evaluated queries (all of gt, or the `query_ids` subset)."""
    selected = sorted(query_ids) if query_ids is not None else gt.query_ids
    if not selected:
        raise EvaluationError("no queries to evaluate")
    per_query = {}
    for query_id in selected:
        if query_id not in gt.relevant:
            raise EvaluationError(f"query {query_id} has no ground truth", {'query_id': query_id})
        if query_id not in rankings:
            raise EvaluationError(f"query {query_id} has no ranking", {'query_id': query_id})
        per_query[query_id] = {k_label(k): average_precision_at_k(rankings[query_id], gt.relevant[query_id], k)
                               for k in ks}
    mean_ap = {k_label(k): float(np.mean([per_query[q][k_label(k)] for q in selected])) for k in ks}
    return EvalReport(
        ks=list(ks),
        per_query=per_query,
        mean_ap=mean_ap,
        scan_counts={q: int(scan_counts[q]) for q in selected if scan_counts and q in scan_counts},
        timings={q: float(timings[q]) for q in selected if timings and q in timings},
    )


def write_report_json(report: EvalReport, path: Union[str, Path], include_timings: bool = False):
    with open(path, 'w') as f:
        json.dump(report.to_dict(include_timings), f, indent=2, sort_keys=True)
        f.write('\n')


def write_report_csv(report: EvalReport, path: Union[str, Path]):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['query_id', 'k', 'ap'])
        writer.writerows(report.csv_rows())


def _as_mask(region) -> np.ndarray:
    return decode_rle(region) if isinstance(region, dict) else np.asarray(region, dtype=bool)


def iou(a: Region, b: Region) -> float:
    """Intersection over union of two boxes (same frame) or two masks (arrays or COCO RLE)."""
    if isinstance(a, BBox) and isinstance(b, BBox):
        if (a.ref_width, a.ref_height) != (b.ref_width, b.ref_height):
            raise ShapeMismatchError("boxes live in different coordinate frames")
        inter_w = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
        inter_h = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
        intersection = inter_w * inter_h
        union = a.area + b.area - intersection
    elif isinstance(a, BBox) or isinstance(b, BBox):
        raise ShapeMismatchError("iou needs two boxes or two masks")
    else:
        intersection, union = mask_overlap(_as_mask(a), _as_mask(b))
    if union <= 0:
        raise EvaluationError("iou undefined: both regions are empty")
    return intersection / union


@dataclass
class ScoredInstance:
    region: Region
    score: float
    category_id: int = 0


@dataclass
class GroundTruthInstance:
    region: Region
    category_id: int = 0


def _gt_region(item) -> Region:
    return item.region if isinstance(item, GroundTruthInstance) else item


def ap_at_iou(detections: Mapping[str, Sequence[ScoredInstance]],
              gt_instances: Mapping[str, Sequence], threshold: float) -> float:
    """
    Detection AP: detections sorted by score (ties by image id, then input order), greedy
    one-to-one matching to the best unmatched ground truth with IoU ≥ threshold,
    all-point interpolated area under the precision/recall curve.
    """
    if not 0.0 < threshold < 1.0:
        raise EvaluationError(f"IoU threshold must lie in (0, 1), got {threshold}")
    total_gt = sum(len(items) for items in gt_instances.values())
    if total_gt == 0:
        raise EvaluationError("no ground-truth instances")

    ordered = sorted(
        ((det.score, image_id, position, det.region)
         for image_id, dets in detections.items() for position, det in enumerate(dets)),
        key=lambda row: (-row[0], row[1], row[2]))
    matched = {image_id: [False] * len(items) for image_id, items in gt_instances.items()}
    true_positive = np.zeros(len(ordered))
    for rank, (_, image_id, _, region) in enumerate(ordered):
        candidates = gt_instances.get(image_id, [])
        best_iou, best_index = -1.0, -1
        for index, item in enumerate(candidates):
            if matched[image_id][index]:
                continue
            overlap = iou(region, _gt_region(item))
            if overlap > best_iou:
                best_iou, best_index = overlap, index
        if best_index >= 0 and best_iou >= threshold:
            matched[image_id][best_index] = True
            true_positive[rank] = 1.0

    if not ordered:
        return 0.0
    tp_cumulative = np.cumsum(true_positive)
    recall = tp_cumulative / total_gt
    precision = tp_cumulative / np.arange(1, len(ordered) + 1)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap_at_iou(detections: Mapping[str, Sequence[ScoredInstance]],
                   gt_instances: Mapping[str, Sequence[GroundTruthInstance]], threshold: float) -> float:
    """Mean over ground-truth categories of the per-category ap_at_iou."""
    categories = sorted({item.category_id for items in gt_instances.values() for item in items})
    if not categories:
        raise EvaluationError("no ground-truth instances")
    aps = []
    for category in categories:
        dets = {image_id: [d for d in items if d.category_id == category] for image_id, items in detections.items()}
        gts = {image_id: [g for g in items if g.category_id == category] for image_id, items in gt_instances.items()}
        aps.append(ap_at_iou(dets, gts, threshold))
    return float(np.mean(aps))


def coco_map(detections: Mapping[str, Sequence[ScoredInstance]],
             gt_instances: Mapping[str, Sequence[GroundTruthInstance]]) -> Dict[str, float]:
    """The segmentation table shapes: mAPʳ@0.5, mAPʳ@0.7 and mAPʳ@[0.5:0.95]."""
    per_threshold = {t: mean_ap_at_iou(detections, gt_instances, t) for t in COCO_IOU_THRESHOLDS}
    return {
        'mAP@0.5': per_threshold[0.5],
        'mAP@0.7': per_threshold[0.7],
        'mAP@[0.5:0.95]': float(np.mean(list(per_threshold.values()))),
    }
