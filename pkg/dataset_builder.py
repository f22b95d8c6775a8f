#!/usr/bin/env python3
"""
Dataset Builder - builds video-instance retrieval benchmarks from tracking-video annotations and
generates synthetic distractor features for scalability runs.

Per video: frame 0 is the query (its bbox defines the instance); frames 1, 1+s, 1+2s, ... are
references, with s = 5 (keep one, skip four) by default or s = 4 for the alternate reading.
A reference is relevant to its own video's query whenever the target is annotated present.

Annotation directory layout, one sub-directory per video:
    groundtruth.txt   frame_index,x,y,w,h per line (w or h of 0 / NaN = target absent)
    meta.json         {"category": "car", "width": 640, "height": 480, "frames": [...optional...]}
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from coco_labels import category_frequencies, category_id_for, is_coco_category
from feature_pipeline import FeatureArchiveWriter, InstanceFeature
from search_errors import FormatError, ManifestError
from seg_kernels import BBox

logger = logging.getLogger(__name__)

DISTRACTOR_BLOCK_IMAGES = 4096
DEFAULT_INSTANCES_PER_IMAGE = 1_648_654 / 1_000_000
TRUE_POSITIVE_THRESHOLD = 20


class FrameStride(Enum):
    KEEP_ONE_SKIP_FOUR = 5
    EVERY_FOURTH = 4


@dataclass
class VideoAnnotation:
    video_id: str
    frames: List[str]
    boxes: List[Optional[BBox]]
    category_id: Optional[int] = None
    category_name: str = 'other'

    def __post_init__(self):
        if not self.frames:
            raise ManifestError(f"video {self.video_id} has no frames", {'video_id': self.video_id})
        if len(self.boxes) != len(self.frames):
            raise ManifestError(f"video {self.video_id}: {len(self.boxes)} boxes for {len(self.frames)} frames",
                                {'video_id': self.video_id})
        if self.boxes[0] is None:
            raise ManifestError(f"video {self.video_id}: first frame must carry the query bbox",
                                {'video_id': self.video_id})


@dataclass
class QueryEntry:
    query_id: str
    image_id: str
    image_path: str
    bbox: BBox
    category_id: Optional[int]


@dataclass
class ReferenceEntry:
    image_id: str
    image_path: str
    video_id: str
    frame_index: int


@dataclass
class BenchmarkManifest:
    queries: List[QueryEntry]
    references: List[ReferenceEntry]
    ground_truth: Dict[str, List[str]]
    stride: int = FrameStride.KEEP_ONE_SKIP_FOUR.value

    def reference_ids(self) -> List[str]:
        return [reference.image_id for reference in self.references]


def frame_image_id(video_id: str, frame_index: int) -> str:
    return f"{video_id}_{frame_index:06d}"


def reference_indices(frame_count: int, stride: FrameStride = FrameStride.KEEP_ONE_SKIP_FOUR) -> List[int]:
    return list(range(1, frame_count, stride.value))


def build_manifest(videos: Sequence[VideoAnnotation],
                   stride: FrameStride = FrameStride.KEEP_ONE_SKIP_FOUR,
                   category_filter: bool = True) -> BenchmarkManifest:
    queries = []
    references = []
    ground_truth = {}
    for video in sorted(videos, key=lambda v: v.video_id):
        if category_filter and not is_coco_category(video.category_id):
            logger.info(f"⏭️ Skipping {video.video_id}: category '{video.category_name}' is outside COCO-80")
            continue
        sampled = reference_indices(len(video.frames), stride)
        relevant = [frame_image_id(video.video_id, i) for i in sampled if video.boxes[i] is not None]
        if not relevant:
            logger.warning(f"⚠️ Skipping {video.video_id}: no sampled frame shows the target")
            continue
        query_image = frame_image_id(video.video_id, 0)
        queries.append(QueryEntry(video.video_id, query_image, video.frames[0], video.boxes[0], video.category_id))
        references.extend(ReferenceEntry(frame_image_id(video.video_id, i), video.frames[i], video.video_id, i)
                          for i in sampled)
        ground_truth[video.video_id] = relevant

    if not queries:
        raise ManifestError("no videos left after filtering", {'videos': len(videos)})
    logger.info(f"✅ Manifest: {len(queries)} queries, {len(references)} reference images")
    return BenchmarkManifest(queries, references, ground_truth, stride.value)


@dataclass
class TruePositiveHistogram:
    per_query: Dict[str, int]
    sizes: Dict[int, int] = field(default_factory=dict)
    fraction_over_threshold: float = 0.0
    threshold: int = TRUE_POSITIVE_THRESHOLD

    def binned(self, width: int = 10) -> Dict[str, int]:
        bins = Counter()
        for size, count in self.sizes.items():
            lo = (size // width) * width
            bins[f"{lo}-{lo + width - 1}"] += count
        return dict(sorted(bins.items(), key=lambda item: int(item[0].split('-')[0])))

    def to_dict(self) -> Dict:
        return {'per_query': self.per_query, 'sizes': {str(k): v for k, v in sorted(self.sizes.items())},
                'bins_of_10': self.binned(10), 'threshold': self.threshold,
                'fraction_over_threshold': self.fraction_over_threshold}


def true_positive_histogram(manifest: BenchmarkManifest, threshold: int = TRUE_POSITIVE_THRESHOLD) -> TruePositiveHistogram:
    per_query = {query_id: len(images) for query_id, images in sorted(manifest.ground_truth.items())}
    sizes = dict(sorted(Counter(per_query.values()).items()))
    over = sum(1 for size in per_query.values() if size > threshold)
    fraction = over / len(per_query) if per_query else 0.0
    return TruePositiveHistogram(per_query, sizes, fraction, threshold)


def _bbox_dict(bbox: BBox) -> Dict:
    return {'bbox': bbox.as_list(), 'width': bbox.ref_width, 'height': bbox.ref_height}


def manifest_to_dict(manifest: BenchmarkManifest) -> Dict:
    return {
        'stride': manifest.stride,
        'queries': [{'query_id': q.query_id, 'image_id': q.image_id, 'image_path': q.image_path,
                     'category_id': q.category_id, **_bbox_dict(q.bbox)} for q in manifest.queries],
        'references': [{'image_id': r.image_id, 'image_path': r.image_path, 'video_id': r.video_id,
                        'frame_index': r.frame_index} for r in manifest.references],
        'ground_truth': manifest.ground_truth,
    }


def write_manifest(manifest: BenchmarkManifest, path: Union[str, Path]):
    with open(path, 'w') as f:
        json.dump(manifest_to_dict(manifest), f, indent=2, sort_keys=True)
        f.write('\n')


def read_manifest(path: Union[str, Path]) -> BenchmarkManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
        queries = [QueryEntry(q['query_id'], q['image_id'], q['image_path'],
                              BBox(*q['bbox'], ref_width=q['width'], ref_height=q['height']), q['category_id'])
                   for q in data['queries']]
        references = [ReferenceEntry(r['image_id'], r['image_path'], r['video_id'], r['frame_index'])
                      for r in data['references']]
        return BenchmarkManifest(queries, references, data['ground_truth'], data.get('stride', 5))
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"invalid manifest: {e}", {'path': path}) from e


def _parse_box_line(line: str, width: float, height: float) -> Optional[BBox]:
    _, x, y, w, h = (float(v) for v in line.replace('\t', ',').split(',')[:5])
    if any(math.isnan(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
        return None
    x_min = min(max(x, 0.0), width)
    y_min = min(max(y, 0.0), height)
    return BBox(x_min, y_min, min(x + w, width), min(y + h, height), width, height)


def load_video_annotation(video_dir: Union[str, Path]) -> VideoAnnotation:
    """Read groundtruth.txt + meta.json from one video directory."""
    video_dir = Path(video_dir)
    meta_path = video_dir / 'meta.json'
    gt_path = video_dir / 'groundtruth.txt'
    try:
        meta = json.loads(meta_path.read_text())
        width, height = float(meta['width']), float(meta['height'])
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"unreadable meta.json: {e}", {'path': meta_path}) from e

    boxes_by_frame = {}
    try:
        for line in gt_path.read_text().splitlines():
            if line.strip():
                frame_index = int(float(line.split(',')[0]))
                boxes_by_frame[frame_index] = _parse_box_line(line, width, height)
    except (OSError, ValueError) as e:
        raise FormatError(f"unreadable groundtruth.txt: {e}", {'path': gt_path}) from e
    if not boxes_by_frame:
        raise FormatError("groundtruth.txt is empty", {'path': gt_path})

    frame_count = max(boxes_by_frame) + 1
    frames = meta.get('frames') or [str(video_dir / 'img' / f"{i + 1:04d}.jpg") for i in range(frame_count)]
    boxes = [boxes_by_frame.get(i) for i in range(len(frames))]
    category_name = meta.get('category', 'other')
    return VideoAnnotation(video_dir.name, frames, boxes, category_id_for(category_name), category_name)


def load_annotation_dir(root: Union[str, Path]) -> List[VideoAnnotation]:
    """Every video sub-directory; broken videos are logged and skipped."""
    videos = []
    for video_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        try:
            videos.append(load_video_annotation(video_dir))
        except (FormatError, ManifestError) as e:
            logger.warning(f"⚠️ Skipping video {video_dir.name}: {e}")
    return videos


def _distractor_block(seed: int, block: int, first_image: int, images: int, dim: int,
                      instances_per_image: float, frequencies: np.ndarray) -> Iterator[InstanceFeature]:
    # separate streams for counts, vectors and labels: a block cut short yields a prefix of the full block
    counts_rng, vector_rng, label_rng = (np.random.default_rng(child)
                                         for child in np.random.SeedSequence([seed, block]).spawn(3))
    full_extra = counts_rng.poisson(max(instances_per_image - 1.0, 0.0), size=DISTRACTOR_BLOCK_IMAGES)
    extra = full_extra[:images]
    total = int(images + extra.sum())
    categories = label_rng.choice(np.arange(1, 81), size=int(DISTRACTOR_BLOCK_IMAGES + full_extra.sum()),
                                  p=frequencies)
    vectors = vector_rng.standard_normal(size=(total, dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    row = 0
    for offset in range(images):
        image_id = f"distractor_{first_image + offset:08d}"
        for instance in range(1 + int(extra[offset])):
            yield InstanceFeature(f"{image_id}#{instance}", image_id, int(categories[row]),
                                  vectors[row].astype(np.float32))
            row += 1


def iter_distractors(count: int, dim: int, seed: int = 0,
                     instances_per_image: float = DEFAULT_INSTANCES_PER_IMAGE) -> Iterator[InstanceFeature]:
    """
    Uniform-on-sphere distractor instances for `count` images. Block b of 4096 images draws from
    its own generators seeded (seed, b), so any sharding over blocks yields identical output, and
    the distractors for n images are always the first n images of any larger set.
    """
    if count < 1:
        raise ManifestError(f"distractor image count must be >= 1, got {count}")
    frequencies = category_frequencies()
    for block, first_image in enumerate(range(0, count, DISTRACTOR_BLOCK_IMAGES)):
        images = min(DISTRACTOR_BLOCK_IMAGES, count - first_image)
        yield from _distractor_block(seed, block, first_image, images, dim, instances_per_image, frequencies)


def generate_distractors(path: Union[str, Path], count: int, dim: int, seed: int = 0,
                         instances_per_image: float = DEFAULT_INSTANCES_PER_IMAGE) -> int:
    """Write the distractor set as a feature archive; returns the instance count."""
    with FeatureArchiveWriter(path, dim, ['synthetic']) as writer:
        for feature in iter_distractors(count, dim, seed, instances_per_image):
            writer.add(feature)
    logger.info(f"✅ Generated {writer.count} distractor instances for {count} images (seed {seed})")
    return writer.count
