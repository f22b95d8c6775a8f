#!/usr/bin/env python3
"""
Feature Pipeline - turns segmenter detections plus per-stage feature maps into unit-norm hybrid
instance features (the "conv3 + conv4" representation), and reads/writes the feature archive.

Inputs per image: `<image_id>.<stage>.fmap` tensors and `<image_id>.det.jsonl` detections.

Feature archive layout (little-endian):
    b"FEAT" | version u32 | dim u32 | count u64 | stage-list JSON length u32 | stage-list JSON
    then per record: metadata JSON length u32 | metadata JSON | dim float32
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from coco_labels import is_coco_category
from mask_utils import decode_rle, mask_area, mask_bbox
from search_errors import EmptyROIError, FormatError, NonFiniteError, ShapeMismatchError
from seg_kernels import BBox, mask_to_map_grid, roi_max_pool, scale_bbox_to_map
from tensor_core import Tensor3, read_fmap

logger = logging.getLogger(__name__)

CANONICAL_STAGES = ('conv3', 'conv4')
ARCHIVE_MAGIC = b"FEAT"
ARCHIVE_VERSION = 1
UNIT_NORM_TOLERANCE = 1e-5


class DetectionRecord(BaseModel):
    """One line of a `<image_id>.det.jsonl` file."""

    image_id: str
    category_id: int
    bbox: List[float] = Field(min_length=4, max_length=4)
    image_width: int = Field(gt=0)
    image_height: int = Field(gt=0)
    score: float = Field(default=1.0, ge=0.0, le=1.0)
    segmentation: Optional[Dict] = None

    @field_validator('category_id')
    @classmethod
    def _known_category(cls, value: int) -> int:
        if not is_coco_category(value):
            raise ValueError(f"category_id {value} is not in the COCO-80 label table")
        return value

    @model_validator(mode='after')
    def _bbox_inside_image(self):
        x_min, y_min, x_max, y_max = self.bbox
        if not (0 <= x_min <= x_max <= self.image_width and 0 <= y_min <= y_max <= self.image_height):
            raise ValueError(f"bbox {self.bbox} outside image {self.image_width}×{self.image_height}")
        return self


@dataclass
class InstanceDetection:
    image_id: str
    category_id: int
    bbox: BBox
    det_score: float = 1.0
    mask: Optional[Dict] = None
    instance_id: Optional[str] = None

    @classmethod
    def from_record(cls, record: DetectionRecord, instance_id: Optional[str] = None) -> 'InstanceDetection':
        bbox = BBox(*record.bbox, ref_width=record.image_width, ref_height=record.image_height)
        return cls(record.image_id, record.category_id, bbox, record.score, record.segmentation, instance_id)

    def decoded_mask(self) -> Optional[np.ndarray]:
        return decode_rle(self.mask) if self.mask is not None else None


@dataclass
class InstanceFeature:
    instance_id: str
    image_id: str
    category_id: int
    vector: np.ndarray
    bbox: Optional[List[float]] = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).ravel()

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])

    def metadata(self) -> Dict:
        return {'instance_id': self.instance_id, 'image_id': self.image_id,
                'category_id': self.category_id, 'bbox': self.bbox}


@dataclass
class ImageExtraction:
    """Features pulled from one image plus anything that failed on the way."""

    image_id: str
    features: List[InstanceFeature] = field(default_factory=list)
    error: Optional[str] = None
    skipped: Dict[str, str] = field(default_factory=dict)


def l2_normalize(v) -> np.ndarray:
    """v / ‖v‖₂ (norm accumulated in float64); an all-zero vector is returned unchanged."""
    array = np.asarray(v, dtype=np.float32).ravel()
    if array.size == 0:
        raise ShapeMismatchError("cannot normalize an empty vector")
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("vector contains NaN or Inf values")
    norm = np.sqrt(np.dot(array.astype(np.float64), array.astype(np.float64)))
    if norm == 0.0:
        return array.copy()
    return (array.astype(np.float64) / norm).astype(np.float32)


def is_unit_norm(v) -> bool:
    norm = np.sqrt(np.dot(np.asarray(v, dtype=np.float64), np.asarray(v, dtype=np.float64)))
    return abs(norm - 1.0) <= UNIT_NORM_TOLERANCE


def instance_mask(det: InstanceDetection, image_w: int, image_h: int) -> np.ndarray:
    """Decoded segmentation of a detection, checked against the image size and its bbox."""
    mask = det.decoded_mask()
    if mask.shape != (image_h, image_w):
        raise ShapeMismatchError(f"mask is {mask.shape[1]}×{mask.shape[0]}, image is {image_w}×{image_h}",
                                 {'image_id': det.image_id})
    if mask_area(mask) == 0:
        raise EmptyROIError("segmentation mask is empty", {'image_id': det.image_id})
    x_min, y_min, x_max, y_max = mask_bbox(mask)
    box = det.bbox
    if x_min >= box.x_max or x_max <= box.x_min or y_min >= box.y_max or y_max <= box.y_min:
        raise EmptyROIError("segmentation mask lies outside the detection box",
                            {'image_id': det.image_id, 'mask_bbox': [x_min, y_min, x_max, y_max],
                             'bbox': box.as_list()})
    return mask


def extract_instance_feature(stages: Union[Mapping[str, Tensor3], Sequence[Tuple[str, Tensor3]]],
                             det: InstanceDetection, image_w: int, image_h: int,
                             stage_selection: Sequence[str] = CANONICAL_STAGES,
                             use_mask: bool = False,
                             instance_id: Optional[str] = None) -> InstanceFeature:
    """ROI-max-pool every selected stage, normalize each, concatenate in selection order, renormalize."""
    stage_maps = dict(stages)
    if (det.bbox.ref_width, det.bbox.ref_height) != (image_w, image_h):
        raise ShapeMismatchError(
            f"detection bbox lives in {det.bbox.ref_width}×{det.bbox.ref_height}, image is {image_w}×{image_h}",
            {'image_id': det.image_id})
    mask = instance_mask(det, image_w, image_h) if use_mask and det.mask is not None else None

    parts = []
    for stage in stage_selection:
        if stage not in stage_maps:
            raise FormatError(f"stage '{stage}' missing for image {det.image_id}",
                              {'image_id': det.image_id, 'stage': stage})
        maps = stage_maps[stage]
        roi = scale_bbox_to_map(det.bbox, maps.width, maps.height)
        cell_mask = mask_to_map_grid(mask, maps.width, maps.height) if mask is not None else None
        try:
            pooled = roi_max_pool(maps, roi, cell_mask)
        except EmptyROIError as e:
            raise EmptyROIError(f"stage {stage}: {e.message}",
                                {**e.context, 'stage': stage, 'image_id': det.image_id}) from e
        parts.append(l2_normalize(pooled))

    vector = l2_normalize(np.concatenate(parts))
    return InstanceFeature(
        instance_id=instance_id or det.instance_id or det.image_id,
        image_id=det.image_id,
        category_id=det.category_id,
        vector=vector,
        bbox=det.bbox.as_list(),
    )


def load_detections(path: Union[str, Path]) -> List[InstanceDetection]:
    """Parse a detections JSON-lines file; instance ids are `<image_id>#<line index>`."""
    path = Path(path)
    detections = []
    with open(path, 'r') as f:
        for index, line in enumerate(f):
            if not line.strip():
                continue
            try:
                record = DetectionRecord.model_validate_json(line)
            except ValidationError as e:
                raise FormatError(f"invalid detection on line {index + 1}: {e.errors()[0]['msg']}",
                                  {'path': path, 'line': index + 1}) from e
            detections.append(InstanceDetection.from_record(record, f"{record.image_id}#{index}"))
    return detections


def stage_map_path(fmap_dir: Union[str, Path], image_id: str, stage: str) -> Path:
    return Path(fmap_dir) / f"{image_id}.{stage}.fmap"


def load_stage_maps(fmap_dir: Union[str, Path], image_id: str, stage_selection: Sequence[str]) -> Dict[str, Tensor3]:
    maps = {}
    for stage in dict.fromkeys(stage_selection):
        path = stage_map_path(fmap_dir, image_id, stage)
        if not path.exists():
            raise FormatError(f"missing feature map for stage '{stage}'", {'path': path, 'stage': stage})
        maps[stage] = read_fmap(path)
    return maps


def extract_image_features(fmap_dir: Union[str, Path], image_id: str,
                           detections: Sequence[InstanceDetection],
                           stage_selection: Sequence[str] = CANONICAL_STAGES,
                           use_mask: bool = False) -> ImageExtraction:
    """
    All detections of one image. Any failure marks the whole image failed, never raises.
    A detection whose pooled response is all zero in every stage has no direction to
    normalize; it is skipped and recorded, the rest of the image is kept.
    """
    result = ImageExtraction(image_id)
    if not detections:
        return result
    try:
        maps = load_stage_maps(fmap_dir, image_id, stage_selection)
        for det in detections:
            feature = extract_instance_feature(
                maps, det, det.bbox.ref_width, det.bbox.ref_height, stage_selection, use_mask)
            if not is_unit_norm(feature.vector):
                result.skipped[feature.instance_id] = "zero activation inside the ROI"
                logger.warning(f"⚠️ Skipping {feature.instance_id}: zero activation inside the ROI")
                continue
            result.features.append(feature)
    except (FormatError, ShapeMismatchError, EmptyROIError, NonFiniteError) as e:
        result.features = []
        result.skipped = {}
        result.error = f"{type(e).__name__}: {e}"
        logger.warning(f"⚠️ Extraction failed for {image_id}: {result.error}")
    return result


class FeatureArchiveWriter:
    """Streams InstanceFeatures into a feature archive; the record count is patched on close."""

    def __init__(self, path: Union[str, Path], dim: int, stages: Sequence[str]):
        self.path = Path(path)
        self.dim = dim
        self.stages = list(stages)
        self.count = 0
        self._file = open(self.path, 'wb')
        stage_json = json.dumps(self.stages, separators=(',', ':')).encode('utf-8')
        self._file.write(ARCHIVE_MAGIC)
        self._file.write(np.array([ARCHIVE_VERSION, dim], dtype='<u4').tobytes())
        self._count_offset = self._file.tell()
        self._file.write(np.array([0], dtype='<u8').tobytes())
        self._file.write(np.array([len(stage_json)], dtype='<u4').tobytes())
        self._file.write(stage_json)

    def add(self, feature: InstanceFeature):
        if feature.dim != self.dim:
            raise ShapeMismatchError(f"feature {feature.instance_id} has dim {feature.dim}, archive holds {self.dim}")
        meta = json.dumps(feature.metadata(), sort_keys=True, separators=(',', ':')).encode('utf-8')
        self._file.write(np.array([len(meta)], dtype='<u4').tobytes())
        self._file.write(meta)
        self._file.write(feature.vector.astype('<f4').tobytes())
        self.count += 1

    def close(self):
        if self._file.closed:
            return
        self._file.seek(self._count_offset)
        self._file.write(np.array([self.count], dtype='<u8').tobytes())
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def write_feature_archive(path: Union[str, Path], features: Iterable[InstanceFeature],
                          stages: Sequence[str], dim: Optional[int] = None) -> int:
    features = list(features)
    if dim is None:
        dim = features[0].dim if features else 0
    with FeatureArchiveWriter(path, dim, stages) as writer:
        for feature in features:
            writer.add(feature)
    return writer.count


@dataclass
class ArchiveHeader:
    dim: int
    count: int
    stages: List[str]


def _read_exact(f, size: int, path: Path) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise FormatError("feature archive truncated", {'path': path})
    return data


def _decode_json(data: bytes, path: Path, what: str):
    try:
        return json.loads(data.decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"feature archive {what} is not valid JSON: {e}", {'path': path}) from e


def _read_header(f, path: Path) -> ArchiveHeader:
    if f.read(4) != ARCHIVE_MAGIC:
        raise FormatError("not a feature archive (bad magic)", {'path': path})
    version, dim = np.frombuffer(_read_exact(f, 8, path), dtype='<u4')
    if version != ARCHIVE_VERSION:
        raise FormatError(f"unsupported feature archive version {int(version)}", {'path': path})
    count = int(np.frombuffer(_read_exact(f, 8, path), dtype='<u8')[0])
    stage_len = int(np.frombuffer(_read_exact(f, 4, path), dtype='<u4')[0])
    stages = _decode_json(_read_exact(f, stage_len, path), path, 'stage list')
    if not isinstance(stages, list):
        raise FormatError("feature archive stage list is not a JSON array", {'path': path})
    return ArchiveHeader(int(dim), count, stages)


def read_archive_header(path: Union[str, Path]) -> ArchiveHeader:
    path = Path(path)
    with open(path, 'rb') as f:
        return _read_header(f, path)


def iter_feature_archive(path: Union[str, Path]) -> Iterator[InstanceFeature]:
    path = Path(path)
    with open(path, 'rb') as f:
        header = _read_header(f, path)
        for _ in range(header.count):
            meta_len = int(np.frombuffer(_read_exact(f, 4, path), dtype='<u4')[0])
            meta = _decode_json(_read_exact(f, meta_len, path), path, 'record metadata')
            vector = np.frombuffer(_read_exact(f, 4 * header.dim, path), dtype='<f4')
            try:
                feature = InstanceFeature(meta['instance_id'], meta['image_id'], meta['category_id'],
                                          vector.astype(np.float32), meta.get('bbox'))
            except (KeyError, TypeError, AttributeError) as e:
                raise FormatError(f"feature archive record metadata incomplete: {e}", {'path': path}) from e
            yield feature


def read_feature_archive(path: Union[str, Path]) -> Tuple[ArchiveHeader, List[InstanceFeature]]:
    return read_archive_header(path), list(iter_feature_archive(path))
