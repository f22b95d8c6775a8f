#!/usr/bin/env python3
"""
Instance Index - immutable exact-cosine index over unit-norm instance features with
category-label pruning (a query only scans instances that share its predicted label).

Records are stored grouped by category so each posting list is one contiguous vector block.
IndexWriter streams records into the same file layout for indexes too large to build in memory.

index.bin layout (little-endian):
    b"SIDX" | version u32 | dim u32 | count u64 | category count u32
    category table: (category_id u32, start u64, length u64) per category
    metadata length u64 | metadata JSON (list of [instance_id, image_id, category_id, bbox])
    zero padding to a 64-byte boundary | count × dim float32 vector block (memory-mappable)
"""

import json
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from feature_pipeline import InstanceFeature, UNIT_NORM_TOLERANCE
from search_errors import FormatError, IndexBuildError, ShapeMismatchError

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"SIDX"
INDEX_VERSION = 1
SCAN_BLOCK_ROWS = 16384
_ALIGNMENT = 64


@dataclass(frozen=True)
class RankedHit:
    instance_id: str
    image_id: str
    category_id: int
    similarity: float
    bbox: Optional[Tuple[float, ...]] = None

    def to_dict(self) -> Dict:
        return {'instance_id': self.instance_id, 'image_id': self.image_id,
                'category_id': self.category_id, 'similarity': self.similarity,
                'bbox': list(self.bbox) if self.bbox is not None else None}


@dataclass(frozen=True, eq=False)
class SearchIndex:
    """
    vectors[i] belongs to instance_ids[i]; postings[c] is the sorted ordinal range of category c.
    Built once by build_index / load_index and never mutated.
    """

    dim: int
    instance_ids: List[str]
    image_ids: List[str]
    category_ids: np.ndarray
    bboxes: List[Optional[Tuple[float, ...]]]
    vectors: np.ndarray
    postings: Dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.instance_ids)

    def posting_sizes(self) -> Dict[int, int]:
        return {category: int(ordinals.size) for category, ordinals in self.postings.items()}

    def hit(self, ordinal: int, similarity: float) -> RankedHit:
        return RankedHit(self.instance_ids[ordinal], self.image_ids[ordinal],
                         int(self.category_ids[ordinal]), float(similarity), self.bboxes[ordinal])


def build_index(features: Iterable[InstanceFeature]) -> SearchIndex:
    """Validate every record and group vectors per category (stable within a category)."""
    records = list(features)
    dim = records[0].dim if records else 0
    seen = set()
    for position, feature in enumerate(records):
        where = {'instance_id': feature.instance_id, 'position': position}
        if feature.dim != dim:
            raise IndexBuildError(f"record {feature.instance_id} has dim {feature.dim}, expected {dim}", where)
        if feature.instance_id in seen:
            raise IndexBuildError(f"duplicate instance id {feature.instance_id}", where)
        seen.add(feature.instance_id)
        norm = float(np.sqrt(np.dot(feature.vector.astype(np.float64), feature.vector.astype(np.float64))))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise IndexBuildError(f"record {feature.instance_id} is not unit-norm (‖v‖ = {norm:.6f})", where)

    categories = np.array([feature.category_id for feature in records], dtype=np.int64)
    order = np.argsort(categories, kind='stable')
    vectors = np.empty((len(records), dim), dtype=np.float32)
    for row, position in enumerate(order):
        vectors[row] = records[position].vector
    ordered = [records[position] for position in order]
    index = _assemble(dim, ordered, vectors)
    logger.info(f"✅ Indexed {len(index)} instances in {len(index.postings)} categories (dim {dim})")
    return index


def _assemble(dim: int, ordered: Sequence[InstanceFeature], vectors: np.ndarray) -> SearchIndex:
    category_ids = np.array([feature.category_id for feature in ordered], dtype=np.int64)
    return SearchIndex(
        dim=dim,
        instance_ids=[feature.instance_id for feature in ordered],
        image_ids=[feature.image_id for feature in ordered],
        category_ids=category_ids,
        bboxes=[tuple(feature.bbox) if feature.bbox is not None else None for feature in ordered],
        vectors=vectors,
        postings=_postings(category_ids),
    )


def _postings(category_ids: np.ndarray) -> Dict[int, np.ndarray]:
    postings = {}
    if category_ids.size == 0:
        return postings
    values, starts, counts = np.unique(category_ids, return_index=True, return_counts=True)
    for category, start, count in zip(values, starts, counts):
        postings[int(category)] = np.arange(start, start + count, dtype=np.int64)
    return postings


def candidate_ranges(index: SearchIndex, category_id: int, prune_by_category: bool) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) ordinal ranges a query scans."""
    if not prune_by_category:
        return [(0, len(index))] if len(index) else []
    ordinals = index.postings.get(category_id)
    if ordinals is None or ordinals.size == 0:
        return []
    return [(int(ordinals[0]), int(ordinals[-1]) + 1)]


def candidate_count(index: SearchIndex, query: InstanceFeature, prune_by_category: bool) -> int:
    return sum(stop - start for start, stop in candidate_ranges(index, query.category_id, prune_by_category))


def _block_similarities(index: SearchIndex, start: int, stop: int, query64: np.ndarray) -> np.ndarray:
    block = np.asarray(index.vectors[start:stop], dtype=np.float64)
    # einsum reduces each row independently, so a row's score never depends on block boundaries
    return np.einsum('ij,j->i', block, query64)


def _top_with_ties(ordinals: np.ndarray, sims: np.ndarray, k: Optional[int]):
    """Keep the k best plus anything tied with the k-th score, so tie-breaks can happen later."""
    if k is None or sims.size <= k:
        return ordinals, sims
    threshold = np.partition(sims, sims.size - k)[sims.size - k]
    keep = sims >= threshold
    return ordinals[keep], sims[keep]


def _scan_range(index: SearchIndex, start: int, stop: int, query64: np.ndarray, k: Optional[int]):
    kept_ordinals = []
    kept_sims = []
    for block_start in range(start, stop, SCAN_BLOCK_ROWS):
        block_stop = min(block_start + SCAN_BLOCK_ROWS, stop)
        sims = _block_similarities(index, block_start, block_stop, query64)
        ordinals, sims = _top_with_ties(np.arange(block_start, block_stop, dtype=np.int64), sims, k)
        kept_ordinals.append(ordinals)
        kept_sims.append(sims)
    if not kept_ordinals:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    return _top_with_ties(np.concatenate(kept_ordinals), np.concatenate(kept_sims), k)


def _split(ranges: List[Tuple[int, int]], parts: int) -> List[Tuple[int, int]]:
    pieces = []
    for start, stop in ranges:
        size = stop - start
        chunk = max(SCAN_BLOCK_ROWS, -(-size // max(parts, 1)))
        pieces.extend((lo, min(lo + chunk, stop)) for lo in range(start, stop, chunk))
    return pieces


def search(index: SearchIndex, query: InstanceFeature, k: Optional[int],
           prune_by_category: bool = True, workers: int = 1) -> List[RankedHit]:
    """
    Exact top-k by dot product (== cosine for unit vectors), ordered by similarity descending
    then instance_id ascending. k=None returns the full ranking. `workers` partitions the scan;
    the result does not depend on it. k below 1 asks for nothing and gets an empty list.
    """
    if len(index) == 0:
        return []
    if query.dim != index.dim:
        raise ShapeMismatchError(f"query dim {query.dim} != index dim {index.dim}",
                                 {'query': query.instance_id})
    if k is not None and k < 1:
        return []
    ranges = candidate_ranges(index, query.category_id, prune_by_category)
    if not ranges:
        return []
    query64 = query.vector.astype(np.float64)
    pieces = _split(ranges, workers)
    if workers > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda piece: _scan_range(index, piece[0], piece[1], query64, k), pieces))
    else:
        partials = [_scan_range(index, start, stop, query64, k) for start, stop in pieces]

    ordinals = np.concatenate([ordinal for ordinal, _ in partials])
    sims = np.concatenate([sim for _, sim in partials])
    ordinals, sims = _top_with_ties(ordinals, sims, k)
    ranked = sorted(zip(sims.tolist(), ordinals.tolist()),
                    key=lambda pair: (-pair[0], index.instance_ids[pair[1]]))
    if k is not None:
        ranked = ranked[:k]
    return [index.hit(ordinal, similarity) for similarity, ordinal in ranked]


def image_level_dedup(hits: Sequence[RankedHit]) -> List[RankedHit]:
    """Keep the first (best) hit per image, preserving ranking order."""
    seen = set()
    kept = []
    for hit in hits:
        if hit.image_id not in seen:
            seen.add(hit.image_id)
            kept.append(hit)
    return kept


def ranked_images(index: SearchIndex, query: InstanceFeature, depth: Optional[int],
                  prune_by_category: bool = True, workers: int = 1) -> List[RankedHit]:
    """Image-deduplicated ranking holding `depth` images, deepening k until enough images appear."""
    if depth is None:
        return image_level_dedup(search(index, query, None, prune_by_category, workers))
    available = candidate_count(index, query, prune_by_category)
    k = depth
    while True:
        hits = image_level_dedup(search(index, query, k, prune_by_category, workers))
        if len(hits) >= depth or k >= available:
            return hits[:depth]
        k *= 2


def _aligned(offset: int) -> int:
    return -(-offset // _ALIGNMENT) * _ALIGNMENT


def _metadata_row(instance_id: str, image_id: str, category_id: int, bbox) -> bytes:
    return json.dumps([instance_id, image_id, int(category_id), list(bbox) if bbox is not None else None],
                      separators=(',', ':')).encode('utf-8')


def _write_header(f, dim: int, count: int, table: Sequence[Tuple[int, int, int]], meta_len: int):
    f.write(INDEX_MAGIC)
    f.write(np.array([INDEX_VERSION, dim], dtype='<u4').tobytes())
    f.write(np.array([count], dtype='<u8').tobytes())
    f.write(np.array([len(table)], dtype='<u4').tobytes())
    for category, start, length in table:
        f.write(np.array([category], dtype='<u4').tobytes())
        f.write(np.array([start, length], dtype='<u8').tobytes())
    f.write(np.array([meta_len], dtype='<u8').tobytes())


def _pad_to_vectors(f):
    f.write(b"\x00" * (_aligned(f.tell()) - f.tell()))


def save_index(index: SearchIndex, path: Union[str, Path]):
    path = Path(path)
    table = [(category, int(ordinals[0]), int(ordinals.size)) for category, ordinals in sorted(index.postings.items())]
    rows = [_metadata_row(index.instance_ids[i], index.image_ids[i], index.category_ids[i], index.bboxes[i])
            for i in range(len(index))]
    metadata = b"[" + b",".join(rows) + b"]"
    with open(path, 'wb') as f:
        _write_header(f, index.dim, len(index), table, len(metadata))
        f.write(metadata)
        _pad_to_vectors(f)
        f.write(np.ascontiguousarray(index.vectors, dtype='<f4').tobytes())
    logger.info(f"💾 Saved index with {len(index)} instances to {path}")


class IndexWriter:
    """
    Streams features straight into an index.bin without holding them in memory.

    Each category's vectors and metadata rows are spilled to scratch files beside the target
    and concatenated in category order on close, so the file (and every ordinal in it) is the
    same one build_index + save_index would produce from the same input order.
    """

    def __init__(self, path: Union[str, Path], dim: int):
        self.path = Path(path)
        self.dim = dim
        self.count = 0
        self._seen = set()
        self._sizes: Dict[int, int] = {}
        self._spills: Dict[int, Tuple[BinaryIO, BinaryIO]] = {}
        self._row_bytes = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._scratch = tempfile.TemporaryDirectory(dir=self.path.parent, prefix='.sidx-')

    def add(self, feature: InstanceFeature):
        where = {'instance_id': feature.instance_id, 'position': self.count}
        if feature.dim != self.dim:
            raise IndexBuildError(f"record {feature.instance_id} has dim {feature.dim}, expected {self.dim}", where)
        if feature.instance_id in self._seen:
            raise IndexBuildError(f"duplicate instance id {feature.instance_id}", where)
        norm = float(np.sqrt(np.dot(feature.vector.astype(np.float64), feature.vector.astype(np.float64))))
        if abs(norm - 1.0) > UNIT_NORM_TOLERANCE:
            raise IndexBuildError(f"record {feature.instance_id} is not unit-norm (‖v‖ = {norm:.6f})", where)
        self._seen.add(feature.instance_id)

        vectors, rows = self._spill(feature.category_id)
        row = _metadata_row(feature.instance_id, feature.image_id, feature.category_id, feature.bbox)
        vectors.write(feature.vector.astype('<f4').tobytes())
        rows.write(row + b"\n")
        self._row_bytes += len(row)
        self._sizes[feature.category_id] += 1
        self.count += 1

    def _spill(self, category_id: int) -> Tuple[BinaryIO, BinaryIO]:
        if category_id not in self._spills:
            scratch = Path(self._scratch.name)
            self._spills[category_id] = (open(scratch / f"{category_id}.f4", 'wb'),
                                         open(scratch / f"{category_id}.rows", 'wb'))
            self._sizes[category_id] = 0
        return self._spills[category_id]

    def posting_sizes(self) -> Dict[int, int]:
        return dict(sorted(self._sizes.items()))

    def _close_spills(self):
        for vectors, rows in self._spills.values():
            vectors.close()
            rows.close()

    def close(self):
        if self._scratch is None:
            return
        self._close_spills()
        categories = sorted(self._sizes)
        table, start = [], 0
        for category in categories:
            table.append((category, start, self._sizes[category]))
            start += self._sizes[category]
        scratch = Path(self._scratch.name)
        # "[" + rows joined by "," + "]"
        meta_len = 2 + self._row_bytes + max(self.count - 1, 0)
        with open(self.path, 'wb') as f:
            _write_header(f, self.dim, self.count, table, meta_len)
            f.write(b"[")
            first = True
            for category in categories:
                with open(scratch / f"{category}.rows", 'rb') as rows:
                    for line in rows:
                        if not first:
                            f.write(b",")
                        f.write(line.rstrip(b"\n"))
                        first = False
            f.write(b"]")
            _pad_to_vectors(f)
            for category in categories:
                with open(scratch / f"{category}.f4", 'rb') as vectors:
                    shutil.copyfileobj(vectors, f)
        self._discard()
        logger.info(f"💾 Streamed index with {self.count} instances in {len(categories)} categories to {self.path}")

    def _discard(self):
        self._close_spills()
        self._scratch.cleanup()
        self._scratch = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        elif self._scratch is not None:
            self._discard()


def load_index(path: Union[str, Path], mmap: bool = True) -> SearchIndex:
    path = Path(path)
    with open(path, 'rb') as f:
        if f.read(4) != INDEX_MAGIC:
            raise FormatError("not an index file (bad magic)", {'path': path})
        version, dim = np.frombuffer(f.read(8), dtype='<u4')
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {int(version)}", {'path': path})
        count = int(np.frombuffer(f.read(8), dtype='<u8')[0])
        n_categories = int(np.frombuffer(f.read(4), dtype='<u4')[0])
        table = []
        for _ in range(n_categories):
            category = int(np.frombuffer(f.read(4), dtype='<u4')[0])
            start, length = (int(v) for v in np.frombuffer(f.read(16), dtype='<u8'))
            table.append((category, start, length))
        meta_len = int(np.frombuffer(f.read(8), dtype='<u8')[0])
        try:
            metadata = json.loads(f.read(meta_len).decode('utf-8'))
        except ValueError as e:
            raise FormatError(f"corrupt index metadata: {e}", {'path': path}) from e
        vector_offset = _aligned(f.tell())

    expected = vector_offset + count * int(dim) * 4
    if path.stat().st_size < expected or len(metadata) != count:
        raise FormatError("index file truncated", {'path': path, 'expected_bytes': expected})
    if mmap and count:
        vectors = np.memmap(path, dtype='<f4', mode='r', offset=vector_offset, shape=(count, int(dim)))
    else:
        vectors = np.fromfile(path, dtype='<f4', count=count * int(dim), offset=vector_offset)
        vectors = vectors.reshape(count, int(dim)).astype(np.float32)

    postings = {category: np.arange(start, start + length, dtype=np.int64) for category, start, length in table}
    return SearchIndex(
        dim=int(dim),
        instance_ids=[row[0] for row in metadata],
        image_ids=[row[1] for row in metadata],
        category_ids=np.array([row[2] for row in metadata], dtype=np.int64),
        bboxes=[tuple(row[3]) if row[3] is not None else None for row in metadata],
        vectors=vectors,
        postings=postings,
    )
