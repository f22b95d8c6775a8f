#!/usr/bin/env python3
"""
Mask Utils - COCO run-length-encoded instance masks: decode/encode, area, tight bbox, IoU
"""

from typing import Any, Dict

import numpy as np
from pycocotools import mask as mask_api

from search_errors import FormatError, ShapeMismatchError


def decode_rle(rle: Dict[str, Any]) -> np.ndarray:
    """COCO RLE ({'size': [h, w], 'counts': str | bytes | list}) -> bool [h, w] mask."""
    if 'size' not in rle or 'counts' not in rle:
        raise FormatError("RLE needs 'size' and 'counts'", {'keys': sorted(rle)})
    height, width = (int(v) for v in rle['size'])
    counts = rle['counts']
    if isinstance(counts, list):
        # uncompressed counts must be converted before decoding
        encoded = mask_api.frPyObjects({'size': [height, width], 'counts': counts}, height, width)
    else:
        encoded = {'size': [height, width], 'counts': counts}
    try:
        decoded = mask_api.decode(encoded)
    except Exception as e:
        raise FormatError(f"could not decode RLE mask: {e}", {'size': (height, width)}) from e
    return decoded.astype(bool)


def encode_mask(mask: np.ndarray) -> Dict[str, Any]:
    """bool [h, w] mask -> COCO compressed RLE with a str counts field (JSON friendly)."""
    encoded = mask_api.encode(np.asfortranarray(mask.astype(np.uint8)))
    encoded['counts'] = str(encoded['counts'], 'utf-8')
    return {'size': [int(v) for v in encoded['size']], 'counts': encoded['counts']}


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def mask_bbox(mask: np.ndarray):
    """Tight (x_min, y_min, x_max, y_max) box in continuous pixel coordinates; None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)


def mask_overlap(a: np.ndarray, b: np.ndarray):
    """(intersection, union) pixel counts of two same-shape masks."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))
