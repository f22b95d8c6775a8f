"""
COCO Labels - the 80-category label table (ids 1..80) and approximate instance frequencies
Frequencies are COCO train2017 instance counts, used to draw realistic distractor categories.
"""

from typing import Dict, Optional

import numpy as np

# (name, approximate train2017 instance count), id = position + 1
_COCO_80 = [
    ('person', 262465), ('bicycle', 7113), ('car', 43867), ('motorcycle', 8725),
    ('airplane', 5135), ('bus', 6069), ('train', 4571), ('truck', 9973),
    ('boat', 10759), ('traffic light', 12884), ('fire hydrant', 1865), ('stop sign', 1983),
    ('parking meter', 1285), ('bench', 9838), ('bird', 10806), ('cat', 4768),
    ('dog', 5508), ('horse', 6587), ('sheep', 9509), ('cow', 8147),
    ('elephant', 5513), ('bear', 1294), ('zebra', 5303), ('giraffe', 5131),
    ('backpack', 8720), ('umbrella', 11431), ('handbag', 12354), ('tie', 6496),
    ('suitcase', 6192), ('frisbee', 2682), ('skis', 6646), ('snowboard', 2685),
    ('sports ball', 6347), ('kite', 9076), ('baseball bat', 3276), ('baseball glove', 3747),
    ('skateboard', 5543), ('surfboard', 6126), ('tennis racket', 4812), ('bottle', 24342),
    ('wine glass', 7913), ('cup', 20650), ('fork', 5479), ('knife', 7770),
    ('spoon', 6165), ('bowl', 14358), ('banana', 9458), ('apple', 5851),
    ('sandwich', 4373), ('orange', 6399), ('broccoli', 7308), ('carrot', 7852),
    ('hot dog', 2918), ('pizza', 5821), ('donut', 7179), ('cake', 6353),
    ('chair', 38491), ('couch', 5779), ('potted plant', 8652), ('bed', 4192),
    ('dining table', 15714), ('toilet', 4157), ('tv', 5805), ('laptop', 4970),
    ('mouse', 2262), ('remote', 5703), ('keyboard', 2855), ('cell phone', 6434),
    ('microwave', 1673), ('oven', 3334), ('toaster', 225), ('sink', 5610),
    ('refrigerator', 2637), ('book', 24715), ('clock', 6334), ('vase', 6613),
    ('scissors', 1481), ('teddy bear', 4793), ('hair drier', 198), ('toothbrush', 1954),
]

COCO_CATEGORIES: Dict[int, str] = {i + 1: name for i, (name, _) in enumerate(_COCO_80)}
_NAME_TO_ID = {name: cid for cid, name in COCO_CATEGORIES.items()}
# common tracking-benchmark spellings
_ALIASES = {
    'motorbike': 'motorcycle', 'aeroplane': 'airplane', 'sofa': 'couch', 'tvmonitor': 'tv',
    'ball': 'sports ball', 'racket': 'tennis racket', 'phone': 'cell phone', 'diningtable': 'dining table',
    'pottedplant': 'potted plant', 'face': 'person', 'man': 'person', 'woman': 'person',
}


def is_coco_category(category_id: Optional[int]) -> bool:
    return category_id in COCO_CATEGORIES


def category_id_for(name: str) -> Optional[int]:
    """Map a free-text category name to a COCO id; None means outside COCO-80 ('other')."""
    key = name.strip().lower().replace('_', ' ')
    key = _ALIASES.get(key.replace(' ', ''), _ALIASES.get(key, key))
    return _NAME_TO_ID.get(key)


def category_frequencies() -> np.ndarray:
    """Probability of each id 1..80 (index 0 ↔ id 1)."""
    counts = np.array([count for _, count in _COCO_80], dtype=np.float64)
    return counts / counts.sum()
