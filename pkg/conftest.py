"""Shared fixtures: seeded generators, brute-force kernel oracles and on-disk benchmark builders."""

import json
from pathlib import Path

import numpy as np
import pytest

from tensor_core import Tensor3, write_fmap


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


def naive_conv(x, weights, bias, stride=1, padding=0, dilation=1, groups=1):
    """Cross-correlation written as nested loops over output, channel and tap."""
    channels, height, width = x.shape
    c_out, c_per_group, k, _ = weights.shape
    out_per_group = c_out // groups
    out_h = (height + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out_w = (width + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        group = o // out_per_group
        for oy in range(out_h):
            for ox in range(out_w):
                acc = float(bias[o])
                for c in range(c_per_group):
                    ci = group * c_per_group + c
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride - padding + ky * dilation
                            ix = ox * stride - padding + kx * dilation
                            if 0 <= iy < height and 0 <= ix < width:
                                acc += float(weights[o, c, ky, kx]) * float(x[ci, iy, ix])
                out[o, oy, ox] = acc
    return out


def naive_bilinear(plane, x, y):
    height, width = plane.shape
    total = 0.0
    for yi in (int(np.floor(y)), int(np.floor(y)) + 1):
        for xi in (int(np.floor(x)), int(np.floor(x)) + 1):
            if 0 <= yi < height and 0 <= xi < width:
                total += float(plane[yi, xi]) * max(0.0, 1 - abs(x - xi)) * max(0.0, 1 - abs(y - yi))
    return total


@pytest.fixture
def conv_oracle():
    return naive_conv


@pytest.fixture
def bilinear_oracle():
    return naive_bilinear


def write_image_maps(fmap_dir: Path, image_id: str, maps: dict):
    for stage, array in maps.items():
        write_fmap(Path(fmap_dir) / f"{image_id}.{stage}.fmap", Tensor3(array))


def write_detections(det_dir: Path, image_id: str, records: list):
    with open(Path(det_dir) / f"{image_id}.det.jsonl", 'w') as f:
        for record in records:
            f.write(json.dumps({'image_id': image_id, **record}) + '\n')


@pytest.fixture
def tiny_benchmark(tmp_path):
    """
    Two videos of 11 frames (query = frame 0, references = frames 1 and 6) with
    conv3/conv4 maps where each video's object carries its own activation signature.
    """
    fmap_dir = tmp_path / 'fmaps'
    det_dir = tmp_path / 'dets'
    fmap_dir.mkdir()
    det_dir.mkdir()
    generator = np.random.default_rng(5)
    signatures = {
        'car_video': {'conv3': generator.random(8), 'conv4': generator.random(16), 'category': 3},
        'dog_video': {'conv3': generator.random(8), 'conv4': generator.random(16), 'category': 18},
    }
    queries, references, ground_truth = [], [], {}
    for video_id, signature in signatures.items():
        for frame in (0, 1, 6):
            image_id = f"{video_id}_{frame:06d}"
            maps = {}
            for stage, channels, size in (('conv3', 8, 8), ('conv4', 16, 4)):
                array = generator.random((channels, size, size)) * 0.1
                # object occupies the top-left quarter of the image
                array[:, :size // 2, :size // 2] += signature[stage][:, None, None] + frame * 1e-3
                maps[stage] = array
            write_image_maps(fmap_dir, image_id, maps)
            if frame == 0:
                queries.append({'query_id': video_id, 'image_id': image_id, 'image_path': f"{image_id}.jpg",
                                'category_id': signature['category'], 'bbox': [0, 0, 32, 32],
                                'width': 64, 'height': 64})
                write_detections(det_dir, image_id, [{
                    'category_id': signature['category'], 'bbox': [0, 0, 32, 32],
                    'image_width': 64, 'image_height': 64}])
            else:
                references.append({'image_id': image_id, 'image_path': f"{image_id}.jpg",
                                   'video_id': video_id, 'frame_index': frame})
                write_detections(det_dir, image_id, [
                    {'category_id': signature['category'], 'bbox': [0, 0, 32, 32],
                     'image_width': 64, 'image_height': 64, 'score': 0.9},
                    {'category_id': 1, 'bbox': [40, 40, 64, 64], 'image_width': 64, 'image_height': 64,
                     'score': 0.5},
                ])
        ground_truth[video_id] = [f"{video_id}_000001", f"{video_id}_000006"]
    manifest_path = tmp_path / 'manifest.json'
    manifest_path.write_text(json.dumps({'stride': 5, 'queries': queries, 'references': references,
                                         'ground_truth': ground_truth}))
    return {'root': tmp_path, 'fmap_dir': fmap_dir, 'det_dir': det_dir, 'manifest': manifest_path}
