#!/usr/bin/env python3
"""
Segmentation Kernels - forward kernels behind the instance feature representation
ROI max pooling with bbox rescaling, deformable convolution and the grouped (ResNeXt) bottleneck block.

Offset channel layout for deformable convolution: tap k = ky·K + kx owns channels
(2k, 2k+1) holding (Δy, Δx) for every output position.

KWTS weight file layout (little-endian):
    b"KWTS" | version u32 | header length u32 | JSON header | float32 blobs
The JSON header lists each tensor's name, shape and byte offset into the blob section.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from search_errors import EmptyROIError, FormatError, ShapeMismatchError
from tensor_core import (
    ConvParams, Tensor3, accumulate_taps, add, bilinear_gather, check_group_shapes,
    conv2d, convolve, output_grid, relu,
)


KWTS_MAGIC = b"KWTS"
KWTS_VERSION = 1
DEFAULT_CARDINALITY = 32


@dataclass(frozen=True)
class BBox:
    """Continuous-coordinate rectangle living in a ref_width × ref_height pixel space."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    ref_width: float
    ref_height: float

    def __post_init__(self):
        if self.ref_width <= 0 or self.ref_height <= 0:
            raise ShapeMismatchError(f"bbox reference size must be positive, got "
                                     f"{self.ref_width}×{self.ref_height}")
        if not (0 <= self.x_min <= self.x_max <= self.ref_width
                and 0 <= self.y_min <= self.y_max <= self.ref_height):
            raise ShapeMismatchError(
                "bbox outside its reference frame",
                {'bbox': self.as_list(), 'ref': (self.ref_width, self.ref_height)},
            )

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float,
                  ref_width: float, ref_height: float) -> 'BBox':
        return cls(x, y, x + w, y + h, ref_width, ref_height)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self):
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class DeformConvParams:
    """Main filter plus the offset-predicting conv (2·K² output channels, same geometry)."""

    conv: ConvParams
    offset_conv: ConvParams

    def __post_init__(self):
        k = self.conv.kernel_size
        if self.offset_conv.out_channels != 2 * k * k:
            raise ShapeMismatchError(
                f"offset conv must produce 2·K² = {2 * k * k} channels, "
                f"got {self.offset_conv.out_channels}")
        if not self.offset_conv.same_geometry(self.conv):
            raise ShapeMismatchError("offset conv geometry (K/stride/pad/dilation) must match the main conv")


@dataclass
class ResNeXtBlockParams:
    """Bottleneck reduce(1×1) → grouped 3×3 (optionally deformable) → expand(1×1) + residual."""

    cardinality: int
    reduce: ConvParams
    grouped: ConvParams
    expand: ConvParams
    projection: Optional[ConvParams] = None
    deformable: bool = False
    offset_conv: Optional[ConvParams] = None

    def __post_init__(self):
        if self.cardinality < 1:
            raise ShapeMismatchError(f"cardinality must be positive, got {self.cardinality}")
        width_in = self.reduce.out_channels
        width_out = self.grouped.out_channels
        if width_in % self.cardinality or width_out % self.cardinality:
            raise ShapeMismatchError(
                f"grouped stage channels {width_in}→{width_out} not divisible by cardinality {self.cardinality}")
        if self.deformable:
            if self.offset_conv is None:
                raise ShapeMismatchError("deformable block needs an offset_conv")
            DeformConvParams(self.grouped, self.offset_conv)

    def middle_params(self) -> Optional[DeformConvParams]:
        return DeformConvParams(self.grouped, self.offset_conv) if self.deformable else None


def scale_bbox_to_map(bbox: BBox, map_w: int, map_h: int) -> BBox:
    """Rescale an image-space bbox into the coordinate frame of a map_w × map_h feature map."""
    if map_w < 1 or map_h < 1:
        raise ShapeMismatchError(f"feature map size must be positive, got {map_w}×{map_h}")
    return BBox(
        bbox.x_min * map_w / bbox.ref_width,
        bbox.y_min * map_h / bbox.ref_height,
        bbox.x_max * map_w / bbox.ref_width,
        bbox.y_max * map_h / bbox.ref_height,
        map_w,
        map_h,
    )


def _cell_range(lo: float, hi: float, size: int, axis: str):
    if lo > size or hi < 0:
        raise EmptyROIError(f"empty ROI: [{lo}, {hi}] lies outside the map along {axis} (size {size})",
                            {'axis': axis, 'lo': lo, 'hi': hi, 'size': size})
    first = math.floor(lo)
    last = math.ceil(hi) - 1
    if last < first:
        # zero extent: snap to the single cell containing the coordinate
        first = last = math.floor(lo)
    first = min(max(first, 0), size - 1)
    last = min(max(last, 0), size - 1)
    return first, last


def roi_cells(maps: Tensor3, roi: BBox):
    """Inclusive (x0, x1, y0, y1) cell bounds covered by the ROI: floor(min) .. ceil(max)-1, clamped."""
    x0, x1 = _cell_range(roi.x_min, roi.x_max, maps.width, 'x')
    y0, y1 = _cell_range(roi.y_min, roi.y_max, maps.height, 'y')
    return x0, x1, y0, y1


def mask_to_map_grid(mask: np.ndarray, map_w: int, map_h: int) -> np.ndarray:
    """Resample a bool [H_img, W_img] mask to a map_h × map_w grid by cell-centre lookup."""
    img_h, img_w = mask.shape
    ys = np.minimum(((np.arange(map_h) + 0.5) * img_h / map_h).astype(np.int64), img_h - 1)
    xs = np.minimum(((np.arange(map_w) + 0.5) * img_w / map_w).astype(np.int64), img_w - 1)
    return mask[np.ix_(ys, xs)].astype(bool)


def roi_max_pool(maps: Tensor3, roi: BBox, cell_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Per-channel maximum over the cells the ROI covers.
    cell_mask (optional, map-sized bool grid) zeroes activations outside the instance before the max.
    """
    x0, x1, y0, y1 = roi_cells(maps, roi)
    region = maps.data[:, y0:y1 + 1, x0:x1 + 1]
    if cell_mask is not None:
        if cell_mask.shape != (maps.height, maps.width):
            raise ShapeMismatchError(f"cell mask {cell_mask.shape} does not match map "
                                     f"{maps.height}×{maps.width}")
        region = np.where(cell_mask[y0:y1 + 1, x0:x1 + 1], region, np.float32(0.0))
    return region.reshape(maps.channels, -1).max(axis=1).astype(np.float32)


def _deformable_sampler(input: Tensor3, params: DeformConvParams, offsets: np.ndarray,
                        out_h: int, out_w: int):
    conv = params.conv
    k = conv.kernel_size
    planes = input.data.astype(np.float64)
    rows = (np.arange(out_h) * conv.stride - conv.padding)[:, None].astype(np.float64)
    cols = (np.arange(out_w) * conv.stride - conv.padding)[None, :].astype(np.float64)

    def sample(ky: int, kx: int) -> np.ndarray:
        tap = ky * k + kx
        ys = rows + ky * conv.dilation + offsets[2 * tap]
        xs = cols + kx * conv.dilation + offsets[2 * tap + 1]
        return bilinear_gather(planes, xs, ys)

    return sample


def deformable_conv2d(input: Tensor3, params: DeformConvParams, groups: int = 1) -> Tensor3:
    """Convolution whose taps read the input at learned fractional offsets (bilinear, zero outside)."""
    conv = params.conv
    k = conv.kernel_size
    check_group_shapes(input, conv, groups)
    offsets = conv2d(input, params.offset_conv)
    if offsets.channels != 2 * k * k:
        raise ShapeMismatchError(f"offset map has {offsets.channels} channels, expected {2 * k * k}")
    out_h, out_w = output_grid(input, conv)
    if (offsets.height, offsets.width) != (out_h, out_w):
        raise ShapeMismatchError(f"offset map {offsets.height}×{offsets.width} does not align with "
                                 f"output {out_h}×{out_w}")
    sampler = _deformable_sampler(input, params, offsets.data.astype(np.float64), out_h, out_w)
    return accumulate_taps(sampler, conv, groups, out_h, out_w)


def grouped_conv2d(input: Tensor3, params: ConvParams, groups: int) -> Tensor3:
    """Group g maps input channel slice g to output slice g; weights are [C_out][C_in/groups][K][K]."""
    return convolve(input, params, groups=groups)


def resnext_block_forward(input: Tensor3, params: ResNeXtBlockParams) -> Tensor3:
    reduced = relu(conv2d(input, params.reduce))
    if params.deformable:
        middle = deformable_conv2d(reduced, params.middle_params(), groups=params.cardinality)
    else:
        middle = grouped_conv2d(reduced, params.grouped, params.cardinality)
    expanded = conv2d(relu(middle), params.expand)
    residual = conv2d(input, params.projection) if params.projection is not None else input
    if residual.shape != expanded.shape:
        raise ShapeMismatchError(
            f"residual {residual.shape} does not match branch output {expanded.shape}; "
            f"a projection is required")
    return relu(add(expanded, residual))


def random_conv_params(rng: np.random.Generator, c_out: int, c_in: int, k: int = 1,
                       stride: int = 1, padding: Optional[int] = None, dilation: int = 1,
                       scale: float = 0.1, with_bias: bool = True) -> ConvParams:
    """Random fixture filter bank; padding defaults to 'same' for stride 1."""
    if padding is None:
        padding = dilation * (k - 1) // 2
    weights = rng.normal(0.0, scale, size=(c_out, c_in, k, k)).astype(np.float32)
    bias = rng.normal(0.0, scale, size=c_out).astype(np.float32) if with_bias else None
    return ConvParams(weights, bias, stride=stride, padding=padding, dilation=dilation)


def make_resnext_block(rng: np.random.Generator, in_channels: int, width: int, out_channels: int,
                       cardinality: int = DEFAULT_CARDINALITY, deformable: bool = False,
                       scale: float = 0.1) -> ResNeXtBlockParams:
    reduce = random_conv_params(rng, width, in_channels, 1, scale=scale)
    grouped = random_conv_params(rng, width, width // cardinality, 3, scale=scale)
    expand = random_conv_params(rng, out_channels, width, 1, scale=scale)
    projection = None
    if in_channels != out_channels:
        projection = random_conv_params(rng, out_channels, in_channels, 1, scale=scale)
    offset_conv = None
    if deformable:
        offset_conv = random_conv_params(rng, 18, width, 3, scale=scale * 0.1)
    return ResNeXtBlockParams(cardinality, reduce, grouped, expand, projection, deformable, offset_conv)


def make_resnet_bottleneck(rng: np.random.Generator, in_channels: int = 256, width: int = 64,
                           out_channels: int = 256) -> ResNeXtBlockParams:
    """Plain ResNet bottleneck expressed as a cardinality-1 block."""
    return make_resnext_block(rng, in_channels, width, out_channels, cardinality=1)


def block_parameter_count(params: ResNeXtBlockParams) -> int:
    convs = [params.reduce, params.grouped, params.expand, params.projection, params.offset_conv]
    return sum(conv.parameter_count() for conv in convs if conv is not None)


def bottleneck_parameter_report(rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """ResNet-style (256→64→64→256) versus ResNeXt-style (256→128→128, g=32→256) parameter counts."""
    rng = rng or np.random.default_rng(0)
    resnet = block_parameter_count(make_resnet_bottleneck(rng))
    resnext = block_parameter_count(make_resnext_block(rng, 256, 128, 256, cardinality=DEFAULT_CARDINALITY))
    return {'resnet_params': resnet, 'resnext_params': resnext, 'ratio': resnext / resnet}


def _conv_entries(conv: ConvParams, blobs: list, offset: int):
    entry = {'stride': conv.stride, 'padding': conv.padding, 'dilation': conv.dilation, 'tensors': {}}
    for part, array in (('weights', conv.weights), ('bias', conv.bias)):
        raw = np.ascontiguousarray(array, dtype='<f4').tobytes()
        entry['tensors'][part] = {'shape': list(array.shape), 'offset': offset, 'nbytes': len(raw)}
        blobs.append(raw)
        offset += len(raw)
    return entry, offset


def save_block_weights(path: Union[str, Path], params: ResNeXtBlockParams):
    blobs = []
    offset = 0
    convs = {}
    for name in ('reduce', 'grouped', 'expand', 'projection', 'offset_conv'):
        conv = getattr(params, name)
        if conv is not None:
            convs[name], offset = _conv_entries(conv, blobs, offset)
    header = json.dumps({'cardinality': params.cardinality, 'deformable': params.deformable,
                         'convs': convs}, sort_keys=True, separators=(',', ':')).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(KWTS_MAGIC)
        f.write(np.array([KWTS_VERSION, len(header)], dtype='<u4').tobytes())
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_block_weights(path: Union[str, Path]) -> ResNeXtBlockParams:
    raw = Path(path).read_bytes()
    if raw[:4] != KWTS_MAGIC or len(raw) < 12:
        raise FormatError("not a KWTS weight file", {'path': path})
    version, header_len = np.frombuffer(raw, dtype='<u4', count=2, offset=4)
    if version != KWTS_VERSION:
        raise FormatError(f"unsupported KWTS version {int(version)}", {'path': path})
    try:
        header = json.loads(raw[12:12 + int(header_len)].decode('utf-8'))
    except ValueError as e:
        raise FormatError(f"corrupt KWTS header: {e}", {'path': path}) from e
    blob_start = 12 + int(header_len)

    def tensor(entry):
        start = blob_start + entry['offset']
        if start + entry['nbytes'] > len(raw):
            raise FormatError("KWTS blob section truncated", {'path': path})
        count = entry['nbytes'] // 4
        return np.frombuffer(raw, dtype='<f4', count=count, offset=start).reshape(entry['shape']).copy()

    convs = {}
    for name, entry in header['convs'].items():
        convs[name] = ConvParams(tensor(entry['tensors']['weights']), tensor(entry['tensors']['bias']),
                                 stride=entry['stride'], padding=entry['padding'], dilation=entry['dilation'])
    return ResNeXtBlockParams(
        cardinality=header['cardinality'],
        reduce=convs['reduce'],
        grouped=convs['grouped'],
        expand=convs['expand'],
        projection=convs.get('projection'),
        deformable=header['deformable'],
        offset_conv=convs.get('offset_conv'),
    )


def demo_kernels():
    """Run a toy deformable ResNeXt block and print the parameter-parity report."""
    print("🧱 TOY DEFORMABLE RESNEXT BLOCK")
    print("=" * 60)
    rng = np.random.default_rng(7)
    block = make_resnext_block(rng, in_channels=64, width=64, out_channels=64, cardinality=32, deformable=True)
    features = Tensor3(rng.normal(size=(64, 12, 12)))
    output = resnext_block_forward(features, block)
    print(f"  Input: {features.shape}  Output: {output.shape}  min={output.data.min():.4f}")

    report = bottleneck_parameter_report(rng)
    print(f"\n📊 PARAMETER PARITY:")
    print(f"  ResNet bottleneck:  {report['resnet_params']:,}")
    print(f"  ResNeXt (g=32):     {report['resnext_params']:,}")
    print(f"  Ratio:              {report['ratio']:.4f}")


if __name__ == "__main__":
    demo_kernels()
