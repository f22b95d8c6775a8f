#!/usr/bin/env python3
"""
Tensor Core - C×H×W feature-map container, plain 2-D convolution and bilinear sampling
Every ROI / deformable / grouped kernel in seg_kernels.py is built on these primitives.

FMAP file layout (little-endian):
    b"FMAP" | version u32 | C u32 | H u32 | W u32 | C·H·W float32 in [c][y][x] order
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from search_errors import FormatError, NonFiniteError, ShapeMismatchError

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_HEADER_DTYPE = np.dtype('<u4')
_VALUE_DTYPE = np.dtype('<f4')


def _require_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{what} contains NaN or Inf values")


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Read-only stack of C feature maps of size H×W, stored as float32 [c][y][x]."""

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float32, copy=True)
        if array.ndim != 3:
            raise ShapeMismatchError(f"Tensor3 needs a 3-D array, got shape {array.shape}")
        if min(array.shape) < 1:
            raise ShapeMismatchError(f"Tensor3 dimensions must be positive, got {array.shape}")
        _require_finite(array, "Tensor3 data")
        array.setflags(write=False)
        object.__setattr__(self, 'data', array)

    @classmethod
    def from_flat(cls, channels: int, height: int, width: int, values) -> 'Tensor3':
        flat = np.asarray(values, dtype=np.float32).ravel()
        if flat.size != channels * height * width:
            raise ShapeMismatchError(
                f"flat data length {flat.size} != C·H·W = {channels}·{height}·{width}",
                {'channels': channels, 'height': height, 'width': width},
            )
        return cls(flat.reshape(channels, height, width))

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> 'Tensor3':
        return cls(np.zeros((channels, height, width), dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def flat(self) -> np.ndarray:
        return self.data.ravel()

    def scaled(self, factor: float) -> 'Tensor3':
        return Tensor3(self.data * np.float32(factor))


@dataclass
class ConvParams:
    """Filter bank [C_out][C_in][K][K] plus bias, stride, zero padding and dilation."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 4:
            raise ShapeMismatchError(f"conv weights must be 4-D, got shape {self.weights.shape}")
        c_out, _, k_h, k_w = self.weights.shape
        if k_h != k_w or k_h < 1 or k_h % 2 == 0:
            raise ShapeMismatchError(f"kernel must be square with odd size >= 1, got {k_h}×{k_w}")
        if self.bias is None:
            self.bias = np.zeros(c_out, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32).ravel()
        if self.bias.shape[0] != c_out:
            raise ShapeMismatchError(f"bias length {self.bias.shape[0]} != C_out {c_out}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ShapeMismatchError(
                "stride and dilation must be positive and padding non-negative",
                {'stride': self.stride, 'padding': self.padding, 'dilation': self.dilation},
            )
        _require_finite(self.weights, "conv weights")
        _require_finite(self.bias, "conv bias")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels_per_group(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    def output_size(self, height: int, width: int):
        reach = self.dilation * (self.kernel_size - 1)
        out_h = (height + 2 * self.padding - reach - 1) // self.stride + 1
        out_w = (width + 2 * self.padding - reach - 1) // self.stride + 1
        return out_h, out_w

    def same_geometry(self, other: 'ConvParams') -> bool:
        return (self.kernel_size, self.stride, self.padding, self.dilation) == (
            other.kernel_size, other.stride, other.padding, other.dilation)

    def parameter_count(self) -> int:
        return int(self.weights.size + self.bias.size)


# A sampler returns the [C_in, H_out, W_out] input values that filter tap (ky, kx) reads.
TapSampler = Callable[[int, int], np.ndarray]


def output_grid(input: Tensor3, params: ConvParams):
    """Output spatial size, raising when the geometry leaves no valid output cell."""
    out_h, out_w = params.output_size(input.height, input.width)
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(
            f"conv geometry gives empty output {out_h}×{out_w} for input {input.height}×{input.width}",
            {'kernel': params.kernel_size, 'stride': params.stride,
             'padding': params.padding, 'dilation': params.dilation},
        )
    return out_h, out_w


def check_group_shapes(input: Tensor3, params: ConvParams, groups: int):
    if groups < 1:
        raise ShapeMismatchError(f"groups must be >= 1, got {groups}")
    if input.channels % groups or params.out_channels % groups:
        raise ShapeMismatchError(
            f"channels not divisible by groups: C_in={input.channels}, "
            f"C_out={params.out_channels}, groups={groups}")
    if params.in_channels_per_group * groups != input.channels:
        raise ShapeMismatchError(
            f"weights expect {params.in_channels_per_group * groups} input channels, "
            f"tensor has {input.channels}", {'groups': groups})


def accumulate_taps(sampler: TapSampler, params: ConvParams, groups: int,
                    out_h: int, out_w: int) -> Tensor3:
    """Weighted sum over filter taps with float64 accumulators, then bias, cast to float32."""
    k = params.kernel_size
    c_out = params.out_channels
    in_per_group = params.in_channels_per_group
    out_per_group = c_out // groups
    weights = params.weights.astype(np.float64)
    out = np.zeros((c_out, out_h, out_w), dtype=np.float64)
    for ky in range(k):
        for kx in range(k):
            sampled = sampler(ky, kx)
            for g in range(groups):
                o_slice = slice(g * out_per_group, (g + 1) * out_per_group)
                i_slice = slice(g * in_per_group, (g + 1) * in_per_group)
                out[o_slice] += np.einsum('oc,chw->ohw', weights[o_slice, :, ky, kx], sampled[i_slice])
    out += params.bias.astype(np.float64)[:, None, None]
    return Tensor3(out.astype(np.float32))


def _strided_sampler(input: Tensor3, params: ConvParams, out_h: int, out_w: int) -> TapSampler:
    pad = params.padding
    padded = np.pad(input.data.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    stride = params.stride
    dilation = params.dilation

    def sample(ky: int, kx: int) -> np.ndarray:
        y0 = ky * dilation
        x0 = kx * dilation
        return padded[:, y0:y0 + stride * (out_h - 1) + 1:stride,
                      x0:x0 + stride * (out_w - 1) + 1:stride]

    return sample


def convolve(input: Tensor3, params: ConvParams, groups: int = 1) -> Tensor3:
    """Cross-correlation with zero padding; `groups` splits channels into independent slices."""
    check_group_shapes(input, params, groups)
    _require_finite(input.data, "conv input")
    out_h, out_w = output_grid(input, params)
    return accumulate_taps(_strided_sampler(input, params, out_h, out_w), params, groups, out_h, out_w)


def conv2d(input: Tensor3, params: ConvParams) -> Tensor3:
    """Dense 2-D cross-correlation (no filter flip)."""
    if params.in_channels_per_group != input.channels:
        raise ShapeMismatchError(
            f"conv2d weights expect {params.in_channels_per_group} input channels, "
            f"tensor has {input.channels}")
    return convolve(input, params, groups=1)


def bilinear_gather(planes: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """
    Bilinear read of every plane at fractional (xs, ys).
    planes: [C, H, W]; xs, ys: same-shape coordinate arrays. Neighbours outside the map contribute 0.
    """
    _, height, width = planes.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    result = np.zeros((planes.shape[0],) + xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            inside = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            weight = np.where(inside, wy * wx, 0.0)
            values = planes[:, np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
            result += values * weight
    return result


def bilinear_sample(input: Tensor3, channel: int, x: float, y: float) -> float:
    """Value of one channel at a fractional location (zero contribution outside the border)."""
    if not 0 <= channel < input.channels:
        raise ShapeMismatchError(f"channel {channel} out of range for {input.channels} channels")
    plane = input.data[channel:channel + 1].astype(np.float64)
    value = bilinear_gather(plane, np.array(float(x)), np.array(float(y)))
    return float(value[0])


def relu(input: Tensor3) -> Tensor3:
    return Tensor3(np.maximum(input.data, 0.0))


def add(a: Tensor3, b: Tensor3) -> Tensor3:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return Tensor3(a.data.astype(np.float64) + b.data.astype(np.float64))


def write_fmap(path: Union[str, Path], tensor: Tensor3):
    path = Path(path)
    header = np.array([FMAP_VERSION, tensor.channels, tensor.height, tensor.width], dtype=_HEADER_DTYPE)
    with open(path, 'wb') as f:
        f.write(FMAP_MAGIC)
        f.write(header.tobytes())
        f.write(tensor.data.astype(_VALUE_DTYPE).tobytes())


def read_fmap(path: Union[str, Path]) -> Tensor3:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:4] != FMAP_MAGIC:
        raise FormatError("not an FMAP file (bad magic or short header)", {'path': path})
    version, channels, height, width = np.frombuffer(raw, dtype=_HEADER_DTYPE, count=4, offset=4)
    if version != FMAP_VERSION:
        raise FormatError(f"unsupported FMAP version {int(version)}", {'path': path})
    expected = int(channels) * int(height) * int(width)
    payload = len(raw) - 20
    if expected == 0 or payload != expected * _VALUE_DTYPE.itemsize:
        raise FormatError(
            f"FMAP payload holds {payload} bytes, header promises {expected} floats",
            {'path': path, 'shape': (int(channels), int(height), int(width))},
        )
    values = np.frombuffer(raw, dtype=_VALUE_DTYPE, count=expected, offset=20)
    if not np.all(np.isfinite(values)):
        raise FormatError("FMAP contains NaN or Inf values", {'path': path})
    return Tensor3.from_flat(int(channels), int(height), int(width), values)
