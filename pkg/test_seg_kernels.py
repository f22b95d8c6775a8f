import numpy as np
import pytest

from search_errors import EmptyROIError, FormatError, ShapeMismatchError
from seg_kernels import (BBox, DeformConvParams, ResNeXtBlockParams, block_parameter_count,
                         bottleneck_parameter_report, deformable_conv2d, demo_kernels, grouped_conv2d,
                         load_block_weights, make_resnext_block, mask_to_map_grid, random_conv_params,
                         resnext_block_forward, roi_max_pool, save_block_weights, scale_bbox_to_map)
from tensor_core import ConvParams, Tensor3, conv2d, relu


def roi_oracle(maps, roi):
    channels, height, width = maps.shape
    xs = [x for x in range(width) if np.floor(roi.x_min) <= x <= np.ceil(roi.x_max) - 1]
    ys = [y for y in range(height) if np.floor(roi.y_min) <= y <= np.ceil(roi.y_max) - 1]
    return np.array([max(maps[c, y, x] for y in ys for x in xs) for c in range(channels)])


def deformable_oracle(x, conv, offsets, bilinear):
    c_out, c_in, k, _ = conv.weights.shape
    _, out_h, out_w = offsets.shape
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for oy in range(out_h):
            for ox in range(out_w):
                acc = float(conv.bias[o])
                for ky in range(k):
                    for kx in range(k):
                        tap = ky * k + kx
                        y = oy * conv.stride - conv.padding + ky * conv.dilation + offsets[2 * tap, oy, ox]
                        xx = ox * conv.stride - conv.padding + kx * conv.dilation + offsets[2 * tap + 1, oy, ox]
                        for c in range(c_in):
                            acc += float(conv.weights[o, c, ky, kx]) * bilinear(x[c], xx, y)
                out[o, oy, ox] = acc
    return out


def constant_offsets(channels_in: int, k: int, dy: float, dx: float, padding: int) -> ConvParams:
    bias = np.tile([dy, dx], k * k)
    return ConvParams(np.zeros((2 * k * k, channels_in, k, k)), bias, padding=padding)


def test_scale_bbox_examples():
    assert scale_bbox_to_map(BBox(0, 0, 100, 100, 100, 100), 25, 25).as_list() == [0, 0, 25, 25]
    assert scale_bbox_to_map(BBox(10, 20, 50, 80, 100, 100), 50, 50).as_list() == [5, 10, 25, 40]
    scaled = scale_bbox_to_map(BBox(33, 17, 67, 91, 640, 480), 40, 30)
    assert scaled.as_list() == pytest.approx([2.0625, 1.0625, 4.1875, 5.6875])
    assert (scaled.ref_width, scaled.ref_height) == (40, 30)


def test_bbox_invariants():
    with pytest.raises(ShapeMismatchError):
        BBox(5, 0, 4, 1, 10, 10)
    with pytest.raises(ShapeMismatchError):
        BBox(0, 0, 11, 1, 10, 10)
    assert BBox.from_xywh(1, 2, 3, 4, 10, 10).as_list() == [1, 2, 4, 6]


def test_roi_max_pool_examples():
    grid = Tensor3(np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3))
    assert roi_max_pool(grid, BBox(0, 0, 3, 3, 3, 3)).tolist() == [9]
    assert roi_max_pool(grid, BBox(1, 1, 3, 3, 3, 3)).tolist() == [9]
    assert roi_max_pool(grid, BBox(0, 0, 1.5, 1, 3, 3)).tolist() == [2]
    constant = Tensor3(np.full((4, 5, 5), 7.0))
    assert roi_max_pool(constant, BBox(1.2, 0.3, 2.7, 4.1, 5, 5)).tolist() == [7, 7, 7, 7]


def test_roi_max_pool_degenerate_and_empty():
    grid = Tensor3(np.arange(1, 10, dtype=np.float32).reshape(1, 3, 3))
    # zero-area roi snaps to the cell containing it
    assert roi_max_pool(grid, BBox(1.5, 1.5, 1.5, 1.5, 3, 3)).tolist() == [5]
    assert roi_max_pool(grid, BBox(3, 3, 3, 3, 3, 3)).tolist() == [9]
    with pytest.raises(EmptyROIError):
        roi_max_pool(grid, BBox(5, 5, 6, 6, 10, 10))


def test_roi_max_pool_matches_oracle(rng):
    for _ in range(100):
        channels, height, width = rng.integers(1, 9), rng.integers(1, 17), rng.integers(1, 17)
        maps = rng.normal(size=(channels, height, width)).astype(np.float32)
        x0, x1 = np.sort(rng.uniform(0, width, size=2))
        y0, y1 = np.sort(rng.uniform(0, height, size=2))
        roi = BBox(x0, y0, x1, y1, width, height)
        if np.ceil(x1) - 1 < np.floor(x0) or np.ceil(y1) - 1 < np.floor(y0):
            continue
        np.testing.assert_array_equal(roi_max_pool(Tensor3(maps), roi), roi_oracle(maps, roi))


def test_roi_max_pool_grows_with_the_roi(rng):
    for _ in range(50):
        channels, height, width = int(rng.integers(1, 9)), int(rng.integers(2, 17)), int(rng.integers(2, 17))
        maps = Tensor3(rng.normal(size=(channels, height, width)))
        x0, x1 = np.sort(rng.uniform(0, width, size=2))
        y0, y1 = np.sort(rng.uniform(0, height, size=2))
        inner = BBox(x0, y0, x1, y1, width, height)
        outer = BBox(rng.uniform(0, x0), rng.uniform(0, y0), rng.uniform(x1, width), rng.uniform(y1, height),
                     width, height)
        assert np.all(roi_max_pool(maps, outer) >= roi_max_pool(maps, inner))


def test_roi_max_pool_with_cell_mask():
    maps = Tensor3(np.array([[[1.0, 9.0], [3.0, 4.0]]]))
    cell_mask = np.array([[True, False], [True, True]])
    assert roi_max_pool(maps, BBox(0, 0, 2, 2, 2, 2), cell_mask).tolist() == [4.0]
    with pytest.raises(ShapeMismatchError):
        roi_max_pool(maps, BBox(0, 0, 2, 2, 2, 2), np.ones((3, 3), dtype=bool))


def test_mask_to_map_grid_uses_cell_centres():
    mask = np.zeros((8, 8), dtype=bool)
    mask[:4, :4] = True
    assert mask_to_map_grid(mask, 2, 2).tolist() == [[True, False], [False, False]]


def test_deformable_zero_offsets_is_plain_conv(rng):
    x = Tensor3(rng.normal(size=(3, 7, 7)))
    conv = random_conv_params(rng, 4, 3, 3)
    params = DeformConvParams(conv, constant_offsets(3, 3, 0.0, 0.0, conv.padding))
    np.testing.assert_allclose(deformable_conv2d(x, params).data, conv2d(x, conv).data, atol=1e-6)


def test_deformable_unit_shift_matches_shifted_conv(rng):
    data = rng.normal(size=(2, 6, 8))
    data[:, :, :2] = 0.0
    data[:, :, -2:] = 0.0
    shifted = np.zeros_like(data)
    shifted[:, :, :-1] = data[:, :, 1:]
    conv = random_conv_params(rng, 3, 2, 3)
    params = DeformConvParams(conv, constant_offsets(2, 3, 0.0, 1.0, conv.padding))
    np.testing.assert_allclose(deformable_conv2d(Tensor3(data), params).data,
                               conv2d(Tensor3(shifted), conv).data, atol=1e-5)


def test_deformable_half_pixel_on_ramp():
    width = 6
    ramp = Tensor3(np.tile(np.arange(width, dtype=np.float32), (1, 3, 1)))
    conv = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    params = DeformConvParams(conv, constant_offsets(1, 1, 0.0, 0.5, 0))
    out = deformable_conv2d(ramp, params).data[0]
    np.testing.assert_allclose(out[:, :width - 1], np.tile(np.arange(width - 1) + 0.5, (3, 1)), atol=1e-6)


def test_deformable_matches_oracle(rng, bilinear_oracle):
    for _ in range(10):
        channels, size = int(rng.integers(1, 4)), int(rng.integers(4, 8))
        x = rng.normal(size=(channels, size, size)).astype(np.float32)
        conv = random_conv_params(rng, 2, channels, 3, scale=0.5)
        offset_conv = random_conv_params(rng, 18, channels, 3, scale=0.5)
        params = DeformConvParams(conv, offset_conv)
        offsets = conv2d(Tensor3(x), offset_conv).data.astype(np.float64)
        expected = deformable_oracle(x, conv, offsets, bilinear_oracle)
        np.testing.assert_allclose(deformable_conv2d(Tensor3(x), params).data, expected, atol=1e-5)


def test_deformable_params_validation(rng):
    conv = random_conv_params(rng, 2, 2, 3)
    with pytest.raises(ShapeMismatchError):
        DeformConvParams(conv, random_conv_params(rng, 9, 2, 3))
    with pytest.raises(ShapeMismatchError):
        DeformConvParams(conv, random_conv_params(rng, 18, 2, 3, padding=0))


def test_grouped_conv_matches_oracle(rng, conv_oracle):
    for groups in (1, 2, 4):
        x = rng.normal(size=(8, 6, 6)).astype(np.float32)
        params = random_conv_params(rng, 8, 8 // groups, 3)
        expected = conv_oracle(x, params.weights, params.bias, 1, params.padding, 1, groups)
        np.testing.assert_allclose(grouped_conv2d(Tensor3(x), params, groups).data, expected, atol=1e-5)


def test_grouped_conv_single_group_is_dense(rng):
    x = Tensor3(rng.normal(size=(4, 5, 5)))
    params = random_conv_params(rng, 6, 4, 3)
    np.testing.assert_array_equal(grouped_conv2d(x, params, 1).data, conv2d(x, params).data)


def test_grouped_conv_divisibility():
    x = Tensor3(np.ones((6, 4, 4)))
    with pytest.raises(ShapeMismatchError):
        grouped_conv2d(x, ConvParams(np.ones((4, 3, 1, 1))), 4)


@pytest.mark.parametrize('deformable', [False, True])
def test_zero_weight_block_is_relu_identity(rng, deformable):
    block = make_resnext_block(rng, 64, 64, 64, cardinality=32, deformable=deformable)
    zeroed = {name: ConvParams(np.zeros_like(conv.weights), np.zeros_like(conv.bias), conv.stride,
                               conv.padding, conv.dilation)
              for name, conv in (('reduce', block.reduce), ('grouped', block.grouped), ('expand', block.expand))}
    params = ResNeXtBlockParams(32, zeroed['reduce'], zeroed['grouped'], zeroed['expand'],
                                deformable=deformable, offset_conv=block.offset_conv)
    x = Tensor3(rng.normal(size=(64, 5, 5)))
    np.testing.assert_array_equal(resnext_block_forward(x, params).data, relu(x).data)


def test_single_path_block_is_three_plain_convs(rng):
    block = make_resnext_block(rng, 8, 8, 16, cardinality=1)
    x = Tensor3(rng.normal(size=(8, 6, 6)))
    branch = conv2d(relu(conv2d(relu(conv2d(x, block.reduce)), block.grouped)), block.expand)
    expected = np.maximum(branch.data.astype(np.float64) + conv2d(x, block.projection).data, 0.0)
    np.testing.assert_allclose(resnext_block_forward(x, block).data, expected, atol=1e-6)


def test_deformable_block_with_zero_offsets_is_the_plain_block(rng):
    block = make_resnext_block(rng, 16, 16, 16, cardinality=4, deformable=True, scale=0.3)
    offsets = block.offset_conv
    still = ConvParams(np.zeros_like(offsets.weights), np.zeros_like(offsets.bias), offsets.stride,
                       offsets.padding, offsets.dilation)
    deformed = ResNeXtBlockParams(4, block.reduce, block.grouped, block.expand, block.projection,
                                  deformable=True, offset_conv=still)
    plain = ResNeXtBlockParams(4, block.reduce, block.grouped, block.expand, block.projection)
    x = Tensor3(rng.normal(size=(16, 7, 7)))
    assert np.abs(resnext_block_forward(x, plain).data - relu(x).data).max() > 1e-3
    np.testing.assert_allclose(resnext_block_forward(x, deformed).data, resnext_block_forward(x, plain).data,
                               atol=1e-5)


def test_block_with_projection_changes_channels(rng):
    block = make_resnext_block(rng, 16, 32, 48, cardinality=8)
    out = resnext_block_forward(Tensor3(rng.normal(size=(16, 6, 6))), block)
    assert out.shape == (48, 6, 6)
    assert out.data.min() >= 0.0


def test_block_rejects_indivisible_cardinality(rng):
    with pytest.raises(ShapeMismatchError):
        make_resnext_block(rng, 16, 20, 16, cardinality=32)


def test_bottleneck_parameter_parity():
    report = bottleneck_parameter_report()
    assert report['resnet_params'] == 70016
    assert report['resnext_params'] == 70656
    assert report['ratio'] <= 1.1


def test_block_parameter_count_counts_every_conv(rng):
    block = make_resnext_block(rng, 8, 8, 16, cardinality=2, deformable=True)
    expected = sum(c.weights.size + c.bias.size for c in
                   (block.reduce, block.grouped, block.expand, block.projection, block.offset_conv))
    assert block_parameter_count(block) == expected


def test_block_weights_file_reproduces_forward_pass(tmp_path, rng):
    block = make_resnext_block(rng, 32, 32, 64, cardinality=4, deformable=True)
    save_block_weights(tmp_path / 'block.kwts', block)
    loaded = load_block_weights(tmp_path / 'block.kwts')
    x = Tensor3(rng.normal(size=(32, 5, 5)))
    assert loaded.deformable and loaded.cardinality == 4
    np.testing.assert_array_equal(resnext_block_forward(x, loaded).data, resnext_block_forward(x, block).data)


def test_block_weights_bad_magic(tmp_path):
    path = tmp_path / 'bad.kwts'
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_block_weights(path)


@pytest.mark.slow
def test_kernel_oracle_suite_at_full_size(rng, conv_oracle):
    for _ in range(100):
        channels = int(rng.integers(1, 9))
        height, width = int(rng.integers(3, 17)), int(rng.integers(3, 17))
        x = rng.normal(size=(channels, height, width)).astype(np.float32)
        params = random_conv_params(rng, int(rng.integers(1, 5)), channels, 3)
        expected = conv_oracle(x, params.weights, params.bias, 1, params.padding, 1)
        np.testing.assert_allclose(conv2d(Tensor3(x), params).data, expected, atol=1e-5)


@pytest.mark.slow
def test_grouped_conv_oracle_suite_at_full_size(rng, conv_oracle):
    for case in range(120):
        groups = (1, 2, 4)[case % 3]
        channels = groups * int(rng.integers(1, 8 // groups + 1))
        height, width = int(rng.integers(3, 17)), int(rng.integers(3, 17))
        x = rng.normal(size=(channels, height, width)).astype(np.float32)
        params = random_conv_params(rng, groups * int(rng.integers(1, 3)), channels // groups, 3)
        expected = conv_oracle(x, params.weights, params.bias, 1, params.padding, 1, groups)
        np.testing.assert_allclose(grouped_conv2d(Tensor3(x), params, groups).data, expected, atol=1e-5)


@pytest.mark.slow
def test_deformable_oracle_suite_at_full_size(rng, bilinear_oracle):
    for _ in range(100):
        channels = int(rng.integers(1, 9))
        height, width = int(rng.integers(3, 17)), int(rng.integers(3, 17))
        x = rng.normal(size=(channels, height, width)).astype(np.float32)
        conv = random_conv_params(rng, int(rng.integers(1, 3)), channels, 3, scale=0.5)
        offset_conv = random_conv_params(rng, 18, channels, 3, scale=0.5)
        offsets = conv2d(Tensor3(x), offset_conv).data.astype(np.float64)
        expected = deformable_oracle(x, conv, offsets, bilinear_oracle)
        np.testing.assert_allclose(deformable_conv2d(Tensor3(x), DeformConvParams(conv, offset_conv)).data,
                                   expected, rtol=1e-5, atol=1e-5)


def test_demo_runs(capsys):
    demo_kernels()
    out = capsys.readouterr().out
    assert 'PARAMETER PARITY' in out
    assert 'Output: (64, 12, 12)' in out
