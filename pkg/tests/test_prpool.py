import numpy as np
import pytest
import torch
import torch.nn.functional as F

from tinytrack.tracker.prpool import image_to_cells, prpool

D = torch.float64


def test_constant_map_gives_constant():
    feat = torch.full((1, 2, 8, 8), 3.25, dtype=D)
    boxes = torch.tensor([[[0.7, 1.3, 4.1, 2.9], [2.0, 2.0, 3.0, 5.0]]], dtype=D)
    out = prpool(feat, boxes, 3)
    assert out.shape == (1, 2, 2, 3, 3)
    np.testing.assert_allclose(out.numpy(), 3.25, rtol=0, atol=1e-12)


def test_cell_aligned_box_equals_average_pooling():
    feat = torch.randn(2, 3, 12, 12, dtype=D)
    boxes = torch.tensor([[0.0, 0.0, 12.0, 12.0]], dtype=D).expand(2, 1, 4)
    out = prpool(feat, boxes, 3)[:, 0]
    np.testing.assert_allclose(out.numpy(), F.avg_pool2d(feat, 4).numpy(), rtol=0, atol=1e-12)


def test_aligned_sub_box_equals_cell_means():
    # one sample per 2x1 bin lands midway between two cell centers
    feat = torch.randn(1, 1, 10, 10, dtype=D)
    out = prpool(feat, torch.tensor([[[2.0, 3.0, 6.0, 3.0]]], dtype=D), 3, samples=1)[0, 0, 0]
    for i in range(3):
        for j in range(3):
            cells = feat[0, 0, 3 + i, 2 + 2 * j:4 + 2 * j]
            assert float(out[i, j]) == pytest.approx(float(cells.mean()), abs=1e-12)


def test_whole_stride_shift_on_periodic_map():
    x = torch.arange(16, dtype=D)
    row = torch.sin(x * np.pi / 2) + torch.cos(x * np.pi)  # period 4 cells
    feat = row.expand(1, 1, 16, 16).clone()
    box = torch.tensor([[[1.3, 2.6, 5.5, 3.75]]], dtype=D)
    a = prpool(feat, box, 3)
    b = prpool(feat, box + torch.tensor([4.0, 0, 0, 0], dtype=D), 3)
    np.testing.assert_allclose(a.numpy(), b.numpy(), rtol=0, atol=1e-12)


def test_gradients_in_features_and_boxes():
    feat = torch.randn(1, 2, 6, 6, dtype=D, requires_grad=True)
    boxes = torch.tensor([[[1.21, 0.83, 3.37, 2.71]]], dtype=D, requires_grad=True)
    torch.autograd.gradcheck(lambda f, b: prpool(f, b, 2), (feat, boxes), eps=1e-6, atol=1e-6)


def test_errors_and_helpers():
    feat = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        prpool(feat, torch.tensor([[[0.0, 0.0, 0.0, 1.0]]]))
    with pytest.raises(ValueError):
        prpool(feat, torch.zeros(2, 1, 4) + 1)
    with pytest.raises(ValueError):
        prpool(feat[0], torch.ones(1, 1, 4))
    np.testing.assert_array_equal(image_to_cells(torch.tensor([16.0, 32.0, 8.0, 48.0]), 16).numpy(), [1, 2, 0.5, 3])
