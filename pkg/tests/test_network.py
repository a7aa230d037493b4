import numpy as np
import pytest
import torch

from tinytrack.tracker.network import NetConfig, TrackerNet, parameter_checksum


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return TrackerNet(NetConfig())


def test_feature_map_size(net):
    fm = net.extract_features(torch.rand(2, 3, 352, 352))
    assert fm.values.shape == (2, 16, 22, 22) and fm.stride == 16
    three = TrackerNet(NetConfig(blocks=3, input_size=288))
    assert three.extract_features(torch.rand(3, 288, 288)).values.shape == (1, 16, 18, 18)


def test_deterministic(net):
    img = torch.rand(1, 3, 352, 352)
    a = net.extract_features(img).values
    b = net.extract_features(img.clone()).values
    assert torch.equal(a, b)


def test_zero_image_zero_bias_gives_zero_map():
    torch.manual_seed(1)
    n = TrackerNet()
    with torch.no_grad():
        for m in n.backbone.blocks:
            m.bias.zero_()
        n.cls_feat.bias.zero_()
    feat = n.extract_features(torch.zeros(1, 3, 352, 352)).values
    assert torch.count_nonzero(feat) == 0
    assert torch.count_nonzero(n.classification_features(feat)) == 0


@pytest.mark.parametrize("shape", [(1, 3, 350, 352), (1, 1, 352, 352), (2, 3, 353, 353)])
def test_wrong_input_size(net, shape):
    with pytest.raises(ValueError):
        net.extract_features(torch.zeros(shape))


@pytest.mark.parametrize("kw", [dict(blocks=5), dict(channels=8), dict(channels=128), dict(input_size=350),
                                dict(filter_size=4)])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        NetConfig(**kw)


def test_forward_train_outputs(net):
    torch.manual_seed(3)
    cfg = NetConfig(kl_points=3)
    n = TrackerNet(cfg)
    imgs = torch.rand(1, 2, 3, 352, 352)
    boxes = torch.tensor([[[150.0, 160.0, 40.0, 30.0], [140.0, 150.0, 44.0, 32.0]]])
    out = n.forward_train(imgs, boxes, imgs[:, :1], boxes[:, :1])
    assert out["rois"].shape == (1, 16, 3, 3)
    assert out["scores"].shape == (1, 22, 22)
    assert out["iou_scores"].shape == (81,)
    assert torch.isfinite(out["loss_cls"]) and torch.isfinite(out["loss_iou"])
    (out["loss_cls"] + out["loss_iou"]).backward()
    assert n.cls_feat.weight.grad is not None and n.iou_head.fc2.weight.grad is not None


def test_checksum_tracks_parameters():
    torch.manual_seed(0)
    a = TrackerNet()
    torch.manual_seed(0)
    b = TrackerNet()
    assert parameter_checksum(a) == parameter_checksum(b)
    with torch.no_grad():
        b.log_lambda.add_(1e-3)
    assert parameter_checksum(a) != parameter_checksum(b)
