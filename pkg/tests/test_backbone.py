import numpy as np
import pytest
import torch

from pvseg.data.patches import ImagePatch
from pvseg.errors import ShapeMismatchError
from pvseg.model.backbone import Backbone, extract_features
from pvseg.model.config import BackboneConfig
from pvseg.utils.gradcheck import max_relative_error


def test_shapes_at_416():
    backbone = Backbone(BackboneConfig(channels=(32, 64, 128, 256)))
    pyramid = extract_features(torch.rand(1, 3, 416, 416), backbone)
    assert [tuple(m.shape[1:]) for m in pyramid] == [
        (32, 104, 104),
        (64, 52, 52),
        (128, 26, 26),
        (256, 13, 13),
    ]


def test_400_is_rejected_with_padding_hint():
    backbone = Backbone(BackboneConfig())
    with pytest.raises(ShapeMismatchError, match="416x416"):
        extract_features(torch.rand(1, 3, 400, 400), backbone)


def test_shapes_at_64_from_patch(tiny_config):
    backbone = Backbone(tiny_config.backbone)
    patch = ImagePatch(np.random.default_rng(0).random((64, 64, 3), dtype=np.float32))
    pyramid = extract_features(patch, backbone)
    assert pyramid.shapes == ((16, 16), (8, 8), (4, 4), (2, 2))
    assert pyramid.channels == (8, 8, 16, 16)


def test_shape_contract_over_random_sizes(tiny_config, rng):
    backbone = Backbone(tiny_config.backbone)
    for _ in range(5):
        h, w = (int(v) * 32 for v in rng.integers(1, 5, size=2))
        pyramid = backbone(torch.rand(2, 3, h, w))
        for stride, m in zip((4, 8, 16, 32), pyramid):
            assert m.shape[0] == 2
            assert m.shape[-2:] == (h // stride, w // stride)


def test_zero_input_with_zero_biases_gives_zero_features(tiny_config):
    backbone = Backbone(tiny_config.backbone)
    with torch.no_grad():
        for name, p in backbone.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    pyramid = backbone(torch.zeros(1, 3, 64, 64))
    assert torch.count_nonzero(pyramid[-1]) == 0


def test_channels_must_widen():
    with pytest.raises(ValueError):
        BackboneConfig(channels=(64, 32, 128, 256))
    with pytest.raises(ValueError):
        BackboneConfig(channels=(8, 8), blocks=(1,))


def test_input_gradient_matches_finite_differences(smooth_config):
    backbone = Backbone(smooth_config.backbone).double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 4, 1, 1, dtype=torch.float64)

    def fn():
        return (backbone(x)[-1] * weights).sum()

    assert max_relative_error(fn, [x], max_checks=40) <= 1e-4
