import pytest
import torch
from torchvision.models import vgg19

from ivfuse.backbone import (NUM_LEVELS, TestBackbone, VGG19Backbone, extract, load_backbone)
from ivfuse.errors import ImageTooSmallError
from oracles import central_difference, relative_error


def test_pyramid_shapes():
    feats = extract(torch.rand(2, 1, 40, 24), TestBackbone())
    assert len(feats) == NUM_LEVELS
    sizes = [tuple(f.shape[-2:]) for f in feats]
    assert sizes == [(40, 24), (20, 12), (10, 6), (5, 3), (3, 2)]
    assert all(torch.isfinite(f).all() for f in feats)


def test_deterministic_and_non_constant():
    bb = TestBackbone(seed=4)
    x = torch.rand(1, 1, 32, 32)
    a, b = extract(x, bb), extract(x, TestBackbone(seed=4))
    for fa, fb in zip(a, b):
        assert torch.equal(fa, fb)
    zeros = extract(torch.zeros(1, 1, 32, 32), bb)
    ones = extract(torch.ones(1, 1, 32, 32), bb)
    assert any(not torch.equal(z, o) for z, o in zip(zeros, ones))


def test_single_channel_is_replicated():
    bb = TestBackbone()
    x = torch.rand(1, 1, 16, 16)
    for a, b in zip(extract(x, bb), extract(x.expand(-1, 3, -1, -1), bb)):
        assert torch.equal(a, b)


def test_frozen_and_always_eval():
    bb = TestBackbone()
    assert not any(p.requires_grad for p in bb.parameters())
    bb.train()
    assert not bb.training


def test_jvp_matches_finite_differences():
    bb = TestBackbone(seed=1).double()
    x = torch.rand(1, 1, 8, 8, dtype=torch.float64, requires_grad=True)
    weights = [torch.randn_like(f) for f in extract(x, bb)]

    def scalar(img):
        return sum((f * w).sum() for f, w in zip(extract(img, bb), weights))

    (grad,) = torch.autograd.grad(scalar(x), x)
    assert relative_error(grad, central_difference(scalar, x)) < 1e-3


def test_vgg19_from_local_file(tmp_path):
    path = tmp_path / "vgg19.pth"
    torch.manual_seed(0)
    torch.save(vgg19(weights=None).state_dict(), path)
    bb, info = load_backbone(str(path))
    assert isinstance(bb, VGG19Backbone) and info["backbone"] == "vgg19"
    feats = extract(torch.rand(1, 1, 64, 64), bb)
    assert [f.shape[1] for f in feats] == [64, 128, 256, 512, 512]
    assert [f.shape[-1] for f in feats] == [64, 32, 16, 8, 4]
    with pytest.raises(ImageTooSmallError):
        extract(torch.rand(1, 1, 16, 16), bb)


def test_missing_weights_selects_test_backbone(tmp_path):
    bb, info = load_backbone(str(tmp_path / "absent.pth"))
    assert isinstance(bb, TestBackbone)
    assert info["backbone"] == "test" and info["reason"] == "weights file not found"
