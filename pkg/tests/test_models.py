import numpy as np
import pytest
import torch

from bsl.models import (AdversarialHead, ConfigurationError, GridAlign, RestorationHead,
                        SmallCNN, TinyNet, Xception, build_backbone, build_model, decode_coords,
                        select_taps, to_tensor)
from bsl.shuffle import identity_map, normalize_coords


def test_align_identity_when_grid_matches():
    head = AdversarialHead(64, (14, 14), (14, 14))
    assert head.align.mode == "identity" and head.align.r == 1
    assert head(torch.randn(2, 64, 14, 14)).shape == (2, 14, 14)


def test_align_depth_to_space():
    head = AdversarialHead(8, (7, 7), (14, 14))
    assert head.align.mode == "depth_to_space" and head.align.r == 2
    assert head.proj.in_channels == 2
    assert head(torch.randn(3, 8, 7, 7)).shape == (3, 14, 14)


def test_align_depth_to_space_requires_divisible_channels():
    with pytest.raises(ConfigurationError, match="divisible by 4"):
        AdversarialHead(6, (7, 7), (14, 14))


def test_align_falls_back_to_resampling():
    align = GridAlign(5, (5, 5), (7, 7))
    assert align.mode == "resample"
    assert align(torch.randn(1, 5, 5, 5)).shape == (1, 5, 7, 7)


def test_depth_to_space_is_lossless():
    align = GridAlign(8, (3, 3), (6, 6))
    x = torch.randn(1, 8, 3, 3)
    y = align(x)
    assert sorted(y.flatten().tolist()) == sorted(x.flatten().tolist())


def test_zero_init_adv_head_gives_half_probability():
    head = AdversarialHead(16, (4, 4), (8, 8), zero_init=True)
    p = torch.sigmoid(head(torch.randn(2, 16, 4, 4)))
    assert torch.equal(p, torch.full_like(p, 0.5))


def test_restoration_head_bounded():
    head = RestorationHead(4, (7, 7), (7, 7))
    with torch.no_grad():
        head.proj.weight.mul_(100)
    out = head(torch.randn(2, 4, 7, 7) * 10)
    assert out.shape == (2, 2, 7, 7)
    assert out.abs().max() <= 1.0


def test_full_scale_xception_alignment():
    net = Xception()
    model = build_model(net, 16, 32, 224)
    assert (model.tap_u, model.tap_v) == ("middle", "exit")
    assert model.adv_head.align.r == 1 and model.rest_head.align.r == 1
    model.eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 224, 224))
    assert out["adv"].shape == (1, 14, 14)
    assert out["coords"].shape == (1, 2, 7, 7)
    assert out["logits"].shape == (1,)


@pytest.mark.parametrize("arch", ["resnet18", "efficientnet_b0"])
def test_torchvision_adapters(arch):
    model = build_model(arch, 16, 32, 224)
    model.eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 224, 224))
    assert out["adv"].shape == (1, 14, 14) and out["coords"].shape == (1, 2, 7, 7)


def test_backbone_weights_roundtrip(tmp_path):
    torch.manual_seed(0)
    a = SmallCNN()
    path = tmp_path / "w.pt"
    torch.save(a.state_dict(), path)
    b = build_backbone("small_cnn", path)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_select_taps_by_stride():
    net = SmallCNN()
    assert select_taps(net, 8, 16) == ("stage3", "stage4")
    assert select_taps(net, 16, 32) == ("stage4", "stage4")
    with pytest.raises(ConfigurationError):
        select_taps(net, 8, 16, tap_u="nope")


def test_desk_model_shapes():
    model = build_model("small_cnn", 8, 16, 64)
    out = model(torch.rand(2, 3, 64, 64))
    assert out["adv"].shape == (2, 8, 8) and out["coords"].shape == (2, 2, 4, 4)


def test_heads_do_not_change_classifier_output():
    torch.manual_seed(0)
    model = build_model(TinyNet(), 4, 8, 16, tap_u="c3")
    model.eval()
    x = torch.rand(3, 3, 16, 16)
    with torch.no_grad():
        a = model(x, heads=True)["logits"]
        b = model(x, heads=False)["logits"]
        c = model.backbone(x)[0]
    assert torch.equal(a, b) and torch.equal(a, c)


def test_indivisible_input_rejected():
    with pytest.raises(ConfigurationError):
        build_model("small_cnn", 8, 16, 60)


def test_decode_exact_targets():
    rng = np.random.default_rng(0)
    flat = rng.permutation(49)
    beta = np.stack(np.divmod(flat, 7), -1).reshape(7, 7, 2)
    np.testing.assert_array_equal(decode_coords(normalize_coords(beta)), beta)


def test_decode_zero_is_center():
    out = decode_coords(np.zeros((2, 7, 7)))
    assert (out == 3).all()


def test_decode_clamps_and_handles_degenerate_grid():
    out = decode_coords(np.full((2, 3, 1), 5.0))
    assert (out[..., 0] == 2).all() and (out[..., 1] == 0).all()


def test_decode_fuzz_1000():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        m, n = rng.integers(1, 9, 2)
        flat = rng.permutation(m * n)
        beta = np.stack(np.divmod(flat, n), -1).reshape(m, n, 2)
        np.testing.assert_array_equal(decode_coords(normalize_coords(beta)), beta)


def test_decode_batched_tensor():
    coords = torch.from_numpy(np.stack([normalize_coords(identity_map(4, 4))] * 3))
    np.testing.assert_array_equal(decode_coords(coords), np.stack([identity_map(4, 4)] * 3))


def test_to_tensor_layout():
    img = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    t = to_tensor(img)
    assert t.shape == (1, 3, 2, 3)
    assert t[0, 1, 1, 2] == img[1, 2, 1]


def test_gradient_reversal_flips_backbone_gradient():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 16, 16)
    grads = []
    for rev in (False, True):
        torch.manual_seed(0)
        model = build_model(TinyNet(), 4, 8, 16, tap_u="c3", gradient_reversal=rev)
        out = model(x)
        out["adv"].sum().backward()
        grads.append((model.backbone.c1.weight.grad.clone(), model.adv_head.proj.weight.grad.clone()))
    torch.testing.assert_close(grads[1][0], -grads[0][0])
    torch.testing.assert_close(grads[1][1], grads[0][1])
