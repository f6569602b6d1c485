"""Backbones with feature taps and the two auxiliary heads.

A backbone adapter returns ``(logits, features)`` where ``logits`` has one
fake-vs-real score per image and ``features`` maps tap names to NCHW arrays.
The adversarial head reads the tap aligned with the intra grid, the
restoration head the tap aligned with the inter grid.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ConfigurationError",
    "BackboneAdapter",
    "SmallCNN",
    "TinyNet",
    "Xception",
    "TorchvisionAdapter",
    "GridAlign",
    "AdversarialHead",
    "RestorationHead",
    "BSLModel",
    "build_backbone",
    "build_model",
    "select_taps",
    "decode_coords",
    "grad_reverse",
    "to_tensor",
]


class ConfigurationError(ValueError):
    pass


def to_tensor(images, dtype=torch.float32):
    """(B, H, W, C) or (H, W, C) array -> NCHW tensor."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


class BackboneAdapter(nn.Module):
    """Base class: subclasses fill ``taps`` (name -> stride) and implement ``forward``."""

    name = "backbone"
    taps: dict = {}
    tap_u: str | None = None
    tap_v: str | None = None

    def forward(self, x):
        raise NotImplementedError

    def classify(self, x):
        return self.forward(x)[0]


def _conv_bn(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SmallCNN(BackboneAdapter):
    """Desk-scale CNN with taps at strides 2, 4, 8 and 16."""

    name = "small_cnn"

    def __init__(self, in_channels=3, widths=(16, 32, 64, 96)):
        super().__init__()
        stages, cin = [], in_channels
        for w in widths:
            stages.append(nn.Sequential(_conv_bn(cin, w, 2), _conv_bn(w, w, 1)))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, 1)
        self.taps = {f"stage{i + 1}": 2 ** (i + 1) for i in range(len(widths))}

    def forward(self, x):
        feats = {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats[f"stage{i + 1}"] = x
        logits = self.fc(x.mean(dim=(2, 3))).squeeze(1)
        return logits, feats


class TinyNet(BackboneAdapter):
    """Smooth toy network (well under 1k parameters) for gradient checks."""

    name = "tiny"

    def __init__(self, in_channels=3):
        super().__init__()
        self.c1 = nn.Conv2d(in_channels, 4, 3, 2, 1)
        self.c2 = nn.Conv2d(4, 8, 3, 2, 1)
        self.c3 = nn.Conv2d(8, 4, 3, 2, 1)
        self.fc = nn.Linear(4, 1)
        self.taps = {"c1": 2, "c2": 4, "c3": 8}

    def forward(self, x):
        f1 = torch.tanh(self.c1(x))
        f2 = torch.tanh(self.c2(f1))
        f3 = torch.tanh(self.c3(f2))
        return self.fc(f3.mean(dim=(2, 3))).squeeze(1), {"c1": f1, "c2": f2, "c3": f3}


class SeparableConv2d(nn.Module):
    def __init__(self, cin, cout, kernel_size=1, stride=1, padding=0, bias=False):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cin, kernel_size, stride, padding, groups=cin, bias=bias)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=bias)

    def forward(self, x):
        return self.pointwise(self.conv1(x))


class _XBlock(nn.Module):
    def __init__(self, cin, cout, reps, stride=1, start_with_relu=True, grow_first=True):
        super().__init__()
        if cout != cin or stride != 1:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.skipbn = nn.BatchNorm2d(cout)
        else:
            self.skip = None
        rep, filters = [], cin
        if grow_first:
            rep += [nn.ReLU(), SeparableConv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout)]
            filters = cout
        for _ in range(reps - 1):
            rep += [nn.ReLU(), SeparableConv2d(filters, filters, 3, 1, 1), nn.BatchNorm2d(filters)]
        if not grow_first:
            rep += [nn.ReLU(), SeparableConv2d(cin, cout, 3, 1, 1), nn.BatchNorm2d(cout)]
        if not start_with_relu:
            rep = rep[1:]
        if stride != 1:
            rep.append(nn.MaxPool2d(3, stride, 1))
        self.rep = nn.Sequential(*rep)

    def forward(self, x):
        skip = self.skipbn(self.skip(x)) if self.skip is not None else x
        return self.rep(x) + skip


class Xception(BackboneAdapter):
    """Xception with the common pretrained-weight parameter names.

    Taps: ``middle`` (end of middle flow, stride 16) and ``exit`` (after the
    final separable convs, stride 32).  At 224x224 input they are 14x14 and
    7x7.
    """

    name = "xception"

    def __init__(self, in_channels=3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 32, 3, 2, 0, bias=False)
        self.bn1 = nn.BatchNorm2d(32)
        self.conv2 = nn.Conv2d(32, 64, 3, bias=False)
        self.bn2 = nn.BatchNorm2d(64)
        self.block1 = _XBlock(64, 128, 2, 2, start_with_relu=False)
        self.block2 = _XBlock(128, 256, 2, 2)
        self.block3 = _XBlock(256, 728, 2, 2)
        for k in range(4, 12):
            setattr(self, f"block{k}", _XBlock(728, 728, 3, 1))
        self.block12 = _XBlock(728, 1024, 2, 2, grow_first=False)
        self.conv3 = SeparableConv2d(1024, 1536, 3, 1, 1)
        self.bn3 = nn.BatchNorm2d(1536)
        self.conv4 = SeparableConv2d(1536, 2048, 3, 1, 1)
        self.bn4 = nn.BatchNorm2d(2048)
        self.fc = nn.Linear(2048, 1)
        self.taps = {"middle": 16, "exit": 32}

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        for k in range(1, 12):
            x = getattr(self, f"block{k}")(x)
        middle = x
        x = self.block12(x)
        x = F.relu(self.bn3(self.conv3(x)))
        x = F.relu(self.bn4(self.conv4(x)))
        return self.fc(x.mean(dim=(2, 3))).squeeze(1), {"middle": middle, "exit": x}


class TorchvisionAdapter(BackboneAdapter):
    """ResNet / EfficientNet from torchvision, re-headed to a single logit."""

    _TAPS = {
        "resnet18": {"layer3": 16, "layer4": 32},
        "resnet50": {"layer3": 16, "layer4": 32},
        "efficientnet_b0": {"features.5": 16, "features.8": 32},
    }

    def __init__(self, arch="resnet18"):
        super().__init__()
        import torchvision
        from torchvision.models.feature_extraction import create_feature_extractor

        if arch not in self._TAPS:
            raise ConfigurationError(f"unsupported torchvision arch {arch!r}")
        self.name = arch
        net = getattr(torchvision.models, arch)(weights=None)
        self.taps = dict(self._TAPS[arch])
        last = list(self.taps)[-1]
        self.body = create_feature_extractor(net, return_nodes={k: k for k in self.taps})
        with torch.no_grad():
            width = self.body(torch.zeros(1, 3, 64, 64))[last].shape[1]
        self.fc = nn.Linear(width, 1)
        self._last = last

    def forward(self, x):
        feats = self.body(x)
        return self.fc(feats[self._last].mean(dim=(2, 3))).squeeze(1), feats


def build_backbone(name, weights=None):
    """Instantiate a backbone by name, optionally loading a state-dict file.

    Classifier weights whose shape does not match the single-logit head are
    dropped so ImageNet-style checkpoints load cleanly.
    """
    if name == "small_cnn":
        net = SmallCNN()
    elif name == "tiny":
        net = TinyNet()
    elif name == "xception":
        net = Xception()
    else:
        net = TorchvisionAdapter(name)
    if weights is not None:
        state = torch.load(weights, map_location="cpu")
        own = net.state_dict()
        state = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
        net.load_state_dict(state, strict=False)
    return net


def select_taps(backbone, s_intra, s_inter, tap_u=None, tap_v=None):
    """Pick the taps whose stride matches each block size.

    Falls back to the deepest tap with stride <= block size, then to the
    shallowest tap.  Explicit names (or ``backbone.tap_u/tap_v``) win.
    """
    def pick(target):
        exact = [k for k, s in backbone.taps.items() if s == target]
        if exact:
            return exact[-1]
        below = [k for k, s in backbone.taps.items() if s <= target]
        return below[-1] if below else next(iter(backbone.taps))

    u = tap_u or backbone.tap_u or pick(s_intra)
    v = tap_v or backbone.tap_v or pick(s_inter)
    for t in (u, v):
        if t not in backbone.taps:
            raise ConfigurationError(f"unknown tap {t!r}; available: {sorted(backbone.taps)}")
    return u, v


class GridAlign(nn.Module):
    """Bring an (h, w) feature map onto an (m, n) block grid.

    Uses depth-to-space by ``r = m / h`` when both sides divide evenly with the
    same factor, otherwise nearest-neighbour resampling.
    """

    def __init__(self, channels, feat_hw, grid_hw):
        super().__init__()
        (h, w), (m, n) = feat_hw, grid_hw
        self.grid_hw = (m, n)
        self.mode = "resample"
        self.r = None
        if m % h == 0 and n % w == 0 and m // h == n // w:
            r = m // h
            if channels % (r * r):
                raise ConfigurationError(
                    f"depth-to-space by {r} needs channels divisible by {r * r}, got {channels}")
            self.r = r
            self.mode = "identity" if r == 1 else "depth_to_space"
        self.out_channels = channels // (self.r * self.r) if self.r else channels
        self.shuffle = nn.PixelShuffle(self.r) if self.mode == "depth_to_space" else None

    def forward(self, x):
        if self.mode == "identity":
            return x
        if self.mode == "depth_to_space":
            return self.shuffle(x)
        return F.interpolate(x, size=self.grid_hw, mode="nearest")


class AdversarialHead(nn.Module):
    """Per-tile shuffle logits, shape (B, m_a, n_a)."""

    def __init__(self, channels, feat_hw, grid_hw, zero_init=False):
        super().__init__()
        self.align = GridAlign(channels, feat_hw, grid_hw)
        self.proj = nn.Conv2d(self.align.out_channels, 1, 1)
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, feats):
        return self.proj(self.align(feats)).squeeze(1)


class RestorationHead(nn.Module):
    """Per-tile normalized source coordinates, shape (B, 2, m_b, n_b), in [-1, 1]."""

    def __init__(self, channels, feat_hw, grid_hw, zero_init=False):
        super().__init__()
        self.align = GridAlign(channels, feat_hw, grid_hw)
        self.proj = nn.Conv2d(self.align.out_channels, 2, 1)
        self.act = nn.Hardtanh()
        if zero_init:
            nn.init.zeros_(self.proj.weight)
            nn.init.zeros_(self.proj.bias)

    def forward(self, feats):
        return self.act(self.proj(self.align(feats)))


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -grad


def grad_reverse(x):
    return _GradReverse.apply(x)


class BSLModel(nn.Module):
    """Backbone plus the adversarial and restoration heads.

    ``forward`` returns a dict with ``logits``, and, when heads are requested,
    ``adv`` (B, m_a, n_a) and ``coords`` (B, 2, m_b, n_b).  With
    ``gradient_reversal`` the backbone receives the negated adversarial
    gradient (min-max training); the head's own gradient is unchanged.
    """

    def __init__(self, backbone, adv_head, rest_head, tap_u, tap_v, gradient_reversal=False):
        super().__init__()
        self.backbone = backbone
        self.adv_head = adv_head
        self.rest_head = rest_head
        self.tap_u = tap_u
        self.tap_v = tap_v
        self.gradient_reversal = gradient_reversal

    def forward(self, x, heads=True):
        logits, feats = self.backbone(x)
        out = {"logits": logits}
        if heads:
            fu = feats[self.tap_u]
            if self.gradient_reversal:
                fu = grad_reverse(fu)
            out["adv"] = self.adv_head(fu)
            out["coords"] = self.rest_head(feats[self.tap_v])
        return out

    def parameter_groups(self):
        return {"theta": list(self.backbone.parameters()),
                "psi": list(self.adv_head.parameters()),
                "phi": list(self.rest_head.parameters())}


def build_model(backbone, s_intra, s_inter, input_side, in_channels=3, tap_u=None,
                tap_v=None, gradient_reversal=False, zero_init_heads=False):
    """Attach heads sized for ``input_side`` square inputs.

    Tap shapes are probed with one dummy forward; misaligned channel counts
    raise :class:`ConfigurationError` here rather than during training.
    """
    if isinstance(backbone, str):
        backbone = build_backbone(backbone)
    if input_side % s_intra or input_side % s_inter:
        raise ConfigurationError(
            f"input side {input_side} not divisible by block sizes {s_intra}, {s_inter}")
    u, v = select_taps(backbone, s_intra, s_inter, tap_u, tap_v)
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        _, feats = backbone(torch.zeros(1, in_channels, input_side, input_side))
    backbone.train(was_training)
    fu, fv = feats[u], feats[v]
    ga = (input_side // s_intra,) * 2
    gb = (input_side // s_inter,) * 2
    adv = AdversarialHead(fu.shape[1], tuple(fu.shape[2:]), ga, zero_init_heads)
    rest = RestorationHead(fv.shape[1], tuple(fv.shape[2:]), gb, zero_init_heads)
    return BSLModel(backbone, adv, rest, u, v, gradient_reversal)


def decode_coords(coords):
    """Normalized (..., 2, m, n) coordinates -> integer (..., m, n, 2) positions."""
    c = coords.detach().cpu().numpy() if torch.is_tensor(coords) else np.asarray(coords)
    m, n = c.shape[-2:]
    out = np.zeros(c.shape[:-3] + (m, n, 2), dtype=np.int64)
    for axis, size in ((0, m), (1, n)):
        if size > 1:
            idx = np.rint((c[..., axis, :, :] + 1.0) * 0.5 * (size - 1))
            out[..., axis] = np.clip(idx, 0, size - 1)
    return out
