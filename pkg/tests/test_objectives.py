import math
from fractions import Fraction

import numpy as np
import pytest
import torch

from bsl.models import TinyNet, build_model
from bsl.objectives import (DivergenceError, LossWeights, compute_losses, loss_adv, loss_cls,
                            loss_loc, loss_total)
from bsl.shuffle import ShuffleConfig, identity_map, image_stream, normalize_coords, shuffle_image

from oracles import central_differences


def test_cls_examples():
    assert float(loss_cls(torch.tensor([0.0]), [1])) == pytest.approx(math.log(2), abs=1e-6)
    assert float(loss_cls(torch.tensor([100.0]), [1])) == pytest.approx(0.0, abs=1e-12)
    logits = torch.tensor([0.3, -1.2, 2.0])
    y = [1, 0, 0]
    per = [float(loss_cls(logits[i:i + 1], [y[i]])) for i in range(3)]
    assert float(loss_cls(logits, y)) == pytest.approx(np.mean(per), rel=1e-6)


def test_cls_two_logit_form():
    # [real, fake] logits with a zero margin reproduce the scalar form
    assert float(loss_cls(torch.tensor([[0.0, 0.0]]), [1])) == pytest.approx(math.log(2), abs=1e-6)
    scalar = float(loss_cls(torch.tensor([1.5]), [0]))
    pair = float(loss_cls(torch.tensor([[0.0, 1.5]]), [0]))
    assert pair == pytest.approx(scalar, rel=1e-6)


def test_cls_non_finite():
    with pytest.raises(DivergenceError, match="step 7"):
        loss_cls(torch.tensor([float("nan")]), [1], step=7)


def test_adv_examples():
    P = torch.tensor(np.random.default_rng(0).integers(0, 2, (2, 14, 14)), dtype=torch.float32)
    assert float(loss_adv(torch.zeros(2, 14, 14), P)) == pytest.approx(math.log(2), abs=1e-6)
    perfect = torch.where(P > 0, 100.0, -100.0)
    assert float(loss_adv(perfect, P)) == pytest.approx(0.0, abs=1e-12)
    assert float(loss_adv(torch.full((1, 4, 4), -100.0), np.zeros((1, 4, 4)))) < 1e-12


def test_adv_supervises_unshuffled_tiles():
    # predicting "shuffled" everywhere is penalised on P = 0 tiles
    assert float(loss_adv(torch.full((1, 4, 4), 100.0), np.zeros((1, 4, 4)))) > 10


def test_adv_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        loss_adv(torch.zeros(1, 4, 4), np.zeros((1, 8, 8)))


def test_loc_examples():
    M = torch.from_numpy(normalize_coords(identity_map(7, 7)))[None]
    assert float(loss_loc(M, M)) == 0.0
    inner = M * 0.4
    assert float(loss_loc(inner + 0.5, inner)) == pytest.approx(0.5, abs=1e-6)
    # closed form: mean over i of |2i/6 - 1|
    expected = sum(abs(Fraction(2 * i, 6) - 1) for i in range(7)) / 7
    assert expected == Fraction(4, 7)
    assert float(loss_loc(torch.zeros_like(M), M)) == pytest.approx(float(expected), abs=1e-6)


def test_loc_shape_mismatch():
    with pytest.raises(ValueError):
        loss_loc(torch.zeros(1, 2, 3, 3), np.zeros((1, 2, 4, 4)))


def test_total_arithmetic():
    b = loss_total(torch.tensor(0.5), torch.tensor(0.2), torch.tensor(0.3), LossWeights(1, 1))
    assert float(b.l_total) == pytest.approx(1.0)
    b0 = loss_total(torch.tensor(0.5), torch.tensor(0.2), torch.tensor(0.3), LossWeights(0, 0))
    assert float(b0.l_total) == float(b0.l_cls)
    assert LossWeights() == LossWeights(1.0, 1.0)


@pytest.mark.parametrize("bad", [-1.0, float("inf"), float("nan")])
def test_weights_validation(bad):
    with pytest.raises(ValueError):
        LossWeights(alpha=bad)


def _toy_problem(seed=0, weights=LossWeights(1.0, 1.0)):
    torch.manual_seed(seed)
    model = build_model(TinyNet(), 4, 8, 16, tap_u="c3").double()
    cfg = ShuffleConfig(4, 8)
    rng = np.random.default_rng(seed)
    outs = [shuffle_image(rng.random((16, 16, 3)), cfg, image_stream(seed, k)) for k in range(4)]
    x = torch.from_numpy(np.stack([o.image for o in outs]).transpose(0, 3, 1, 2)).double()
    P = torch.from_numpy(np.stack([o.mark for o in outs])).double()
    M = torch.from_numpy(np.stack([o.coords.M for o in outs])).double()
    y = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)

    def loss():
        return compute_losses(model(x), y, P, M, weights).l_total

    return model, loss


def test_toy_network_is_small():
    model, _ = _toy_problem()
    assert sum(p.numel() for p in model.parameters()) <= 1000


@pytest.mark.parametrize("group", ["theta", "psi", "phi"])
def test_gradients_match_finite_differences(group):
    model, loss = _toy_problem()
    params = model.parameter_groups()[group]
    model.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params])
    numeric = torch.cat([g.reshape(-1) for g in central_differences(params, loss)])
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-4
    torch.testing.assert_close(analytic, numeric, rtol=1e-4, atol=1e-4 * numeric.abs().max().item())


@pytest.mark.parametrize("alpha, beta", [(0.0, 1.0), (1.0, 0.0), (0.0, 0.0)])
def test_gradient_routing(alpha, beta):
    model, loss = _toy_problem(weights=LossWeights(alpha, beta))
    loss().backward()
    groups = model.parameter_groups()
    psi_zero = all(torch.count_nonzero(p.grad) == 0 for p in groups["psi"])
    phi_zero = all(torch.count_nonzero(p.grad) == 0 for p in groups["phi"])
    assert psi_zero == (alpha == 0)
    assert phi_zero == (beta == 0)
    assert any(torch.count_nonzero(p.grad) > 0 for p in groups["theta"])


def test_backbone_gradient_degenerates_to_classification():
    torch.manual_seed(0)
    model = build_model(TinyNet(), 4, 8, 16, tap_u="c3").double()
    rng = np.random.default_rng(0)
    outs = [shuffle_image(rng.random((16, 16, 3)), ShuffleConfig(4, 8), image_stream(0, k))
            for k in range(4)]
    x = torch.from_numpy(np.stack([o.image for o in outs]).transpose(0, 3, 1, 2))
    P = np.stack([o.mark for o in outs])
    M = np.stack([o.coords.M for o in outs])
    y = torch.tensor([0.0, 1.0, 1.0, 0.0], dtype=torch.float64)
    theta = model.parameter_groups()["theta"]

    compute_losses(model(x), y, P, M, LossWeights(0.0, 0.0)).l_total.backward()
    joint = [p.grad.clone() for p in theta]
    model.zero_grad()
    loss_cls(model.backbone(x)[0], y).backward()
    for a, p in zip(joint, theta):
        torch.testing.assert_close(a, p.grad, rtol=1e-12, atol=1e-15)
