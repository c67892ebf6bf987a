import copy

import numpy as np
import pytest
import torch

from cosal.encoder import BackboneSpec, ConsensusEmbedding, consensus
from cosal.errors import ShapeError
from cosal.gim import channel_weights, compute_similarity, gim, induce_features, induced_gradient

from conftest import fresh_backbone


def finite_difference_check(backbone, n_positions, seed, step=1e-3):
    """Largest relative error of induced_gradient against central differences of c.

    Runs in float64 on a copy of ``backbone``.
    """
    net = copy.deepcopy(backbone).double()
    g = torch.Generator().manual_seed(seed)
    f5 = torch.rand(64, 4, 4, generator=g, dtype=torch.float64) * 2
    e_dag = torch.softmax(torch.randn(net.head(f5[None]).shape[-1], generator=g, dtype=torch.float64), 0)

    def c(x):
        with torch.no_grad():
            return float((net.head(x[None])[0] * e_dag).sum())

    grad = induced_gradient(net, f5, e_dag)
    numel = f5.numel()
    picks = torch.randperm(numel, generator=g)[:n_positions]
    worst = 0.0
    for flat in picks.tolist():
        idx = np.unravel_index(flat, f5.shape)
        plus, minus = f5.clone(), f5.clone()
        plus[idx] += step
        minus[idx] -= step
        fd = max((c(plus) - c(minus)) / (2 * step), 0.0)
        an = float(grad[idx])
        err = abs(an - fd) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, err)
    return worst


def test_induced_gradient_matches_finite_differences_linear_head():
    assert finite_difference_check(fresh_backbone(2), 40, seed=0) <= 1e-3


def test_induced_gradient_matches_finite_differences_hidden_head():
    assert finite_difference_check(fresh_backbone(2, head_hidden=32), 40, seed=1) <= 1e-3


def test_induced_gradient_is_non_negative_and_shaped(toy_backbone):
    f5 = torch.rand(2, 64, 4, 4)
    e_dag = consensus(np.random.default_rng(0).normal(size=(3, 12)))
    g = induced_gradient(toy_backbone, f5, e_dag)
    assert g.shape == f5.shape
    assert (g >= 0).all()
    single = induced_gradient(toy_backbone, f5[1], e_dag)
    torch.testing.assert_close(single, g[1])


def test_induced_gradient_leaves_parameters_untouched(toy_backbone):
    before = [p.clone() for p in toy_backbone.parameters()]
    f5 = torch.rand(64, 4, 4, requires_grad=True)
    induced_gradient(toy_backbone, f5, torch.full((12,), 1 / 12))
    assert all(p.grad is None for p in toy_backbone.parameters())
    assert f5.grad is None
    assert all(torch.equal(a, b) for a, b in zip(before, toy_backbone.parameters()))


def test_induced_gradient_works_under_no_grad(toy_backbone):
    with torch.no_grad():
        g = induced_gradient(toy_backbone, torch.rand(64, 4, 4), torch.full((12,), 1 / 12))
    assert g.abs().sum() > 0


def test_linear_head_gradient_is_spatially_constant():
    net = fresh_backbone(4)
    e = torch.softmax(torch.randn(12), 0)
    g = induced_gradient(net, torch.rand(64, 4, 4), e)
    w = net.classifier[-1].weight
    expected = torch.relu(e @ w / 16)
    torch.testing.assert_close(g, expected[:, None, None].expand(64, 4, 4))


def test_zero_consensus_gives_zero_weights(toy_backbone):
    f5 = torch.rand(64, 4, 4)
    f5_induced, w = gim(toy_backbone, f5, torch.zeros(12))
    assert torch.count_nonzero(w) == 0
    assert torch.count_nonzero(f5_induced) == 0


def test_channel_weights_is_spatial_mean():
    g = torch.rand(5, 3, 7)
    torch.testing.assert_close(channel_weights(g), g.mean(dim=(1, 2)))
    with pytest.raises(ShapeError):
        channel_weights(torch.rand(4))


def test_induce_features_scales_channels():
    f5 = torch.rand(3, 2, 2)
    w = torch.tensor([0.0, 1.0, 2.0])
    out = induce_features(f5, w)
    torch.testing.assert_close(out[0], torch.zeros(2, 2))
    torch.testing.assert_close(out[2], 2 * f5[2])
    with pytest.raises(ShapeError):
        induce_features(f5, torch.ones(4))


def test_gim_weights_carry_no_graph(toy_backbone):
    f5 = torch.rand(1, 64, 4, 4, requires_grad=True)
    f5_induced, w = gim(toy_backbone, f5, torch.full((12,), 1 / 12))
    assert w.grad_fn is None and not w.requires_grad
    f5_induced.sum().backward()
    torch.testing.assert_close(f5.grad, w[..., None, None].expand_as(f5))


def test_compute_similarity():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([0.2, 0.3, 0.5])
    assert compute_similarity(a, b) == pytest.approx(2.3)
    assert compute_similarity(torch.tensor(a), ConsensusEmbedding(b)) == pytest.approx(2.3)
    with pytest.raises(ShapeError):
        compute_similarity(a, np.ones(2))


def test_consensus_dimension_must_match_head(toy_backbone):
    with pytest.raises(ShapeError):
        induced_gradient(toy_backbone, torch.rand(64, 4, 4), torch.ones(5))


def test_hidden_head_spec_round_trips():
    spec = BackboneSpec(head_hidden=32)
    assert spec.to_dict()["head_hidden"] == 32
