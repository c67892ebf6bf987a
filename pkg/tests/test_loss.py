import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cosal.errors import ContractError, ShapeError
from cosal.loss import group_loss, soft_iou, total_loss

maps = arrays(np.float64, (6, 6), elements=st.floats(0, 1))
binary = arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0]))


@given(binary)
def test_identical_binary_maps_have_zero_loss(g):
    assert soft_iou(g, g) == 0.0


@given(maps, maps)
@settings(max_examples=300)
def test_loss_is_bounded_and_symmetric(s, g):
    a, b = soft_iou(s, g), soft_iou(g, s)
    assert 0.0 <= a <= 1.0
    assert a == b


def test_disjoint_maps_have_unit_loss():
    s = np.zeros((4, 4))
    g = np.zeros((4, 4))
    s[:2] = 1
    g[2:] = 1
    assert soft_iou(s, g) == 1.0


def test_matches_direct_formula(rng):
    s, g = rng.random((5, 7)), (rng.random((5, 7)) > 0.5).astype(float)
    expected = 1 - (s * g).sum() / (s + g - s * g).sum()
    assert soft_iou(s, g) == pytest.approx(expected, rel=1e-12)


def test_both_empty_is_flagged_zero():
    z = np.zeros((3, 3))
    loss, flag = soft_iou(z, z, return_flag=True)
    assert loss == 0.0 and flag
    loss, flag = soft_iou(np.ones((3, 3)), z, return_flag=True)
    assert loss == 1.0 and not flag


def test_batched_flags():
    s = torch.zeros(2, 1, 3, 3)
    g = torch.zeros(2, 1, 3, 3)
    g[1, 0, 0, 0] = 1
    loss, flag = soft_iou(s, g, return_flag=True)
    assert flag.tolist() == [[True], [False]]
    assert loss.tolist() == [[0.0], [1.0]]


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        soft_iou(np.zeros((3, 3)), np.zeros((3, 4)))


def finite_difference_gradient_error(seed, step=1e-6):
    g = torch.Generator().manual_seed(seed)
    s = torch.rand(8, 8, generator=g, dtype=torch.float64) * 0.9 + 0.05
    m = (torch.rand(8, 8, generator=g, dtype=torch.float64) > 0.5).double()
    x = s.clone().requires_grad_(True)
    soft_iou(x, m).backward()
    analytic = x.grad
    numeric = torch.zeros_like(s)
    for idx in np.ndindex(8, 8):
        plus, minus = s.clone(), s.clone()
        plus[idx] += step
        minus[idx] -= step
        numeric[idx] = (soft_iou(plus, m) - soft_iou(minus, m)) / (2 * step)
    return float(((analytic - numeric).abs() / numeric.abs().clamp_min(1e-8)).max())


def test_gradient_matches_finite_differences():
    for seed in range(3):
        assert finite_difference_gradient_error(seed) <= 1e-4


def test_total_loss_is_a_plain_double_sum(rng):
    masks = [(rng.random((8, 8)) > 0.5).astype(np.float32) for _ in range(2)]
    levels = [[torch.rand(8 >> k, 8 >> k) for k in range(4)] for _ in range(2)]
    total = total_loss(levels, [torch.from_numpy(m) for m in masks])
    expected = 0.0
    for maps, m in zip(levels, masks):
        for s in maps:
            up = torch.nn.functional.interpolate(s[None, None], size=(8, 8), mode="bilinear", align_corners=False)
            expected += soft_iou(up[0, 0].double().numpy(), m.astype(np.float64))
    assert float(total) == pytest.approx(expected, rel=1e-5)


def test_total_loss_requires_four_levels():
    g = torch.ones(4, 4)
    for n in (3, 5):
        with pytest.raises(ContractError):
            total_loss([[torch.rand(4, 4)] * n], [g])
    with pytest.raises(ContractError):
        total_loss([[torch.rand(4, 4)] * 4], [g, g])


def test_group_loss_skips_the_top_map_and_matches_total():
    torch.manual_seed(0)
    masks = (torch.rand(3, 1, 16, 16) > 0.5).float()
    decoder_maps = [torch.rand(3, 1, 16 >> k, 16 >> k) for k in (4, 3, 2, 1)] + [torch.rand(3, 1, 16, 16)]
    batched = group_loss(decoder_maps, masks)
    per_image = total_loss([[m[i, 0] for m in decoder_maps[1:]] for i in range(3)], [masks[i, 0] for i in range(3)])
    torch.testing.assert_close(batched, per_image)
    changed = [torch.zeros_like(decoder_maps[0])] + decoder_maps[1:]
    torch.testing.assert_close(group_loss(changed, masks), batched)
    with pytest.raises(ContractError):
        group_loss(decoder_maps[1:], masks)
