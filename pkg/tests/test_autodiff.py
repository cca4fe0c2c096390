import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cotformer.autodiff import (
    OptimizerState,
    adamw_step,
    clip_grad_norm,
    count_macs,
    cross_entropy,
    finite_diff_check,
    gelu,
    layer_norm,
    matmul,
    reverse_grad,
    sigmoid,
    softmax_rows,
)

f64 = torch.float64


def t(x):
    return torch.tensor(x, dtype=f64)


# -- matmul ------------------------------------------------------------------


def test_matmul_examples():
    assert torch.equal(matmul(torch.eye(2, dtype=f64), t([[1, 2], [3, 4]])), t([[1, 2], [3, 4]]))
    assert torch.equal(matmul(t([[2]]), t([[3]])), t([[6]]))
    assert torch.equal(matmul(t([[1, 2], [3, 4]]), t([[5, 6], [7, 8]])), t([[19, 22], [43, 50]]))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ValueError):
        matmul(torch.ones(3), torch.ones(3, 1))


def test_mac_counter_counts_batched_products():
    a, b = torch.ones(4, 2, 3, 5), torch.ones(5, 7)
    with count_macs() as c:
        matmul(a, b)
        matmul(torch.ones(1, 1), torch.ones(1, 1))
    assert c.total == 4 * 2 * 3 * 5 * 7 + 1
    with count_macs() as outer:
        with count_macs() as inner:
            matmul(a, b)
        matmul(a, b)
    assert inner.total == 840 and outer.total == 1680


# -- layer norm / softmax ----------------------------------------------------


def test_layer_norm_examples():
    ones, zeros = torch.ones(4, dtype=f64), torch.zeros(4, dtype=f64)
    assert torch.equal(layer_norm(torch.full((4,), 3.0, dtype=f64), ones, zeros), zeros)
    out = layer_norm(t([1.0, -1.0]), torch.ones(2, dtype=f64), torch.zeros(2, dtype=f64), eps=1e-12)
    assert torch.allclose(out, t([1.0, -1.0]), atol=1e-9)
    bias = t([0.5, -2.0, 1.0, 3.0])
    assert torch.equal(layer_norm(t([1.0, 5.0, -2.0, 0.0]), zeros, bias), bias)
    with pytest.raises(ValueError):
        layer_norm(t([1.0, 2.0]), ones, zeros)


def test_softmax_examples():
    assert torch.allclose(softmax_rows(t([0.0, 0.0])), t([0.5, 0.5]))
    assert torch.allclose(softmax_rows(t([1.0, 2.0])), t([0.2689, 0.7311]), atol=1e-4)
    w = softmax_rows(t([[3.0, 100.0]]), allowed=torch.tensor([[True, False]]))
    assert torch.equal(w, t([[1.0, 0.0]]))


def test_masked_logit_gets_zero_gradient():
    x = t([[0.3, 7.0, -1.0]]).requires_grad_(True)
    w = softmax_rows(x, allowed=torch.tensor([[True, False, True]]))
    (g,) = reverse_grad((w * t([[1.0, 2.0, 3.0]])).sum(), [x])
    assert g[0, 1] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_and_layer_norm_properties(seed):
    g = torch.Generator().manual_seed(seed)
    x = (torch.rand(5, 9, generator=g, dtype=f64) - 0.5) * 2e3
    w = softmax_rows(x)
    assert torch.isfinite(w).all() and (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(5, dtype=f64), atol=1e-6)
    y = layer_norm(x, torch.ones(9, dtype=f64), torch.zeros(9, dtype=f64))
    assert y.mean(-1).abs().max() < 1e-6
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-4
    for out in (gelu(x), sigmoid(x)):
        assert torch.isfinite(out).all()


# -- gradients ---------------------------------------------------------------


def test_reverse_grad_examples():
    x = t([1.0, -2.0, 3.0]).requires_grad_(True)
    (g,) = reverse_grad((x * x).sum(), [x])
    assert torch.equal(g, 2 * x.detach())
    a, b = t([1.0, 2.0]).requires_grad_(True), t([5.0, -1.0]).requires_grad_(True)
    ga, gb = reverse_grad((a * b).sum(), [a, b])
    assert torch.equal(ga, b.detach()) and torch.equal(gb, a.detach())


def test_reverse_grad_fan_out_and_unused():
    x = t([2.0]).requires_grad_(True)
    unused = t([1.0]).requires_grad_(True)
    gx, gu = reverse_grad((x * x + 3 * x).sum(), [x, unused])
    assert gx.item() == 7.0 and gu.item() == 0.0


def test_reverse_grad_rejects_non_scalar():
    x = t([1.0, 2.0]).requires_grad_(True)
    with pytest.raises(ValueError):
        reverse_grad(x * 2, [x])


def test_reverse_grad_linear_over_independent_subgraphs():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(3, 3, generator=g, dtype=f64).requires_grad_(True)
    b = torch.randn(4, generator=g, dtype=f64).requires_grad_(True)
    fa = lambda: softmax_rows(a).pow(2).sum()
    fb = lambda: gelu(b).sum()
    joint = reverse_grad(fa() + fb(), [a, b])
    (ga,) = reverse_grad(fa(), [a])
    (gb,) = reverse_grad(fb(), [b])
    assert torch.equal(joint[0], ga) and torch.equal(joint[1], gb)


def test_finite_diff_examples():
    assert finite_diff_check(lambda p: (p[0] ** 2).sum(), [t([3.0])], eps=1e-4) < 1e-8
    assert finite_diff_check(lambda p: p[0].sum() * 0 + 5.0, [t([1.0, 2.0])]) == 0.0
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: p[0].sum(), [torch.ones(2)])


def _primitive_losses(g):
    w = torch.randn(4, 6, generator=g, dtype=f64)
    tgt = torch.randint(0, 6, (4,), generator=g)
    mask = torch.rand(4, 6, generator=g) > 0.3
    mask[:, 0] = True
    return {
        "matmul": (lambda p: (matmul(p[0], p[1]) * w).sum(), [(4, 5), (5, 6)]),
        "layer_norm": (lambda p: (layer_norm(p[0], p[1], p[2]) * w).sum(), [(4, 6), (6,), (6,)]),
        "softmax": (lambda p: (softmax_rows(p[0], mask) * w).sum(), [(4, 6)]),
        "gelu": (lambda p: (gelu(p[0]) * w).sum(), [(4, 6)]),
        "sigmoid": (lambda p: (sigmoid(p[0]) * w).sum(), [(4, 6)]),
        "cross_entropy": (lambda p: cross_entropy(p[0], tgt), [(4, 6)]),
    }


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_primitive_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    for name, (f, shapes) in _primitive_losses(g).items():
        params = [torch.randn(s, generator=g, dtype=f64) for s in shapes]
        err = finite_diff_check(f, params, eps=1e-6)
        assert err < 1e-4, (name, err)


# -- optimizer ---------------------------------------------------------------


def test_adamw_first_step_closed_form():
    p = [t([1.0, -2.0, 0.5])]
    g = [t([0.3, -4.0, 1e-3])]
    new, state = adamw_step(p, g, OptimizerState.zeros_like(p), lr=0.1, eps=1e-8)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expected = p[0] - 0.1 * g[0] / (g[0].abs() + 1e-8)
    assert torch.allclose(new[0], expected, rtol=0, atol=1e-12)
    assert state.step == 1


def test_adamw_zero_grad():
    p = [t([1.0, -2.0])]
    z = [torch.zeros(2, dtype=f64)]
    new, _ = adamw_step(p, z, OptimizerState.zeros_like(p), lr=0.1)
    assert torch.equal(new[0], p[0])
    new, _ = adamw_step(p, z, OptimizerState.zeros_like(p), lr=0.1, weight_decay=0.5)
    assert torch.allclose(new[0], p[0] * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_adamw_decay_mask_and_shape_errors():
    p = [t([1.0]), t([1.0])]
    z = [torch.zeros(1, dtype=f64)] * 2
    new, _ = adamw_step(p, z, OptimizerState.zeros_like(p), 0.1, weight_decay=1.0, decay_mask=[True, False])
    assert new[0].item() == pytest.approx(0.9) and new[1].item() == 1.0
    with pytest.raises(ValueError):
        adamw_step(p, [torch.zeros(2, dtype=f64)] * 2, OptimizerState.zeros_like(p), 0.1)
    with pytest.raises(ValueError):
        adamw_step(p, z[:1], OptimizerState.zeros_like(p), 0.1)


def test_adamw_matches_torch_reference():
    g = torch.Generator().manual_seed(3)
    p0 = torch.randn(5, generator=g, dtype=f64)
    ref = torch.nn.Parameter(p0.clone())
    opt = torch.optim.AdamW([ref], lr=0.01, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1)
    mine, state = [p0.clone()], OptimizerState.zeros_like([p0])
    for _ in range(5):
        grad = torch.randn(5, generator=g, dtype=f64)
        ref.grad = grad.clone()
        opt.step()
        mine, state = adamw_step(mine, [grad], state, 0.01, 0.9, 0.95, 1e-8, 0.1)
    assert torch.allclose(mine[0], ref.detach(), atol=1e-12)


def test_clip_grad_norm():
    grads = [t([3.0]), t([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.sqrt(sum(float(c.pow(2).sum()) for c in clipped)) == pytest.approx(1.0, abs=1e-6)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same[0] is grads[0]
