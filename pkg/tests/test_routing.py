import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_ids, random_params, tiny
from cotformer import routing
from cotformer.adaptive import adaptive_forward, calibrate_capacities
from cotformer.autodiff import cross_entropy, finite_diff_check, reverse_grad
from cotformer.decode import incremental_decode
from cotformer.model import init_params, run
from cotformer.routing import (
    capacity_count,
    copy_forward_keys,
    interpolate_update,
    router_score,
    sample_capacities,
    select_top_k,
    validate_schedule,
)


def test_router_score_examples():
    x = torch.tensor([0.3, -2.0, 1.5])
    assert router_score(torch.zeros(3), x).item() == 0.5
    e = torch.tensor([1.0, 0.0, 0.0])
    assert router_score(e, torch.tensor([1.0, 5.0, 5.0])).item() == pytest.approx(0.7311, abs=1e-4)
    e = torch.tensor([0.2, 0.7, -0.4])
    assert (router_score(e, x) + router_score(-e, x)).item() == pytest.approx(1.0, abs=1e-7)
    with pytest.raises(ValueError):
        router_score(torch.zeros(2), x)


def test_sample_capacities_shape_and_order():
    rng = np.random.default_rng(0)
    assert sample_capacities(1, rng) == [1.0]
    for _ in range(200):
        c = sample_capacities(5, rng)
        assert c[0] == 1.0 and all(a >= b for a, b in zip(c, c[1:]))
        validate_schedule(c, 5)


def test_sample_capacities_order_statistics():
    rng = np.random.default_rng(42)
    draws = np.array([sample_capacities(3, rng) for _ in range(100_000)])
    assert np.all(draws[:, 0] == 1.0)
    assert np.all(np.diff(draws, axis=1) <= 0)
    assert abs(draws[:, 1].mean() - 2 / 3) < 0.01
    assert abs(draws[:, 2].mean() - 1 / 3) < 0.01


def test_validate_schedule_errors():
    for bad in ([0.9, 0.5], [1.0, 0.5, 0.7], [1.0, 1.5], [1.0]):
        with pytest.raises(ValueError):
            validate_schedule(bad, 2 if len(bad) != 3 else 3)


def test_select_top_k_examples():
    elig = torch.arange(4)[None]
    idx, _ = select_top_k(torch.tensor([[0.1, 0.9, 0.5, 0.7]]), elig, 0.5, 4)
    assert idx.tolist() == [[1, 3]]
    idx, _ = select_top_k(torch.tensor([[0.1, 0.9, 0.5, 0.7]]), elig, 1.0, 4)
    assert idx.tolist() == [[0, 1, 2, 3]]
    idx, s = select_top_k(torch.full((1, 4), 0.5), elig, 0.5, 4)
    assert idx.tolist() == [[0, 1]] and s.tolist() == [[0.5, 0.5]]
    # k uses the full length, capped by eligibility
    idx, _ = select_top_k(torch.tensor([[0.2, 0.4]]), torch.tensor([[2, 5]]), 0.75, 8)
    assert idx.tolist() == [[2, 5]]
    assert capacity_count(0.3, 10) == 3 and capacity_count(0.29, 10) == 2


def test_interpolate_update_examples():
    a, b = torch.tensor([0.0, 2.0]), torch.tensor([2.0, 0.0])
    assert torch.equal(interpolate_update(a, b, 0.5), torch.tensor([1.0, 1.0]))
    assert torch.equal(interpolate_update(a, b, 0.0), a)
    assert torch.equal(interpolate_update(a, b, 1.0), b)


def test_copy_forward_keys():
    full = torch.ones(3, 4, dtype=torch.bool)
    assert torch.equal(copy_forward_keys(full), torch.arange(1, 4).view(3, 1).expand(3, 4))
    part = torch.tensor([[1, 1], [0, 1], [0, 1]], dtype=torch.bool)
    src = copy_forward_keys(part)
    assert src[:, 0].tolist() == [1, 1, 1]
    assert src[:, 1].tolist() == [1, 2, 3]


def test_cotformer_never_uses_copy_forward(monkeypatch):
    calls = []
    real = routing.copy_forward_keys
    monkeypatch.setattr(routing, "copy_forward_keys", lambda p: calls.append(1) or real(p))
    cfg = tiny(adaptive=True)
    params = random_params(cfg, 0)
    run(cfg, params, random_ids(cfg, 6), schedule=[1.0, 0.5, 0.2])
    assert calls == []
    run(cfg.replace(variant="block_universal"), params, random_ids(cfg, 6), schedule=[1.0, 0.5, 0.2])
    assert calls


# -- adaptive forward ----------------------------------------------------------


ADAPTIVE = [
    dict(variant="cotformer"),
    dict(variant="cotformer", self_history=False),
    dict(variant="block_universal"),
]


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(range(len(ADAPTIVE))),
    st.integers(1, 9),
    st.integers(1, 4),
    st.integers(0, 2**31 - 1),
)
def test_adaptive_invariants(which, S, R, seed):
    cfg = tiny(n_repeat=R, adaptive=True, ln_per_repeat=True, n_end=1, **ADAPTIVE[which])
    params = random_params(cfg, seed % 1000)
    rng = np.random.default_rng(seed)
    schedule = sample_capacities(R, rng)
    res = adaptive_forward(cfg, params, random_ids(cfg, S, seed, batch=2), schedule)
    part = res.state.participation
    assert part[:, 0].all()
    assert not (part[:, 1:] & ~part[:, :-1]).any()
    prev = S
    for r in range(1, R + 1):
        expect = S if r == 1 else min(capacity_count(schedule[r - 1], S), prev)
        assert (part[:, r - 1].sum(-1) == expect).all()
        if r > 1 and r not in res.decision.selected:
            assert prev == 0  # nothing left to route
        elif r > 1:
            sel = set(res.decision.selected[r][0].tolist())
            elig = set(res.decision.eligible[r][0].tolist())
            assert sel <= elig and len(sel) == min(capacity_count(schedule[r - 1], S), len(elig))
        prev = expect
    # tokens outside a pass keep their previous state bit for bit
    for r in range(2, R + 1):
        off = ~part[:, r - 1]
        assert torch.equal(res.state.states[r][off], res.state.states[r - 1][off])


def test_adaptive_all_ones_equals_ungated_interpolated_forward():
    cfg = tiny(adaptive=True, depth_embedding=True)
    params = random_params(cfg, 3)
    ids = random_ids(cfg, 7, 3)
    gated = adaptive_forward(cfg, params, ids, [1.0, 1.0, 1.0])
    assert gated.state.participation.all()
    assert torch.equal(gated.logits, run(cfg, params, ids).logits)


def test_adaptive_single_pass_ignores_halt_embeddings():
    cfg = tiny(adaptive=True)
    params = random_params(cfg, 1)
    ids = random_ids(cfg, 6, 1)
    a = adaptive_forward(cfg, params, ids, [1.0, 0.0, 0.0])
    params["router.halt"] = torch.randn_like(params["router.halt"])
    b = adaptive_forward(cfg, params, ids, [1.0, 0.0, 0.0])
    assert torch.equal(a.logits, b.logits)
    assert a.state.participation[:, 1:].sum() == 0


def pinned_scores(cfg, seed, logit):
    """Params whose router logit is about ``logit`` for every token.

    The per-repeat LN output is dominated by a constant bias, so every stored
    state points the same way.
    """
    params = random_params(cfg, seed)
    d = cfg.d_model
    params["repeat_ln.weight"] = params["repeat_ln.weight"] * 0.01
    params["repeat_ln.bias"] = torch.full((d,), 10.0) + 0.01 * params["repeat_ln.bias"]
    params["router.halt"] = torch.full((cfg.n_repeat - 1, d), logit / (10.0 * d))
    return params


def test_zero_score_leaves_state_bit_identical():
    cfg = tiny(adaptive=True, ln_per_repeat=True, depth_embedding=True)
    params = pinned_scores(cfg, 2, -1e4)
    ids = random_ids(cfg, 6, 2, batch=2)
    res = run(cfg, params, ids, schedule=[1.0, 1.0, 1.0])
    assert (res.decision.scores[2] == 0).all()
    assert res.state.participation.all()
    for r in (2, 3):
        assert torch.equal(res.state.states[r], res.state.states[1])
    x, y = torch.randn(4, 16), torch.randn(4, 16)
    assert torch.equal(interpolate_update(x, y, torch.zeros(4, 1)), x)


def test_adaptive_matches_decoder_with_forced_participation():
    cfg = tiny(adaptive=True, n_begin=1, n_end=1, ln_per_repeat=True, depth_embedding=True)
    for variant in ("cotformer", "block_universal"):
        c = cfg.replace(variant=variant)
        params = random_params(c, 5)
        ids = random_ids(c, 8, 5)
        res = adaptive_forward(c, params, ids, [1.0, 0.6, 0.3])
        part = res.state.participation[0].numpy()
        ref = incremental_decode(c, params, ids, participation=part)
        assert (res.logits - ref.logits).abs().max() < 1e-5


def test_router_gradient_is_live_and_correct():
    cfg = tiny(adaptive=True, d_model=8, n_middle=1, vocab_size=16)
    params = random_params(cfg, 4, dtype=torch.float64)
    ids = torch.as_tensor(random_ids(cfg, 6, 4))
    tgt = torch.as_tensor(random_ids(cfg, 6, 5))
    e = params["router.halt"].clone().requires_grad_(True)

    def loss(leaves):
        p = dict(params, **{"router.halt": leaves[0]})
        return cross_entropy(run(cfg, p, ids, schedule=[1.0, 0.5, 0.34]).logits, tgt)

    (g,) = reverse_grad(loss([e]), [e])
    assert (g.abs().sum(-1) > 0).all()
    assert finite_diff_check(loss, [params["router.halt"]], eps=1e-6) < 1e-4


@pytest.mark.parametrize("variant", ["cotformer", "block_universal"])
def test_capacity_increase_with_small_scores_moves_logits_by_order_s(variant):
    cfg = tiny(variant=variant, adaptive=True, n_repeat=2, ln_per_repeat=True)
    params = pinned_scores(cfg, 6, -6.0)
    ids = random_ids(cfg, 8, 6)
    lo = run(cfg, params, ids, schedule=[1.0, 0.25])
    hi = run(cfg, params, ids, schedule=[1.0, 0.5])
    s = lo.decision.scores[2].max().item()
    assert 0 < s < 0.01
    flipped = (hi.state.participation & ~lo.state.participation)[0, 1]
    first = int(torch.nonzero(flipped)[0])
    assert torch.equal(lo.logits[:first], hi.logits[:first])
    assert 0 < (lo.logits - hi.logits).abs().max() < 20 * s


# -- calibration -----------------------------------------------------------------


def calib_setup(variant="cotformer"):
    cfg = tiny(variant=variant, adaptive=True, n_repeat=4, ln_per_repeat=True)
    params = random_params(cfg, 7)
    params["router.halt"] = params["router.halt"] * 0.3
    windows = random_ids(cfg, 8, 7, batch=5)
    return cfg, params, windows


@pytest.mark.parametrize("variant", ["cotformer", "block_universal"])
def test_calibration_extremes(variant):
    cfg, params, windows = calib_setup(variant)
    assert calibrate_capacities(cfg, params, windows, 0.0).capacities == [1.0] * 4
    assert calibrate_capacities(cfg, params, windows, 1.0).capacities == [1.0, 0.0, 0.0, 0.0]


@pytest.mark.parametrize("variant", ["cotformer", "block_universal"])
def test_calibration_matches_per_token_simulation(variant):
    cfg, params, windows = calib_setup(variant)
    for tau in (0.3, 0.45, 0.5, 0.55, 0.7):
        cal = calibrate_capacities(cfg, params, windows, tau)
        counts = np.zeros(4, dtype=int)
        for w in windows:
            counts += incremental_decode(cfg, params, w, threshold=tau).participation.sum(1)
        assert cal.entry_counts == counts.tolist()
        ratios = np.minimum.accumulate(counts / counts[0])
        assert cal.capacities == ratios.tolist()


def test_calibration_monotone_in_threshold_and_histogram():
    cfg, params, windows = calib_setup()
    prev = None
    for tau in np.linspace(0, 1, 11):
        cal = calibrate_capacities(cfg, params, windows, float(tau), bins=10)
        c = cal.capacities
        assert c[0] == 1.0 and all(0 <= v <= 1 for v in c) and all(a >= b for a, b in zip(c, c[1:]))
        if prev is not None:
            assert all(a <= b for a, b in zip(c, prev))
        prev = c
        assert sum(cal.bin_counts) == cal.n_tokens == windows.size
        rec = cal.to_record()
        assert set(rec) >= {"threshold", "capacities", "histogram"}


def test_calibration_errors():
    cfg, params, windows = calib_setup()
    with pytest.raises(ValueError):
        calibrate_capacities(cfg, params, [], 0.5)
    with pytest.raises(ValueError):
        calibrate_capacities(cfg, params, windows, 1.5)
    plain = cfg.replace(adaptive=False)
    with pytest.raises(ValueError):
        calibrate_capacities(plain, init_params(plain), windows, 0.5)
