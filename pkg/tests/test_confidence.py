import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from locverify.confidence import (
    ACCEPT,
    LOWER_FWD,
    LOWER_REV,
    REJECT,
    UPPER_FWD,
    confidence_score,
    confidence_scores,
    decide,
    describe_flags,
    pair_flags,
    pair_within_bounds,
)
from locverify.constants import MAX_SPEED
from locverify.netgen import MeasurementSet


def test_too_fast_fails_upper(model):
    ok, tags = pair_within_bounds(1000 / (MAX_SPEED * 1.01), model.time(1000.0), 1000.0, model)
    assert not ok and tags == ["fwd:upper"]


def test_model_speed_passes(model):
    for d in (15.0, 200.0, 1500.0, 6000.0):
        t = float(model.time(d))
        assert pair_within_bounds(t, t, d, model) == (True, [])


def test_single_slow_direction_fails(model):
    t = float(model.time(800.0))
    flags = int(pair_flags(t, 10 * t, 800.0, model))
    assert flags == LOWER_REV
    assert describe_flags(LOWER_FWD | UPPER_FWD) == ["fwd:lower", "fwd:upper"]


def test_bound_validation(model):
    with pytest.raises(ValueError):
        pair_flags(0.0, 1.0, 10.0, model)
    with pytest.raises(ValueError):
        pair_flags(1.0, 1.0, -1.0, model)


def _star(n_refs, n_pass, model):
    """Node 0 with ``n_refs`` references at 500 km; the first ``n_pass`` pairs are consistent."""
    t = float(model.time(500.0))
    pairs = np.column_stack([np.zeros(n_refs, int), np.arange(1, n_refs + 1)])
    fwd = np.full(n_refs, t)
    fwd[n_pass:] = 50 * t
    ms = MeasurementSet(n_refs + 1, pairs, fwd, np.full(n_refs, t), np.zeros(n_refs), np.zeros(n_refs))
    claimed = np.zeros((n_refs + 1, 2))
    # references on a ring at 500 km (4.4966 degrees of arc)
    ang = np.linspace(0, 2 * np.pi, n_refs, endpoint=False)
    arc = 500.0 / 6371.0088
    claimed[1:, 0] = np.degrees(np.arcsin(np.sin(arc) * np.cos(ang)))
    claimed[1:, 1] = np.degrees(np.arctan2(np.sin(arc) * np.sin(ang), np.cos(arc)))
    return ms, claimed


@pytest.mark.parametrize("n_pass,want", [(80, 1.0), (40, 0.5), (0, 0.0)])
def test_score_ratios(model, n_pass, want):
    ms, claimed = _star(80, n_pass, model)
    res = confidence_score(0, ms, claimed, model)
    assert res.score == want
    assert res.n_pass == n_pass and res.n_fail_lower == 80 - n_pass and res.n_fail_upper == 0
    assert confidence_scores(ms, claimed, model)[0] == want


def test_node_without_references(model):
    ms, claimed = _star(3, 3, model)
    ms = MeasurementSet(5, ms.pairs, ms.fwd, ms.rev, ms.ann_fwd, ms.ann_rev)
    with pytest.raises(ValueError):
        confidence_score(4, ms, np.vstack([claimed, [[0, 0]]]), model)


@pytest.mark.parametrize("score,thr,want", [(0.19, 0.2, REJECT), (0.20, 0.2, ACCEPT), (0.0, 0.0, ACCEPT), (1.0, 1.0, ACCEPT)])
def test_decide(score, thr, want):
    assert decide(score, thr) == want


def test_decide_rational_boundary():
    assert decide(16 / 80, 0.2) == ACCEPT
    assert decide(15 / 80, 0.2) == REJECT


@pytest.mark.parametrize("bad", [(-0.1, 0.2), (1.1, 0.2), (0.5, 1.5)])
def test_decide_domain(bad):
    with pytest.raises(ValueError):
        decide(*bad)


@given(
    st.floats(1.0, 9000.0),
    st.floats(0.05, 500.0),
    st.floats(0.05, 500.0),
    st.floats(0.0, 0.5),
    st.floats(0.0, 0.5),
)
def test_raising_tolerance_never_fails_a_pass(d, f, r, t1, t2):
    from locverify.propagation import load_default_model

    m = load_default_model()
    lo, hi = sorted((t1, t2))
    assert (int(pair_flags(f, r, d, m, hi)) & ~int(pair_flags(f, r, d, m, lo))) == 0


def test_scores_are_rationals_in_unit_interval(small_world, model):
    net, sched, ms = small_world
    s = confidence_scores(ms, net.claimed_coords(), model)
    assert np.all((s >= 0) & (s <= 1))
    k = s * sched.sizes()
    assert np.allclose(k, np.round(k))


def test_one_violation_costs_both_ends_one_pair(small_world, model):
    net, sched, ms = small_world
    claimed = net.claimed_coords()
    before = confidence_scores(ms, claimed, model)
    flags = pair_flags(ms.fwd, ms.rev, *_dist(ms, claimed), model)
    k = int(np.flatnonzero(flags == 0)[0])
    a, b = ms.pairs[k]
    bad = ms.copy_with()
    bad.fwd[k] = 1e-3
    after = confidence_scores(bad, claimed, model)
    sizes = sched.sizes()
    assert (before[a] - after[a]) * sizes[a] == pytest.approx(1)
    assert (before[b] - after[b]) * sizes[b] == pytest.approx(1)
    others = np.setdiff1d(np.arange(net.n), [a, b])
    assert np.array_equal(before[others], after[others])
    assert confidence_score(int(a), bad, claimed, model).n_fail_upper == 1


def _dist(ms, c):
    from locverify.geo import haversine

    a, b = ms.pairs[:, 0], ms.pairs[:, 1]
    return (haversine(c[a, 0], c[a, 1], c[b, 0], c[b, 1]),)


def test_corrupting_k_pairs_bounds_drop(small_world, model, rng):
    net, sched, ms = small_world
    claimed = net.claimed_coords()
    before = confidence_scores(ms, claimed, model)
    node = 42
    mine = np.flatnonzero((ms.pairs == node).any(axis=1))
    for k in (1, 3, 7):
        hit = rng.choice(mine, k, replace=False)
        bad = ms.copy_with()
        bad.rev[hit] = bad.rev[hit] * 40
        after = confidence_scores(bad, claimed, model)
        assert 0 <= before[node] - after[node] <= k / sched.sizes()[node] + 1e-12
