import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmexp.envs import make_task, observe, reset
from xmexp.expmetrics import (
    ExplanationRecord,
    aggregate,
    evaluate_explainer,
    fidelity_suite,
    gaussian_kl,
    gef,
    gef_from_kl,
    model_output_distance,
)
from xmexp.harness.report import records_csv
from xmexp.nn import ARCHITECTURES, Policy, init_params

from oracles import gaussian_kl_loop


@pytest.fixture(scope="module")
def policy():
    arch = ARCHITECTURES["navigation"]
    return Policy(init_params(arch, 3, np.random.default_rng(0)), arch, {"attention_entropy_weight": 0.0})


def obs_batch(count=4, seed=0):
    cfg = make_task("navigation", 3)
    return np.stack([observe(reset(cfg, [seed, k])) for k in range(count)])


def test_distance_examples():
    ls = np.zeros(2)
    mu = np.random.default_rng(0).standard_normal((3, 2))
    assert model_output_distance((mu, ls), (mu, ls)) == 0.0
    assert model_output_distance((mu, ls), (mu + 1, ls)) == pytest.approx(1.0)
    assert model_output_distance((np.zeros((1, 2)), ls), (np.array([[1.0, -1.0]]), ls)) == 1.0
    with pytest.raises(ValueError):
        model_output_distance((np.zeros((2, 2)), ls), (np.zeros((3, 2)), ls))


def test_kl_examples():
    z = np.zeros((1, 1))
    assert gaussian_kl((z, np.zeros(1)), (z, np.zeros(1))) == 0.0
    assert gaussian_kl((z, np.zeros(1)), (z + 1, np.zeros(1))) == 0.5
    half = np.array([math.log(0.5)])
    assert gaussian_kl((z, half), (z + 1, half)) == pytest.approx(4 * 0.5)
    with pytest.raises(ValueError):
        gaussian_kl((z, np.zeros(1)), (z, half))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_kl_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    ls = rng.uniform(-2, 1, 2)
    assert gaussian_kl((a, ls), (b, ls)) == pytest.approx(gaussian_kl_loop(a, b, ls), rel=1e-12)


def test_gef_examples():
    assert gef_from_kl(0.0) == 0.0
    assert gef_from_kl(math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert 0.999 < gef_from_kl(30.0) < 1.0
    assert gef_from_kl(30.0) > gef_from_kl(20.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 700))
def test_gef_range(kl):
    assert 0.0 <= gef_from_kl(kl) < 1.0 or kl > 36


def test_identity_and_empty_masks(policy):
    obs = obs_batch()[0]
    fp, fm, fd = fidelity_suite(policy, obs, np.ones((3, 3)))
    assert fm == 0.0 and fd == fp
    blackout = model_output_distance(policy.head(obs), policy.head(obs, np.zeros((3, 3))))
    assert fp == blackout
    fp0, fm0, fd0 = fidelity_suite(policy, obs, np.zeros((3, 3)))
    assert fp0 == 0.0 and fd0 == -fm0
    assert gef(policy, obs, np.ones((3, 3))) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_complement_swap(seed):
    arch = ARCHITECTURES["navigation"]
    pol = Policy(init_params(arch, 3, np.random.default_rng(seed % 7)), arch)
    rng = np.random.default_rng(seed)
    obs = obs_batch(1, seed)[0]
    # dyadic masks: 1 - (1 - m) == m exactly
    m = rng.integers(0, 9, size=(3, 3)) / 8.0
    a = fidelity_suite(pol, obs, m)
    b = fidelity_suite(pol, obs, 1.0 - m)
    assert a[0] == b[1] and a[1] == b[0]
    m = rng.random((3, 3))
    a = fidelity_suite(pol, obs, m)
    b = fidelity_suite(pol, obs, 1.0 - m)
    assert a[0] == pytest.approx(b[1], abs=1e-12) and a[1] == pytest.approx(b[0], abs=1e-12)


def test_batched_metrics_match_single(policy):
    obs = obs_batch(3)
    masks = np.random.default_rng(1).random((3, 3, 3))
    fp, fm, _ = fidelity_suite(policy, obs, masks)
    g = gef(policy, obs, masks)
    for t in range(3):
        s = fidelity_suite(policy, obs[t], masks[t])
        assert fp[t] == pytest.approx(s[0], abs=1e-14) and fm[t] == pytest.approx(s[1], abs=1e-14)
        assert g[t] == pytest.approx(gef(policy, obs[t], masks[t]), abs=1e-14)


def _ones(policy, obs):
    return np.ones(obs.shape[:-2] + (obs.shape[-2],) * 2)


def test_evaluate_identity_explainer(policy):
    env = make_task("navigation", 3, max_steps=30)
    res = evaluate_explainer(policy, env, _ones, episodes=2, seed=0)
    assert len(res.records) == 60 and not res.failures
    assert abs(res.aggregate["fid_minus"]["mean"]) <= 1e-9 and abs(res.aggregate["gef"]["mean"]) <= 1e-9
    for r in res.records:
        assert r.fid_delta == r.fid_plus - r.fid_minus and 0 <= r.gef < 1 and r.fid_plus >= 0


def test_evaluate_record_bound_and_determinism(policy):
    env = make_task("navigation", 3, max_steps=25)
    a = evaluate_explainer(policy, env, "attention", episodes=3, seed=2)
    b = evaluate_explainer(policy, env, "attention", episodes=3, seed=2)
    assert len(a.records) <= 3 * 25
    assert records_csv(a.records) == records_csv(b.records)


def test_evaluate_counts_failures(policy):
    env = make_task("navigation", 3, max_steps=10)

    def flaky(pol, obs):
        if obs.ndim == 3:
            raise RuntimeError("batch unsupported")
        if obs[0, 0] > 0:
            raise RuntimeError("refuse")
        return np.ones((3, 3))

    res = evaluate_explainer(policy, env, flaky, episodes=3, seed=0)
    assert len(res.failures) + len(res.records) == 30
    assert res.aggregate["failures"] == len(res.failures)


def test_unknown_explainer(policy):
    with pytest.raises(ValueError):
        evaluate_explainer(policy, make_task("navigation", 3), "lime", episodes=1)


def _rec(v, k):
    return ExplanationRecord("navigation", 3, False, "x", 0, k, v, v / 2, v - v / 2, v / 10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=20), st.lists(st.floats(0, 5), min_size=1, max_size=20))
def test_aggregate_mean_linearity(xs, ys):
    a = [_rec(v, k) for k, v in enumerate(xs)]
    b = [_rec(v, k) for k, v in enumerate(ys)]
    whole = aggregate(a + b)["fid_plus"]["mean"]
    parts = (aggregate(a)["fid_plus"]["mean"] * len(a) + aggregate(b)["fid_plus"]["mean"] * len(b)) / (len(a) + len(b))
    assert whole == pytest.approx(parts, abs=1e-12)
