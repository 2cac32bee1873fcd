import hashlib

import numpy as np
import pytest

from xmexp.envs import make_task, observe, reset
from xmexp.explainers import (
    EdgeMask,
    ExplainerConfig,
    ExplainerError,
    explain_attention,
    explain_gnnexplainer,
    explain_graphmask,
    gnnexplainer_fit,
    graphmask_fit,
)
from xmexp.expmetrics import gaussian_kl
from xmexp.nn import ARCHITECTURES, Policy, init_params


def make_policy(task="navigation", seed=0, n=3):
    arch = ARCHITECTURES[task]
    return Policy(init_params(arch, n, np.random.default_rng(seed)), arch)


def states(task="navigation", n=3, count=5, seed=0):
    cfg = make_task(task, n)
    return np.stack([observe(reset(cfg, [seed, k])) for k in range(count)])


def param_hash(policy):
    h = hashlib.sha256()
    for k in sorted(policy.params):
        h.update(policy.params[k].tobytes())
    return h.hexdigest()


def test_config_defaults_and_validation():
    cfg = ExplainerConfig()
    assert (cfg.graphmask_beta, cfg.gnnexplainer_steps, cfg.gnnexplainer_lr) == (0.01, 200, 0.05)
    assert (cfg.gnnexplainer_size_weight, cfg.gnnexplainer_entropy_weight) == (0.005, 0.1)
    with pytest.raises(ValueError):
        ExplainerConfig(graphmask_beta=0.0)
    with pytest.raises(ValueError):
        ExplainerConfig(gnnexplainer_size_weight=-1)


def test_edge_mask_invariants():
    with pytest.raises(ExplainerError):
        EdgeMask(np.full((2, 2), 0.5), "hard", "graphmask")
    with pytest.raises(ExplainerError):
        EdgeMask(np.array([[np.nan]]), "soft", "attention")


def test_attention_uniform_for_identical_nodes():
    pol = make_policy()
    m = explain_attention(pol, np.tile(np.arange(6.0), (3, 1)))
    np.testing.assert_allclose(m.values, 1 / 3, atol=1e-15)


def test_attention_rows_and_passthrough():
    pol = make_policy()
    obs = states()[0]
    m = explain_attention(pol, obs)
    np.testing.assert_allclose(m.values.sum(axis=1), 1, atol=1e-9)
    np.testing.assert_array_equal(m.values, pol.forward(obs)[1].attention.data)
    assert m.kind == "soft" and m.source == "attention"


def test_gnnexplainer_identity_objective_zero():
    # with no regularizers the KL term vanishes at m == 1
    pol = make_policy()
    obs = states()[0]
    mu, ls = pol.head(obs, np.ones((3, 3)))
    assert gaussian_kl(pol.head(obs), (mu, ls)) == 0.0


def test_gnnexplainer_range_monotone_deterministic():
    pol = make_policy(seed=1)
    obs = states(count=8, seed=1)
    cfg = ExplainerConfig(gnnexplainer_steps=60)
    r = gnnexplainer_fit(pol, obs, cfg)
    assert np.all((r.mask.values > 0) & (r.mask.values < 1))
    assert np.all(r.final_objective <= r.initial_objective)
    again = gnnexplainer_fit(pol, obs, cfg)
    np.testing.assert_array_equal(r.mask.values, again.mask.values)


def test_gnnexplainer_single_matches_batched_shape():
    pol = make_policy()
    obs = states(count=2)
    single = explain_gnnexplainer(pol, obs[0], ExplainerConfig(gnnexplainer_steps=5))
    assert single.values.shape == (3, 3)


def test_gnnexplainer_non_finite_reports_step():
    pol = make_policy()
    pol.params["dec.out.bias"] = np.array([np.inf, 0.0])
    with pytest.raises(ExplainerError, match="step 0"):
        explain_gnnexplainer(pol, states()[0], ExplainerConfig(gnnexplainer_steps=3))


def test_graphmask_infinite_beta_removes_everything():
    m = explain_graphmask(make_policy(), states()[0], ExplainerConfig(graphmask_beta=float("inf")))
    assert m.values.sum() == 0 and m.kind == "hard"


def test_graphmask_tiny_beta_keeps_graph():
    m = explain_graphmask(make_policy(), states()[0], ExplainerConfig(graphmask_beta=1e-300))
    np.testing.assert_array_equal(m.values, np.ones((3, 3)))


def test_graphmask_removes_inert_edge():
    pol = make_policy(seed=2)
    obs = states(seed=2)[0]
    # a zero attention vector makes every score equal; zero phi makes every message equal,
    # so any single removal that keeps a row alive is inert
    pol.params["gat.phi_weight"][:] = 0.0
    r = graphmask_fit(pol, obs, ExplainerConfig(graphmask_beta=1e-12))
    assert r.mask.values.sum() < 9 and r.divergence == 0.0


def test_graphmask_contract_and_local_minimality():
    pol = make_policy(seed=3)
    beta = 0.01
    for obs in states(count=10, seed=3):
        r = graphmask_fit(pol, obs, ExplainerConfig(graphmask_beta=beta))
        kl = gaussian_kl(pol.head(obs), pol.head(obs, r.mask.values))
        assert kl < beta and kl == pytest.approx(r.divergence, abs=1e-15)
        kept = [(i, j) for i in range(3) for j in range(3) if r.mask.values[i, j] == 1]
        best = min(
            (gaussian_kl(pol.head(obs), pol.head(obs, _without(r.mask.values, e))) for e in kept),
            default=float("inf"),
        )
        assert best >= beta and best == pytest.approx(r.next_candidate_divergence, rel=1e-12)


def _without(mask, edge):
    m = mask.copy()
    m[edge] = 0.0
    return m


def test_graphmask_tie_break_lexicographic():
    # every removal inert → first removal is (0, 0)
    pol = make_policy()
    pol.params["gat.phi_weight"][:] = 0.0
    obs = states()[0]
    r = graphmask_fit(pol, obs, ExplainerConfig(graphmask_beta=1e-12))
    assert r.mask.values[0, 0] == 0.0


def test_explainers_do_not_mutate_params():
    pol = make_policy(seed=4)
    before = param_hash(pol)
    obs = states(count=2, seed=4)
    explain_attention(pol, obs)
    explain_gnnexplainer(pol, obs, ExplainerConfig(gnnexplainer_steps=5))
    explain_graphmask(pol, obs)
    assert param_hash(pol) == before


def test_batched_graphmask_matches_per_timestep():
    pol = make_policy(seed=5)
    obs = states(count=3, seed=5)
    batched = explain_graphmask(pol, obs).values
    for t in range(3):
        np.testing.assert_array_equal(batched[t], explain_graphmask(pol, obs[t]).values)
