"""Post-hoc edge-mask explainers: attention read-out, GNNExplainer and GraphMask.

All three accept a single timestep ``(N, d)`` or a stack ``(T, N, d)`` of
observations and return masks with matching leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .expmetrics import gaussian_kl
from .marl import Adam
from .nn import Policy
from .numcore import Tensor


class ExplainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExplainerConfig:
    graphmask_beta: float = 0.01
    gnnexplainer_steps: int = 200
    gnnexplainer_lr: float = 0.05
    gnnexplainer_size_weight: float = 0.005
    gnnexplainer_entropy_weight: float = 0.1
    gnnexplainer_max_retries: int = 5

    def __post_init__(self):
        if self.graphmask_beta <= 0:
            raise ValueError("graphmask_beta must be > 0")
        for name in ("gnnexplainer_lr", "gnnexplainer_size_weight", "gnnexplainer_entropy_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class EdgeMask:
    values: np.ndarray
    kind: str  # "hard" | "soft"
    source: str  # "attention" | "gnnexplainer" | "graphmask"

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ExplainerError("mask contains non-finite values")
        if self.kind == "hard" and not np.all((self.values == 0) | (self.values == 1)):
            raise ExplainerError("hard mask must be binary")


def explain_attention(policy: Policy, observations) -> EdgeMask:
    return EdgeMask(policy.attention(observations), "soft", "attention")


# ---------------------------------------------------------------------------
# GNNExplainer
# ---------------------------------------------------------------------------


def _gnnx_objective(policy: Policy, obs, ref_mean: np.ndarray, inv_two_var: np.ndarray, logits: Tensor, cfg):
    """Objective per timestep as a tensor over the leading batch axis."""
    m = nc.sigmoid(logits)
    head, _ = policy.forward(obs, m)
    diff = head.mean - ref_mean
    kl = (diff * diff * inv_two_var).sum(axis=(-2, -1))
    size = m.sum(axis=(-2, -1))
    mc = nc.clamp(m, 1e-12, 1.0 - 1e-12)
    ent = -(m * nc.log(mc) + (1.0 - m) * nc.log(1.0 - mc)).sum(axis=(-2, -1))
    per_t = kl + size * cfg.gnnexplainer_size_weight + ent * cfg.gnnexplainer_entropy_weight
    return per_t


def _optimize_masks(policy: Policy, obs: np.ndarray, cfg: ExplainerConfig, lr: float):
    mean, log_std = policy.head(obs)
    inv_two_var = 1.0 / (2.0 * np.exp(2.0 * log_std))
    n = obs.shape[-2]
    params = {"logits": np.zeros(obs.shape[:-1] + (n,))}
    opt = Adam(params, lr)
    initial = None
    for k in range(cfg.gnnexplainer_steps + 1):
        logits = Tensor(params["logits"], requires_grad=True)
        per_t = _gnnx_objective(policy, obs, mean, inv_two_var, logits, cfg)
        if not np.all(np.isfinite(per_t.data)):
            raise ExplainerError(f"gnnexplainer objective became non-finite at step {k}")
        if initial is None:
            initial = per_t.data.copy()
        if k == cfg.gnnexplainer_steps:
            return params["logits"], initial, per_t.data.copy()
        per_t.sum().backward()
        opt.step({"logits": logits.grad})


@dataclass
class GnnExplainerResult:
    mask: EdgeMask
    initial_objective: np.ndarray
    final_objective: np.ndarray
    retries: np.ndarray


def gnnexplainer_fit(policy: Policy, observations, config: ExplainerConfig | None = None) -> GnnExplainerResult:
    """Optimise sigmoid edge-mask logits (start 0) against KL + size + mask-entropy.

    Timesteps whose final objective exceeds the initial one are re-fit with
    half the learning rate, up to ``gnnexplainer_max_retries`` times.
    """
    cfg = config or ExplainerConfig()
    obs = np.asarray(observations, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    logits, initial, final = _optimize_masks(policy, obs, cfg, cfg.gnnexplainer_lr)
    retries = np.zeros(len(obs), dtype=int)
    lr = cfg.gnnexplainer_lr
    for _ in range(cfg.gnnexplainer_max_retries):
        bad = np.flatnonzero(final > initial)
        if bad.size == 0:
            break
        lr *= 0.5
        lg, _, fin = _optimize_masks(policy, obs[bad], cfg, lr)
        logits[bad] = lg
        final[bad] = fin
        retries[bad] += 1
    values = 0.5 * (1.0 + np.tanh(0.5 * logits))
    if single:
        values, initial, final, retries = values[0], initial[0], final[0], retries[0]
    return GnnExplainerResult(EdgeMask(values, "soft", "gnnexplainer"), initial, final, retries)


def explain_gnnexplainer(policy: Policy, observations, config: ExplainerConfig | None = None) -> EdgeMask:
    return gnnexplainer_fit(policy, observations, config).mask


# ---------------------------------------------------------------------------
# GraphMask (greedy backward elimination)
# ---------------------------------------------------------------------------


@dataclass
class GraphMaskResult:
    mask: EdgeMask
    divergence: float
    next_candidate_divergence: float  # smallest divergence of one more removal (inf if none left)


def _graphmask_single(policy: Policy, obs: np.ndarray, beta: float) -> GraphMaskResult:
    n = obs.shape[0]
    ref = policy.head(obs)
    mask = np.ones((n, n))
    current = 0.0
    while True:
        remaining = [(i, j) for i in range(n) for j in range(n) if mask[i, j] == 1.0]
        if not remaining:
            return GraphMaskResult(EdgeMask(mask, "hard", "graphmask"), current, float("inf"))
        cands = np.repeat(mask[None], len(remaining), axis=0)
        for k, (i, j) in enumerate(remaining):
            cands[k, i, j] = 0.0
        obs_b = np.broadcast_to(obs, (len(remaining),) + obs.shape)
        mu, ls = policy.head(obs_b, cands)
        divs = gaussian_kl((np.broadcast_to(ref[0], mu.shape), ref[1]), (mu, ls))
        # argmin returns the first minimum, i.e. the lexicographically smallest (i, j)
        best = int(np.argmin(divs))
        if not divs[best] < beta:
            return GraphMaskResult(EdgeMask(mask, "hard", "graphmask"), current, float(divs[best]))
        i, j = remaining[best]
        mask[i, j] = 0.0
        current = float(divs[best])


def graphmask_fit(policy: Policy, observations, config: ExplainerConfig | None = None):
    cfg = config or ExplainerConfig()
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 2:
        return _graphmask_single(policy, obs, cfg.graphmask_beta)
    return [_graphmask_single(policy, o, cfg.graphmask_beta) for o in obs]


def explain_graphmask(policy: Policy, observations, config: ExplainerConfig | None = None) -> EdgeMask:
    """Greedily drop the edge whose removal changes the output least while KL stays below beta."""
    res = graphmask_fit(policy, observations, config)
    if isinstance(res, list):
        return EdgeMask(np.stack([r.mask.values for r in res]), "hard", "graphmask")
    return res.mask
