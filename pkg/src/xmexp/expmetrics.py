"""Fidelity (Fid+, Fid-, Fid delta) and unfaithfulness (GEF) of edge-mask explanations.

The model output F(.) is the per-agent Gaussian action head.  Fidelity uses
the mean absolute difference of the pre-squash means; GEF uses the closed
form KL between the two Gaussians, which share one state-independent std.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .envs import TaskConfig, run_episode, task_metrics
from .nn import Policy
from .numcore import Tensor
from .stats import summarize

log = logging.getLogger(__name__)

FIDELITY_DEFINITION = "mean-abs-pre-squash-means"
DIVERGENCE_DEFINITION = "gaussian-kl-shared-std"
CSV_COLUMNS = (
    "task", "n_agents", "regularized", "explainer", "episode", "t",
    "fid_plus", "fid_minus", "fid_delta", "gef",
)
METRICS = ("fid_plus", "fid_minus", "fid_delta", "gef")


def _head_arrays(head) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(head, tuple):
        mean, log_std = head
    else:
        mean, log_std = head.mean, head.log_std
    mean = mean.data if isinstance(mean, Tensor) else mean
    log_std = log_std.data if isinstance(log_std, Tensor) else log_std
    return np.asarray(mean, dtype=np.float64), np.asarray(log_std, dtype=np.float64)


def model_output_distance(head_a, head_b):
    """Mean |mu_a - mu_b| over agents and action dims (per leading batch index)."""
    mu_a, _ = _head_arrays(head_a)
    mu_b, _ = _head_arrays(head_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"output shapes differ: {mu_a.shape} vs {mu_b.shape}")
    d = np.abs(mu_a - mu_b).mean(axis=(-2, -1))
    return float(d) if d.ndim == 0 else d


def gaussian_kl(head_a, head_b):
    """KL(a || b) for diagonal Gaussians with a common std, summed over agents and dims."""
    mu_a, ls_a = _head_arrays(head_a)
    mu_b, ls_b = _head_arrays(head_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"output shapes differ: {mu_a.shape} vs {mu_b.shape}")
    if not np.array_equal(ls_a, ls_b):
        raise ValueError("gaussian_kl requires identical log-std on both sides")
    var = np.exp(2.0 * ls_a)
    kl = ((mu_a - mu_b) ** 2 / (2.0 * var)).sum(axis=(-2, -1))
    return float(kl) if kl.ndim == 0 else kl


def gef_from_kl(kl):
    return -np.expm1(-np.asarray(kl)) if np.ndim(kl) else float(-np.expm1(-kl))


def fidelity_suite(policy: Policy, observations, mask) -> tuple:
    """``(fid_plus, fid_minus, fid_delta)``; batched inputs give arrays."""
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    full = policy.head(observations)
    complement = policy.head(observations, 1.0 - m)
    subgraph = policy.head(observations, m)
    fid_plus = model_output_distance(full, complement)
    fid_minus = model_output_distance(full, subgraph)
    return fid_plus, fid_minus, fid_plus - fid_minus


def gef(policy: Policy, observations, mask):
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    return gef_from_kl(gaussian_kl(policy.head(observations), policy.head(observations, m)))


@dataclass(frozen=True)
class ExplanationRecord:
    task: str
    n_agents: int
    regularized: bool
    explainer: str
    episode: int
    t: int
    fid_plus: float
    fid_minus: float
    fid_delta: float
    gef: float

    def row(self) -> list:
        return [
            self.task, self.n_agents, int(self.regularized), self.explainer, self.episode, self.t,
            repr(float(self.fid_plus)), repr(float(self.fid_minus)), repr(float(self.fid_delta)), repr(float(self.gef)),
        ]


def aggregate(records: Sequence[ExplanationRecord]) -> dict[str, dict]:
    """Per-metric summaries (mean, std, quartiles, ...) over the records."""
    out = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in records]
        out[m] = summarize(vals) if vals else {"n": 0}
    return out


@dataclass
class EvaluationResult:
    records: list[ExplanationRecord]
    aggregate: dict[str, dict]
    masks: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    failures: list[tuple[int, int, str]] = field(default_factory=list)
    episode_metrics: list[dict] = field(default_factory=list)


ExplainerFn = Callable[[Policy, np.ndarray], np.ndarray]


def _resolve(explainer: Union[str, ExplainerFn], config) -> tuple[str, ExplainerFn]:
    from . import explainers as ex

    if callable(explainer):
        return getattr(explainer, "__name__", "custom"), explainer
    fns = {
        "attention": lambda p, o: ex.explain_attention(p, o).values,
        "gnnexplainer": lambda p, o: ex.explain_gnnexplainer(p, o, config).values,
        "graphmask": lambda p, o: ex.explain_graphmask(p, o, config).values,
    }
    if explainer not in fns:
        raise ValueError(f"unknown explainer {explainer!r}")
    return explainer, fns[explainer]


def worker_count() -> int:
    raw = os.environ.get("XMEXP_THREADS")
    if raw:
        return max(1, int(raw))
    return os.cpu_count() or 1


def evaluation_seed(seed: int, episode: int) -> list[int]:
    return [seed, 1_000_003, episode]


def _explain_episode(policy, env_config, name, fn, seed, episode, regularized):
    elog, observations = run_episode(env_config, evaluation_seed(seed, episode), policy.act)
    obs = np.stack(observations)
    records: list[ExplanationRecord] = []
    masks = []
    failures = []
    try:
        batch_masks = np.asarray(fn(policy, obs), dtype=np.float64)
        per_t = [(t, batch_masks[t]) for t in range(len(obs))]
    except Exception:  # isolate the failing timesteps
        per_t = []
        for t in range(len(obs)):
            try:
                per_t.append((t, np.asarray(fn(policy, obs[t]), dtype=np.float64)))
            except Exception as exc:
                failures.append((episode, t, f"{type(exc).__name__}: {exc}"))
    if per_t:
        ts = [t for t, _ in per_t]
        m = np.stack([mk for _, mk in per_t])
        o = obs[ts]
        fp, fm, fd = fidelity_suite(policy, o, m)
        g = gef(policy, o, m)
        for k, t in enumerate(ts):
            records.append(ExplanationRecord(
                env_config.task, env_config.n_agents, regularized, name, episode, t,
                float(fp[k]), float(fm[k]), float(fp[k] - fm[k]), float(g[k]),
            ))
            masks.append((episode, t, m[k]))
    return records, masks, failures, task_metrics(elog, env_config)


def evaluate_explainer(
    policy: Policy,
    env_config: TaskConfig,
    explainer: Union[str, ExplainerFn],
    episodes: int = 50,
    seed: int = 0,
    explainer_config=None,
) -> EvaluationResult:
    """Deterministic rollouts; explain and score every timestep of every episode."""
    name, fn = _resolve(explainer, explainer_config)
    regularized = float(policy.meta.get("attention_entropy_weight", 0.0)) > 0
    jobs = range(episodes)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(
            lambda e: _explain_episode(policy, env_config, name, fn, seed, e, regularized), jobs
        ))
    records, masks, failures, ep_metrics = [], [], [], []
    for rec, mk, fail, met in results:
        records.extend(rec)
        masks.extend(mk)
        failures.extend(fail)
        ep_metrics.append(met)
    if failures:
        log.warning("%d explainer failures excluded from aggregates", len(failures))
    agg = aggregate(records)
    agg["failures"] = len(failures)
    return EvaluationResult(records, agg, masks, failures, ep_metrics)


def record_dicts(records: Sequence[ExplanationRecord]) -> list[dict]:
    return [asdict(r) for r in records]
