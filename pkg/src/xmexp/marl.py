"""MAPPO with a centralised critic, GAE, clipped surrogate and attention-entropy penalty."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import numcore as nc
from .envs import TaskConfig, observe, reset, step, task_complete
from .nn import Architecture, attention_entropy, critic_forward, init_params, policy_forward
from .numcore import Tensor

log = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SQUASH_EPS = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    gamma: float
    gae_lambda: float
    entropy_eps: float
    clip_eps: float
    epochs: int
    minibatch_size: int
    max_grad_norm: float
    frames_per_batch: int
    collector_iterations: int
    normalize_advantage: bool
    attention_entropy_weight: float
    critic_coeff: float = 1.0
    bootstrap_on_completion: bool = False  # keep V(s') at task completion; a per-step goal bonus otherwise rewards stalling
    checkpoint_fractions: tuple[float, ...] = (0.2, 0.5, 0.8, 1.0)

    def __post_init__(self):
        if self.attention_entropy_weight < 0:
            raise ValueError("attention_entropy_weight must be >= 0")


PAPER_CONFIGS: dict[str, TrainConfig] = {
    "navigation": TrainConfig(
        learning_rate=0.0003, gamma=0.99999, gae_lambda=0.9, entropy_eps=0.0001, clip_eps=0.2,
        epochs=30, minibatch_size=800, max_grad_norm=1.0, frames_per_batch=18000,
        collector_iterations=150, normalize_advantage=False, attention_entropy_weight=10.0,
        bootstrap_on_completion=True,
    ),
    "passage": TrainConfig(
        learning_rate=0.00005, gamma=0.99999, gae_lambda=0.9, entropy_eps=0.0001, clip_eps=0.2,
        epochs=30, minibatch_size=800, max_grad_norm=1.0, frames_per_batch=60000,
        collector_iterations=100, normalize_advantage=False, attention_entropy_weight=50.0,
        bootstrap_on_completion=True,
    ),
    "discovery": TrainConfig(
        learning_rate=0.0007, gamma=0.9999, gae_lambda=0.95, entropy_eps=0.0001, clip_eps=0.05,
        epochs=5, minibatch_size=10000, max_grad_norm=10.0, frames_per_batch=10000,
        collector_iterations=1000, normalize_advantage=True, attention_entropy_weight=50.0,
    ),
}

# Workstation budget: fewer iterations, smaller batches and fewer epochs.
DESK_OVERRIDES: dict[str, dict] = {
    "navigation": dict(collector_iterations=75, frames_per_batch=6000, epochs=10),
    "passage": dict(collector_iterations=50, frames_per_batch=10000, epochs=10),
    "discovery": dict(collector_iterations=100, frames_per_batch=10000, epochs=5),
}


def train_config(task: str, profile: str = "desk", regularized: bool = True, **overrides) -> TrainConfig:
    cfg = PAPER_CONFIGS[task]
    if profile == "desk":
        cfg = replace(cfg, **DESK_OVERRIDES[task])
    elif profile != "paper":
        raise ValueError(f"unknown profile {profile!r}")
    if not regularized:
        cfg = replace(cfg, attention_entropy_weight=0.0)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class RolloutBatch:
    """Flat frames in slot-major order; each slot holds consecutive episodes."""

    observations: np.ndarray  # (F, N, d)
    next_observations: np.ndarray  # (F, N, d)
    pre_squash_actions: np.ndarray  # (F, N, 2)
    log_probs: np.ndarray  # (F, N)
    squash_correction: np.ndarray  # (F, N)
    rewards: np.ndarray  # (F,)
    values: np.ndarray  # (F,)
    next_values: np.ndarray  # (F,)
    terminated: np.ndarray  # (F,) true task termination
    episode_end: np.ndarray  # (F,) termination, time limit or end of slot budget
    attention: np.ndarray  # (F, N, N)
    episode: np.ndarray  # (F,) global episode index
    step: np.ndarray  # (F,) step within episode
    meta: dict = field(default_factory=dict)

    @property
    def frames(self) -> int:
        return len(self.rewards)

    @property
    def num_episodes(self) -> int:
        return len(np.unique(self.episode))


def gaussian_log_prob(u, mean, log_std):
    """Diagonal-Gaussian log density summed over the action axis (arrays or tensors)."""
    if isinstance(mean, Tensor) or isinstance(log_std, Tensor):
        z = (nc.as_tensor(u) - mean) * nc.exp(-nc.as_tensor(log_std))
        return (z * z * -0.5 - log_std - HALF_LOG_2PI).sum(axis=-1)
    z = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def squash_correction(u: np.ndarray) -> np.ndarray:
    return np.sum(np.log(1.0 - np.tanh(u) ** 2 + SQUASH_EPS), axis=-1)


def _as_plain(params: Mapping) -> dict:
    return {k: nc.as_tensor(v) for k, v in params.items()}


def collect_rollouts(
    params: Mapping[str, np.ndarray],
    arch: Architecture,
    env_config: TaskConfig,
    frames: int,
    seed: int,
    iteration: int = 0,
    deterministic: bool = False,
    attention_entropy_weight: float = 0.0,
) -> RolloutBatch:
    """Run ``ceil(frames / max_steps)`` episode slots in lockstep until ``frames`` frames exist."""
    if frames < 1:
        raise ValueError("frames must be positive")
    n_slots = max(1, math.ceil(frames / env_config.max_steps))
    budgets = [frames // n_slots + (1 if s < frames % n_slots else 0) for s in range(n_slots)]
    tparams = _as_plain(params)
    n = env_config.n_agents

    slot_ep = [0] * n_slots
    slot_rng = []
    states = []
    for s in range(n_slots):
        rng = np.random.default_rng([seed, iteration, s, 0, 1])
        slot_rng.append(rng)
        states.append(reset(env_config, [seed, iteration, s, 0]))
    ep_step = [0] * n_slots
    ep_id = list(range(n_slots))
    ep_counter = n_slots
    rec: list[dict[str, list]] = [
        {k: [] for k in ("obs", "nobs", "u", "logp", "corr", "r", "term", "end", "att", "ep", "t")}
        for _ in range(n_slots)
    ]

    for t in range(max(budgets)):
        active = [s for s in range(n_slots) if t < budgets[s]]
        obs = np.stack([observe(states[s]) for s in active])
        head, gat = policy_forward(tparams, obs, arch)
        mean, log_std, att = head.mean.data, head.log_std.data, gat.attention.data
        for k, s in enumerate(active):
            if deterministic:
                u = mean[k].copy()
            else:
                u = mean[k] + np.exp(log_std) * slot_rng[s].standard_normal((n, 2))
            new_state, r, done, _ = step(states[s], np.tanh(u))
            last = t == budgets[s] - 1
            term = task_complete(new_state)
            r_ = rec[s]
            r_["obs"].append(obs[k])
            r_["nobs"].append(observe(new_state))
            r_["u"].append(u)
            r_["logp"].append(gaussian_log_prob(u, mean[k], log_std) - squash_correction(u))
            r_["corr"].append(squash_correction(u))
            r_["r"].append(r)
            r_["term"].append(term)
            r_["end"].append(done or last)
            r_["att"].append(att[k])
            r_["ep"].append(ep_id[s])
            r_["t"].append(ep_step[s])
            ep_step[s] += 1
            if done and not last:
                slot_ep[s] += 1
                slot_rng[s] = np.random.default_rng([seed, iteration, s, slot_ep[s], 1])
                states[s] = reset(env_config, [seed, iteration, s, slot_ep[s]])
                ep_step[s] = 0
                ep_id[s] = ep_counter
                ep_counter += 1
            else:
                states[s] = new_state

    def cat(key, dtype=np.float64):
        return np.concatenate([np.asarray(r_[key], dtype=dtype) for r_ in rec])

    observations = cat("obs")
    next_observations = cat("nobs")
    values = critic_forward(tparams, observations, arch).data
    next_values = critic_forward(tparams, next_observations, arch).data
    return RolloutBatch(
        observations=observations,
        next_observations=next_observations,
        pre_squash_actions=cat("u"),
        log_probs=cat("logp"),
        squash_correction=cat("corr"),
        rewards=cat("r"),
        values=values,
        next_values=next_values,
        terminated=cat("term", bool),
        episode_end=cat("end", bool),
        attention=cat("att"),
        episode=cat("ep", int),
        step=cat("t", int),
        meta={
            "attention_entropy_weight": attention_entropy_weight,
            "seed": seed,
            "iteration": iteration,
            "deterministic": deterministic,
            "task": env_config.task,
            "n_agents": n,
        },
    )


def compute_gae(
    rewards,
    values,
    dones,
    gamma: float,
    lam: float,
    next_values=None,
    terminated=None,
    normalize: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and returns for a time-ordered sequence.

    Without ``next_values`` the successor value is ``values[t+1]`` and the value
    after the final step is 0.  ``terminated`` (default: ``dones``) selects
    where the successor value is dropped; ``dones`` cuts the recursion.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if not (len(r) == len(v) == len(d)):
        raise ValueError(f"compute_gae: length mismatch {len(r)}, {len(v)}, {len(d)}")
    if next_values is None:
        nv = np.append(v[1:], 0.0)
    else:
        nv = np.asarray(next_values, dtype=np.float64)
        if len(nv) != len(r):
            raise ValueError("compute_gae: next_values length mismatch")
    term = d if terminated is None else np.asarray(terminated, dtype=bool)
    delta = r + gamma * nv * (~term) - v
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        running = delta[t] + gamma * lam * (0.0 if d[t] else 1.0) * running
        adv[t] = running
    returns = adv + v
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


def ppo_clip_loss(new_log_probs, old_log_probs, advantages, clip_eps: float) -> Tensor:
    """Mean of ``-min(rho*A, clip(rho, 1-eps, 1+eps)*A)`` with ``rho = exp(new - old)``."""
    new = nc.as_tensor(new_log_probs)
    ratio = nc.exp(new - nc.as_tensor(old_log_probs))
    adv = nc.as_tensor(advantages)
    surrogate = nc.minimum(ratio * adv, nc.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    return -surrogate.mean()


def smooth_l1(x) -> Tensor:
    """Elementwise Huber loss with threshold 1 (0.5 x^2 inside, |x| - 0.5 outside)."""
    x = nc.as_tensor(x)
    c = nc.clamp(x, -1.0, 1.0)
    return c * c * 0.5 + nc.absolute(x) - nc.absolute(c)


def regularized_loss(
    ppo_loss,
    critic_loss,
    action_entropy,
    attention_entropies,
    attention_weight: float,
    entropy_eps: float,
    critic_coeff: float = 1.0,
) -> Tensor:
    """PPO + critic - entropy bonus + weight * mean attention entropy."""
    if attention_weight < 0:
        raise ValueError("attention entropy weight must be >= 0")
    total = nc.as_tensor(ppo_loss) + nc.as_tensor(critic_loss) * critic_coeff
    total = total - nc.as_tensor(action_entropy) * entropy_eps
    if attention_weight:
        total = total + nc.as_tensor(attention_entropies).mean() * attention_weight
    return total


def gaussian_entropy(log_std) -> Tensor:
    ls = nc.as_tensor(log_std)
    return (ls + (0.5 + HALF_LOG_2PI)).sum()


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = grads[k] * factor
    return total


@dataclass
class LossTerms:
    total: Tensor
    ppo: float
    critic: float
    attention_entropy: float


def minibatch_loss(
    tparams: Mapping[str, Tensor],
    arch: Architecture,
    cfg: TrainConfig,
    obs: np.ndarray,
    u: np.ndarray,
    old_logp: np.ndarray,
    corr: np.ndarray,
    adv: np.ndarray,
    ret: np.ndarray,
) -> LossTerms:
    head, gat = policy_forward(tparams, obs, arch)
    new_logp = gaussian_log_prob(u, head.mean, head.log_std) - corr
    ppo = ppo_clip_loss(new_logp, old_logp, adv[:, None], cfg.clip_eps)
    values = critic_forward(tparams, obs, arch)
    critic = smooth_l1(values - ret).mean()
    att_h = attention_entropy(gat.attention)
    total = regularized_loss(
        ppo, critic, gaussian_entropy(head.log_std), att_h,
        cfg.attention_entropy_weight, cfg.entropy_eps, cfg.critic_coeff,
    )
    n = obs.shape[-2]
    return LossTerms(total, ppo.item(), critic.item(), float(att_h.data.mean()) / n)


def batch_advantages(batch: RolloutBatch, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    adv, ret = compute_gae(
        batch.rewards, batch.values, batch.episode_end, cfg.gamma, cfg.gae_lambda,
        next_values=batch.next_values,
        terminated=np.zeros_like(batch.terminated) if cfg.bootstrap_on_completion else batch.terminated,
    )
    if cfg.normalize_advantage:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


@dataclass
class TrainCheckpoint:
    iteration: int
    fraction: float
    params: dict[str, np.ndarray]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    checkpoints: list[TrainCheckpoint]
    curves: list[dict[str, float]]


def checkpoint_iterations(cfg: TrainConfig) -> dict[int, float]:
    out: dict[int, float] = {}
    for f in cfg.checkpoint_fractions:
        it = min(cfg.collector_iterations, max(1, round(f * cfg.collector_iterations)))
        out.setdefault(it, f)
    return out


def train(
    env_config: TaskConfig,
    cfg: TrainConfig,
    seed: int,
    arch: Architecture | None = None,
    on_checkpoint: Callable[[TrainCheckpoint], None] | None = None,
    on_iteration: Callable[[dict], None] | None = None,
    iterations: int | None = None,
) -> TrainResult:
    """Collect, estimate advantages, then run ``epochs`` of clipped minibatch Adam steps per iteration."""
    from .nn import ARCHITECTURES

    arch = arch or ARCHITECTURES[env_config.task]
    params = init_params(arch, env_config.n_agents, np.random.default_rng([seed, 0]))
    opt = Adam(params, cfg.learning_rate)
    ckpt_at = checkpoint_iterations(cfg)
    checkpoints: list[TrainCheckpoint] = []
    curves: list[dict[str, float]] = []
    n_iter = cfg.collector_iterations if iterations is None else iterations

    for it in range(1, n_iter + 1):
        batch = collect_rollouts(
            params, arch, env_config, cfg.frames_per_batch, seed, iteration=it,
            attention_entropy_weight=cfg.attention_entropy_weight,
        )
        adv, ret = batch_advantages(batch, cfg)
        shuffle = np.random.default_rng([seed, it, 7])
        sums = {"ppo": 0.0, "critic": 0.0, "attn": 0.0}
        steps = 0
        for _ in range(cfg.epochs):
            order = shuffle.permutation(batch.frames)
            for start in range(0, batch.frames, cfg.minibatch_size):
                idx = order[start : start + cfg.minibatch_size]
                tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                terms = minibatch_loss(
                    tparams, arch, cfg, batch.observations[idx], batch.pre_squash_actions[idx],
                    batch.log_probs[idx], batch.squash_correction[idx], adv[idx], ret[idx],
                )
                if not np.isfinite(terms.total.item()):
                    raise TrainingDiverged(f"non-finite loss at iteration {it}")
                terms.total.backward()
                grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tparams.items()}
                clip_grad_norm(grads, cfg.max_grad_norm)
                opt.step(grads)
                sums["ppo"] += terms.ppo
                sums["critic"] += terms.critic
                sums["attn"] += terms.attention_entropy
                steps += 1
        row = {
            "iteration": it,
            "ppo_loss": sums["ppo"] / steps,
            "critic_loss": sums["critic"] / steps,
            "attn_entropy_mean": sums["attn"] / steps,
            "reward_mean": float(batch.rewards.mean()),
        }
        curves.append(row)
        log.info("iteration %d: %s", it, row)
        if on_iteration is not None:
            on_iteration(row)
        if it in ckpt_at:
            ck = TrainCheckpoint(it, ckpt_at[it], {k: v.copy() for k, v in params.items()})
            checkpoints.append(ck)
            if on_checkpoint is not None:
                on_checkpoint(ck)
    return TrainResult(params, checkpoints, curves)
