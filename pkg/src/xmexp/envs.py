"""Blind navigation, passage and discovery on a 2-D double integrator.

States are immutable from the caller's point of view: :func:`step` returns a
new :class:`WorldState`.  All randomness comes from the seed given to
:func:`reset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TASKS = ("navigation", "passage", "discovery")
CROSS_OFFSETS = np.array([[0.0, 0.0], [0.25, 0.0], [-0.25, 0.0], [0.0, 0.25], [0.0, -0.25]])


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    task: str
    n_agents: int
    agent_radius: float = 0.05
    dt: float = 0.1
    a_max: float = 1.0
    v_max: float = 0.5
    arena: float = 1.5
    spawn_extent: float = 1.0
    max_steps: int = 400
    goal_radius: float = 0.1
    progress_coef: float = 1.0
    agent_collision_penalty: float = 0.5
    object_collision_penalty: float = 0.5
    goal_bonus: float = 0.05
    wall_y: float = 0.0
    gap_width: float = 0.3
    formation_offset: float = 0.75
    sensing_radius: float = 0.3
    capture_radius: float = 0.15
    capture_count: int = 2
    discovery_reward: float = 1.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 3 <= self.n_agents <= 8:
            raise ValueError(f"n_agents must be in 3..8, got {self.n_agents}")
        if self.task == "passage" and self.n_agents > len(CROSS_OFFSETS):
            raise ValueError("passage supports at most 5 agents (cross formation slots)")

    @property
    def obs_dim(self) -> int:
        return {"navigation": 6, "passage": 8, "discovery": 5}[self.task]


DEFAULT_MAX_STEPS = {"navigation": 400, "passage": 500, "discovery": 500}


def make_task(task: str, n_agents: int, **overrides) -> TaskConfig:
    if task not in DEFAULT_MAX_STEPS:
        raise ValueError(f"unknown task {task!r}")
    overrides.setdefault("max_steps", DEFAULT_MAX_STEPS[task])
    return TaskConfig(task=task, n_agents=n_agents, **overrides)


@dataclass(frozen=True)
class WorldState:
    positions: np.ndarray
    velocities: np.ndarray
    goals: np.ndarray | None
    landmark: np.ndarray | None
    step_index: int
    config: TaskConfig
    reached: np.ndarray
    discovered: bool = False


@dataclass
class StepInfo:
    agent_rewards: np.ndarray
    agent_collisions: np.ndarray
    object_collisions: np.ndarray
    reached: np.ndarray
    discovered: bool


@dataclass
class EpisodeLog:
    n_agents: int
    rewards: list[float] = field(default_factory=list)
    agent_collisions: list[np.ndarray] = field(default_factory=list)
    object_collisions: list[np.ndarray] = field(default_factory=list)
    reach_times: np.ndarray | None = None
    discovery_time: int | None = None

    def record(self, info: StepInfo, team_reward: float) -> None:
        t = len(self.rewards) + 1
        self.rewards.append(team_reward)
        self.agent_collisions.append(info.agent_collisions)
        self.object_collisions.append(info.object_collisions)
        if self.reach_times is None:
            self.reach_times = np.full(self.n_agents, -1, dtype=int)
        newly = info.reached & (self.reach_times < 0)
        self.reach_times[newly] = t
        if info.discovered and self.discovery_time is None:
            self.discovery_time = t

    @property
    def length(self) -> int:
        return len(self.rewards)


def _sample_points(rng: np.random.Generator, n: int, extent: float, min_dist: float, seed, what: str):
    for _ in range(1000):
        pts = rng.uniform(-extent, extent, size=(n, 2))
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if np.all(d[np.triu_indices(n, 1)] > min_dist):
            return pts
    raise EnvError(f"rejection sampling for {what} exceeded 1000 tries (seed={seed})")


def reset(config: TaskConfig, seed) -> WorldState:
    rng = np.random.default_rng(seed)
    n = config.n_agents
    spacing = 4 * config.agent_radius
    goals = landmark = None
    if config.task == "navigation":
        pos = _sample_points(rng, n, config.spawn_extent, spacing, seed, "agents")
        goals = _sample_points(rng, n, config.spawn_extent, spacing, seed, "goals")
    elif config.task == "passage":
        slots = rng.permutation(len(CROSS_OFFSETS))[:n]
        below = np.array([0.0, config.wall_y - config.formation_offset])
        pos = below + CROSS_OFFSETS[slots]
        goals = pos * np.array([1.0, -1.0]) + np.array([0.0, 2 * config.wall_y])
    else:
        pos = _sample_points(rng, n, config.spawn_extent, spacing, seed, "agents")
        for _ in range(1000):
            cand = rng.uniform(-config.spawn_extent, config.spawn_extent, size=2)
            if np.all(np.linalg.norm(pos - cand, axis=1) > config.sensing_radius):
                landmark = cand
                break
        else:
            raise EnvError(f"rejection sampling for landmark exceeded 1000 tries (seed={seed})")
    return WorldState(
        positions=pos,
        velocities=np.zeros((n, 2)),
        goals=goals,
        landmark=landmark,
        step_index=0,
        config=config,
        reached=np.zeros(n, dtype=bool),
    )


def observe(state: WorldState) -> np.ndarray:
    cfg = state.config
    parts = [state.positions, state.velocities]
    if cfg.task == "navigation":
        parts.append(state.goals)
    elif cfg.task == "passage":
        parts.append(state.goals)
        parts.append(np.tile([0.0, cfg.wall_y], (cfg.n_agents, 1)))
    else:
        parts.append(_landmark_visible(state)[:, None].astype(np.float64))
    return np.concatenate(parts, axis=1)


def _landmark_visible(state: WorldState) -> np.ndarray:
    return np.linalg.norm(state.positions - state.landmark, axis=1) <= state.config.sensing_radius


def agent_collisions(positions: np.ndarray, radius: float) -> np.ndarray:
    d = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    hit = d < 2 * radius
    np.fill_diagonal(hit, False)
    return hit


def wall_collisions(positions: np.ndarray, cfg: TaskConfig) -> np.ndarray:
    half = cfg.gap_width / 2
    ax = np.abs(positions[:, 0])
    dy = positions[:, 1] - cfg.wall_y
    # inside the gap the nearest wall point is the gap edge; outside it is straight below/above
    dist = np.where(ax >= half, np.abs(dy), np.hypot(half - ax, dy))
    return dist < cfg.agent_radius


def step(state: WorldState, actions) -> tuple[WorldState, float, bool, StepInfo]:
    cfg = state.config
    a = np.asarray(actions, dtype=np.float64)
    if a.shape != (cfg.n_agents, 2):
        raise ValueError(f"actions must have shape {(cfg.n_agents, 2)}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("actions contain NaN or inf")
    a = np.clip(a, -1.0, 1.0)

    v = state.velocities + a * cfg.a_max * cfg.dt
    speed = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.where(speed > cfg.v_max, v * (cfg.v_max / np.maximum(speed, 1e-300)), v)
    x = state.positions + v * cfg.dt
    clipped = np.clip(x, -cfg.arena, cfg.arena)
    v = np.where(clipped != x, 0.0, v)
    x = clipped

    hits = agent_collisions(x, cfg.agent_radius)
    any_hit = hits.any(axis=1)
    obj = wall_collisions(x, cfg) if cfg.task == "passage" else np.zeros(cfg.n_agents, dtype=bool)
    reached = state.reached
    discovered = state.discovered

    if cfg.task == "discovery":
        near = np.linalg.norm(x - state.landmark, axis=1) <= cfg.capture_radius
        captured = (not discovered) and int(near.sum()) >= cfg.capture_count
        per_agent = np.full(cfg.n_agents, cfg.discovery_reward if captured else 0.0)
        discovered = discovered or captured
        complete = discovered
    else:
        before = np.linalg.norm(state.positions - state.goals, axis=1)
        after = np.linalg.norm(x - state.goals, axis=1)
        at_goal = after <= cfg.goal_radius
        per_agent = (
            cfg.progress_coef * (before - after)
            - cfg.agent_collision_penalty * any_hit
            - cfg.object_collision_penalty * obj
            + cfg.goal_bonus * at_goal
        )
        reached = reached | at_goal
        complete = bool(reached.all())

    t = state.step_index + 1
    new = replace(state, positions=x, velocities=v, step_index=t, reached=reached, discovered=discovered)
    done = complete or t >= cfg.max_steps
    info = StepInfo(per_agent, hits, obj, reached.copy(), discovered)
    return new, float(per_agent.mean()), bool(done), info


def task_complete(state: WorldState) -> bool:
    if state.config.task == "discovery":
        return state.discovered
    return bool(state.reached.all())


def task_metrics(log: EpisodeLog, config: TaskConfig) -> dict[str, float]:
    """Episode-level reward, success, collision-free indicators and makespan."""
    reward = float(np.sum(log.rewards))
    no_agent = float(not any(h.any() for h in log.agent_collisions))
    if config.task == "discovery":
        success = float(log.discovery_time is not None)
        makespan = log.discovery_time if log.discovery_time is not None else config.max_steps
    else:
        times = log.reach_times if log.reach_times is not None else np.full(config.n_agents, -1)
        success = float(np.mean(times >= 0))
        makespan = int(times.max()) if np.all(times >= 0) else config.max_steps
    out = {
        "reward": reward,
        "success_rate": success,
        "no_agent_coll": no_agent,
        "makespan": float(makespan),
    }
    if config.task == "passage":
        out["no_object_coll"] = float(not any(o.any() for o in log.object_collisions))
    return out


def run_episode(config: TaskConfig, seed, policy_fn) -> tuple[EpisodeLog, list[np.ndarray]]:
    """Roll one episode with ``policy_fn(obs) -> actions``; returns the log and observations seen."""
    state = reset(config, seed)
    log = EpisodeLog(config.n_agents)
    observations = []
    done = False
    while not done:
        obs = observe(state)
        observations.append(obs)
        state, r, done, info = step(state, policy_fn(obs))
        log.record(info, r)
    return log, observations
