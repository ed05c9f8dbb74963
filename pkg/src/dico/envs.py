"""Vectorized 2-D point-mass tasks: Navigation, Dispersion, Sampling.

All arrays in an :class:`EnvState` are batched over environments first and
agents second.  ``step`` mutates the state in place and returns the new
observations and rewards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class Physics:
    dt: float = 0.1
    drag: float = 0.25
    max_force: float = 1.0
    agent_radius: float = 0.05
    food_radius: float = 0.05
    horizon: int = 100


@dataclass
class EnvState:
    pos: np.ndarray                      # (E, n, 2)
    vel: np.ndarray                      # (E, n, 2)
    t: int = 0
    horizon: int = 100
    goals: np.ndarray | None = None      # (E, k, 2)
    food: np.ndarray | None = None       # (E, F, 2)
    eaten: np.ndarray | None = None      # (E, F) bool
    grid: np.ndarray | None = None       # (E, G, G) remaining cell values, indexed [ix, iy]
    grid_init: np.ndarray | None = None  # (E, G, G) values at reset
    visited: np.ndarray | None = None    # (E, G, G) bool

    @property
    def n_envs(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "EnvState":
        kw = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}
        return EnvState(**kw)


@dataclass
class StepResult:
    obs: np.ndarray       # (E, n, obs_dim)
    rewards: np.ndarray   # (E, n)
    done: bool


def env_seeds(seed: int, n_envs: int) -> list[np.random.SeedSequence]:
    """Per-environment seed sequences; env e of a batch always gets the e-th child."""
    return np.random.SeedSequence(int(seed)).spawn(n_envs)


class Task:
    name = "task"
    action_dim = 2

    def __init__(self, n_agents: int, physics: Physics | None = None):
        if n_agents < 1:
            raise ValueError("need at least one agent")
        self.n_agents = int(n_agents)
        self.physics = physics or Physics()

    @property
    def obs_dim(self) -> int:
        raise NotImplementedError

    @property
    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        f = self.physics.max_force
        return np.full(2, -f), np.full(2, f)

    def reset(self, n_envs: int | None = None, seed: int = 0,
              seeds: Sequence | None = None) -> tuple[EnvState, np.ndarray]:
        if seeds is None:
            if n_envs is None or n_envs < 1:
                raise ValueError("n_envs must be positive")
            seeds = env_seeds(seed, n_envs)
        rngs = [np.random.default_rng(s) for s in seeds]
        state = self._reset(rngs)
        return state, self.observe(state)

    def _reset(self, rngs) -> EnvState:
        raise NotImplementedError

    def _integrate(self, state: EnvState, actions: np.ndarray) -> None:
        ph = self.physics
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != state.pos.shape:
            raise ValueError(f"actions must have shape {state.pos.shape}, got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise ValueError("non-finite action")
        u = np.clip(actions, -ph.max_force, ph.max_force)
        state.vel = (1.0 - ph.drag) * state.vel + u * ph.dt
        state.pos = np.clip(state.pos + state.vel * ph.dt, -1.0, 1.0)
        state.t += 1

    def step(self, state: EnvState, actions: np.ndarray) -> StepResult:
        if state.t >= state.horizon:
            raise RuntimeError("episode already finished; reset first")
        rewards = self._step(state, actions)
        return StepResult(self.observe(state), rewards, state.t >= state.horizon)

    def _step(self, state: EnvState, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def synthesize(self, state: EnvState, env: int, positions: np.ndarray) -> np.ndarray:
        """Observation an agent would receive at each of ``positions`` (K, 2), all else fixed."""
        raise NotImplementedError

    def context(self, state: EnvState, env: int) -> dict:
        """JSON-friendly description of what ``synthesize`` holds fixed."""
        return {}


class Navigation(Task):
    """Each agent is rewarded for closing the distance to its goal; all goals are observed.

    ``shared_goal`` rewards every agent for goal 0 instead of its own.
    """

    name = "navigation"

    def __init__(self, n_agents: int = 2, physics: Physics | None = None, shared_goal: bool = False):
        super().__init__(n_agents, physics)
        self.shared_goal = shared_goal
        self.n_goals = self.n_agents

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_goals

    def _reset(self, rngs) -> EnvState:
        n, k = self.n_agents, self.n_goals
        pos = np.stack([r.uniform(-1.0, 1.0, size=(n, 2)) for r in rngs])
        goals = np.stack([r.uniform(-1.0, 1.0, size=(k, 2)) for r in rngs])
        return EnvState(pos=pos, vel=np.zeros_like(pos), horizon=self.physics.horizon, goals=goals)

    def assigned_goals(self, state: EnvState) -> np.ndarray:
        if self.shared_goal:
            return np.repeat(state.goals[:, :1], self.n_agents, axis=1)
        return state.goals[:, : self.n_agents]

    def _step(self, state, actions):
        goals = self.assigned_goals(state)
        before = np.linalg.norm(state.pos - goals, axis=-1)
        self._integrate(state, actions)
        after = np.linalg.norm(state.pos - goals, axis=-1)
        return before - after

    def observe(self, state):
        rel = state.goals[:, None, :, :] - state.pos[:, :, None, :]     # (E, n, k, 2)
        return rel.reshape(state.n_envs, self.n_agents, 2 * self.n_goals)

    def synthesize(self, state, env, positions):
        positions = np.asarray(positions, dtype=np.float64)
        rel = state.goals[env][None, :, :] - positions[:, None, :]
        return rel.reshape(len(positions), 2 * self.n_goals)

    def context(self, state, env):
        return {"goals": state.goals[env].tolist()}


class Dispersion(Task):
    """Agents start at the origin; each food item pays the team +1 once, on first contact."""

    name = "dispersion"

    def __init__(self, n_agents: int = 4, physics: Physics | None = None, n_food: int | None = None):
        super().__init__(n_agents, physics)
        self.n_food = int(n_food) if n_food is not None else self.n_agents
        if self.n_food < 1:
            raise ValueError("need at least one food item")

    @property
    def obs_dim(self) -> int:
        return 3 * self.n_food

    def _reset(self, rngs):
        E, n = len(rngs), self.n_agents
        pos = np.zeros((E, n, 2))
        food = np.stack([r.uniform(-1.0, 1.0, size=(self.n_food, 2)) for r in rngs])
        return EnvState(pos=pos, vel=np.zeros_like(pos), horizon=self.physics.horizon,
                        food=food, eaten=np.zeros((E, self.n_food), dtype=bool))

    def _step(self, state, actions):
        self._integrate(state, actions)
        reach = self.physics.agent_radius + self.physics.food_radius
        dist = np.linalg.norm(state.pos[:, :, None, :] - state.food[:, None, :, :], axis=-1)  # (E, n, F)
        touched = (dist < reach).any(axis=1) & ~state.eaten
        state.eaten |= touched
        shared = touched.sum(axis=1).astype(np.float64)
        return np.repeat(shared[:, None], self.n_agents, axis=1)

    def _obs_at(self, food, eaten, positions):
        # food (F, 2), eaten (F,), positions (K, 2) -> (K, 3F)
        rel = food[None, :, :] - positions[:, None, :]
        flags = np.broadcast_to(eaten.astype(np.float64)[None, :, None], (len(positions), len(food), 1))
        return np.concatenate([rel, flags], axis=-1).reshape(len(positions), 3 * len(food))

    def observe(self, state):
        return np.stack([self._obs_at(state.food[e], state.eaten[e], state.pos[e]) for e in range(state.n_envs)])

    def synthesize(self, state, env, positions):
        return self._obs_at(state.food[env], state.eaten[env], np.asarray(positions, dtype=np.float64))

    def context(self, state, env):
        return {"food": state.food[env].tolist(), "eaten": state.eaten[env].tolist()}


class Sampling(Task):
    """Grid of i.i.d. U[0, 1] values; the team collects each cell's value once."""

    name = "sampling"

    def __init__(self, n_agents: int = 3, physics: Physics | None = None, grid_size: int = 20):
        super().__init__(n_agents, physics)
        if grid_size < 1:
            raise ValueError("grid_size must be positive")
        self.grid_size = int(grid_size)

    @property
    def obs_dim(self) -> int:
        return 11

    def cell_index(self, pos: np.ndarray) -> np.ndarray:
        G = self.grid_size
        return np.clip(np.floor((pos + 1.0) * G / 2.0).astype(np.int64), 0, G - 1)

    def _reset(self, rngs):
        E, n, G = len(rngs), self.n_agents, self.grid_size
        grid = np.stack([r.uniform(0.0, 1.0, size=(G, G)) for r in rngs])
        pos = np.zeros((E, n, 2))
        return EnvState(pos=pos, vel=np.zeros_like(pos), horizon=self.physics.horizon,
                        grid=grid.copy(), grid_init=grid, visited=np.zeros((E, G, G), dtype=bool))

    def _step(self, state, actions):
        self._integrate(state, actions)
        idx = self.cell_index(state.pos)                                  # (E, n, 2)
        E = state.n_envs
        fresh = np.zeros((E, self.grid_size, self.grid_size), dtype=bool)
        e_idx = np.repeat(np.arange(E), self.n_agents)
        fresh[e_idx, idx[..., 0].ravel(), idx[..., 1].ravel()] = True
        fresh &= ~state.visited
        gained = (state.grid * fresh).sum(axis=(1, 2))
        state.visited |= fresh
        state.grid[fresh] = 0.0
        return np.repeat(gained[:, None], self.n_agents, axis=1)

    def _obs_at(self, grid, positions):
        G = self.grid_size
        idx = self.cell_index(positions)
        padded = np.pad(grid, 1)
        vals = [padded[idx[:, 0] + 1 + dx, idx[:, 1] + 1 + dy] for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
        return np.concatenate([positions, np.stack(vals, axis=-1)], axis=-1)

    def observe(self, state):
        return np.stack([self._obs_at(state.grid[e], state.pos[e]) for e in range(state.n_envs)])

    def synthesize(self, state, env, positions):
        return self._obs_at(state.grid[env], np.asarray(positions, dtype=np.float64))

    def context(self, state, env):
        return {"grid_size": self.grid_size}


TASKS = {
    "navigation": lambda n, ph, **kw: Navigation(n, ph, **kw),
    "navigation_same_goal": lambda n, ph, **kw: Navigation(n, ph, shared_goal=True, **kw),
    "dispersion": lambda n, ph, **kw: Dispersion(n, ph, **kw),
    "sampling": lambda n, ph, **kw: Sampling(n, ph, **kw),
}

DEFAULT_AGENTS = {"navigation": 2, "navigation_same_goal": 2, "dispersion": 4, "sampling": 3}


def make_task(name: str, n_agents: int | None = None, physics: Physics | None = None, **kw) -> Task:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    n = DEFAULT_AGENTS[name] if n_agents is None else n_agents
    if name != "sampling" and n < 2 and name.startswith("navigation"):
        raise ValueError("navigation needs at least two agents")
    return TASKS[name](n, physics, **kw)


TRAJECTORY_COLUMNS = ("env", "step", "agent", "px", "py", "vx", "vy", "ax", "ay", "reward")


def trajectory_rows(state: EnvState, step: int, actions: np.ndarray, rewards: np.ndarray) -> list[tuple]:
    rows = []
    for e in range(state.n_envs):
        for i in range(state.pos.shape[1]):
            rows.append((e, step, i, *state.pos[e, i], *state.vel[e, i], *actions[e, i], rewards[e, i]))
    return rows


def write_trajectory_csv(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], *(repr(float(x)) for x in r[3:])])
