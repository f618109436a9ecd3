"""FourRooms and sparse MountainCar environments.

Both environments are value-like: dynamics live in :meth:`step`, which is a
pure function of ``(state, action, rng)``.  A thin stateful facade
(:meth:`reset` / :meth:`advance`) tracks the current state and the episode
step cap for the training loops.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Any

import numpy as np

from .validation import check_count, check_distribution, check_probability, check_random_state

FOUR_ROOMS_LAYOUT = """\
wwwwwwwwwwwww
w     w     w
w     w     w
w           w
w     w     w
w     w     w
ww wwww     w
w     www www
w     w     w
w     w     w
w           w
w     w     w
wwwwwwwwwwwww
"""

# (row, col) deltas for up, down, left, right
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

HALLWAYS = {
    "north": (3, 6),  # top-left <-> top-right
    "west": (6, 2),  # top-left <-> bottom-left
    "east": (7, 9),  # top-right <-> bottom-right ("right hallway")
    "south": (10, 6),  # bottom-left <-> bottom-right
}

ROOMS = {
    "top_left": ((1, 6), (1, 6)),
    "top_right": ((1, 7), (7, 12)),
    "bottom_left": ((7, 12), (1, 6)),
    "bottom_right": ((8, 12), (7, 12)),
}

ROOM_HALLWAYS = {
    "top_left": ("north", "west"),
    "top_right": ("north", "east"),
    "bottom_left": ("west", "south"),
    "bottom_right": ("east", "south"),
}


class EnvError(RuntimeError):
    pass


@dataclass
class StepOutcome:
    next_state: Any
    reward: float
    done: bool
    # True when the episode ended in an absorbing state rather than at the step cap
    terminal: bool = False


@dataclass
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A) expected reward
    start_dist: np.ndarray
    terminal: np.ndarray
    discount: float = 0.99

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.start_dist = check_distribution(self.start_dist, "start_dist")
        self.terminal = np.asarray(self.terminal, dtype=bool)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A):
            raise ValueError("inconsistent TabularMdp shapes")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be distributions")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


class FourRoomsEnv:
    """The 13x13 four-room gridworld with 104 navigable cells.

    With probability ``action_success_prob`` the chosen move executes,
    otherwise one of the other three moves is taken uniformly.  Reaching the
    goal pays +1 and ends the episode.
    """

    name = "four_rooms"
    n_actions = 4

    def __init__(self, action_success_prob=2 / 3, transfer_success_prob=0.5,
                 max_episode_steps=1000, goal=None, seed=None):
        self.action_success_prob = check_probability(action_success_prob, "action_success_prob", low_open=True)
        self.transfer_success_prob = check_probability(transfer_success_prob, "transfer_success_prob",
                                                       low_open=True)
        self.max_episode_steps = check_count(max_episode_steps, "max_episode_steps")
        self.rng = check_random_state(seed)
        self.grid = np.array([[c == "w" for c in line] for line in FOUR_ROOMS_LAYOUT.splitlines()])
        self.cells = [(int(r), int(c)) for r, c in np.argwhere(~self.grid)]
        self._index = {cell: i for i, cell in enumerate(self.cells)}
        self.n_states = len(self.cells)
        if goal is None:
            goal = self._index[HALLWAYS["east"]]
        if not 0 <= goal < self.n_states:
            raise ValueError(f"goal {goal} is not a navigable cell")
        self.goal = int(goal)
        self.phase = "source"
        # successor of each (state, move) ignoring noise; walls leave the agent in place
        self._succ = np.empty((self.n_states, 4), dtype=np.int64)
        for s, (r, c) in enumerate(self.cells):
            for a, (dr, dc) in enumerate(MOVES):
                nxt = (r + dr, c + dc)
                self._succ[s, a] = self._index.get(nxt, s)
        self._succ_list = self._succ.tolist()
        self.state = None
        self.t = 0

    # --- geometry helpers -------------------------------------------------
    def state_of(self, cell) -> int:
        return self._index[tuple(cell)]

    def cell_of(self, state) -> tuple[int, int]:
        return self.cells[state]

    def room_states(self, room: str) -> list[int]:
        (r0, r1), (c0, c1) = ROOMS[room]
        return [s for s, (r, c) in enumerate(self.cells) if r0 <= r < r1 and c0 <= c < c1]

    def hallway_state(self, name: str) -> int:
        return self._index[HALLWAYS[name]]

    def shortest_path_actions(self, target: int) -> np.ndarray:
        """First action of a shortest path to ``target`` (ties broken by action order); -1 at target."""
        dist = np.full(self.n_states, -1)
        dist[target] = 0
        queue = deque([target])
        while queue:
            s = queue.popleft()
            for a in range(4):
                # moves are symmetric, so neighbours of s are successors of s
                n = self._succ[s, a]
                if n != s and dist[n] < 0:
                    dist[n] = dist[s] + 1
                    queue.append(n)
        best = np.full(self.n_states, -1)
        for s in range(self.n_states):
            if s == target:
                continue
            for a in range(4):
                n = self._succ[s, a]
                if n != s and dist[n] == dist[s] - 1:
                    best[s] = a
                    break
        return best

    # --- dynamics ----------------------------------------------------------
    def is_terminal(self, state) -> bool:
        return state == self.goal

    def step(self, state, action, rng=None) -> StepOutcome:
        if not 0 <= action < 4:
            raise ValueError(f"invalid action {action}")
        if state == self.goal:
            raise EnvError("cannot step from the terminal goal state")
        rng = self.rng if rng is None else rng
        if rng.random() >= self.action_success_prob:
            other = int(rng.random() * 3)
            action = other if other < action else other + 1
        nxt = self._succ_list[state][action]
        if nxt == self.goal:
            return StepOutcome(nxt, 1.0, True, True)
        return StepOutcome(nxt, 0.0, False, False)

    def reset(self, rng=None) -> int:
        rng = self.rng if rng is None else rng
        s = int(rng.random() * (self.n_states - 1))
        self.state = s if s < self.goal else s + 1
        self.t = 0
        return self.state

    def advance(self, action, rng=None) -> StepOutcome:
        """Step the tracked state, ending the episode at ``max_episode_steps``."""
        out = self.step(self.state, action, rng)
        self.t += 1
        self.state = out.next_state
        if self.t >= self.max_episode_steps:
            out.done = True
        return out

    def apply_transfer(self) -> "FourRoomsEnv":
        if self.phase != "source":
            raise EnvError("transfer already applied")
        room = self.room_states("bottom_left")
        self.goal = int(room[int(self.rng.integers(len(room)))])
        self.action_success_prob = self.transfer_success_prob
        self.phase = "transfer"
        return self

    def to_tabular(self, discount=0.99) -> TabularMdp:
        S, p = self.n_states, self.action_success_prob
        P = np.zeros((S, 4, S))
        for s in range(S):
            if s == self.goal:
                P[s, :, s] = 1.0
                continue
            for a in range(4):
                for executed in range(4):
                    prob = p if executed == a else (1.0 - p) / 3.0
                    P[s, a, self._succ[s, executed]] += prob
        R = P[:, :, self.goal].copy()
        R[self.goal] = 0.0
        start = np.full(S, 1.0 / (S - 1))
        start[self.goal] = 0.0
        terminal = np.zeros(S, dtype=bool)
        terminal[self.goal] = True
        return TabularMdp(P, R, start, terminal, discount)


class MountainCarEnv:
    """Mountain car with a sparse +1 reward on reaching the goal.

    Actions 0, 1, 2 push left, coast and push right.  Gravity is scaled by
    ``gravity_scale`` (doubled by :meth:`apply_transfer`).
    """

    name = "mountain_car_sparse"
    n_actions = 3
    min_position, max_position = -1.2, 0.6
    max_speed = 0.07
    force = 0.001
    gravity = 0.0025

    def __init__(self, gravity_scale=1.0, goal_position=0.5, max_episode_steps=2000, seed=None):
        if not gravity_scale > 0:
            raise ValueError("gravity_scale must be positive")
        if not self.min_position < goal_position <= self.max_position:
            raise ValueError("goal_position out of range")
        self.gravity_scale = float(gravity_scale)
        self.goal_position = float(goal_position)
        self.max_episode_steps = check_count(max_episode_steps, "max_episode_steps")
        self.rng = check_random_state(seed)
        self.phase = "source"
        self.state = None
        self.t = 0

    def is_terminal(self, state) -> bool:
        return state[0] >= self.goal_position

    def step(self, state, action, rng=None) -> StepOutcome:
        if not 0 <= action < 3:
            raise ValueError(f"invalid action {action}")
        position, velocity = state
        if position >= self.goal_position:
            raise EnvError("cannot step from a terminal state")
        velocity += (action - 1) * self.force - self.gravity_scale * self.gravity * math.cos(3 * position)
        velocity = min(max(velocity, -self.max_speed), self.max_speed)
        position += velocity
        position = min(max(position, self.min_position), self.max_position)
        if position == self.min_position and velocity < 0:
            velocity = 0.0
        if position >= self.goal_position:
            return StepOutcome((position, velocity), 1.0, True, True)
        return StepOutcome((position, velocity), 0.0, False, False)

    def reset(self, rng=None):
        rng = self.rng if rng is None else rng
        self.state = (float(rng.uniform(-0.6, -0.4)), 0.0)
        self.t = 0
        return self.state

    def advance(self, action, rng=None) -> StepOutcome:
        out = self.step(self.state, action, rng)
        self.t += 1
        self.state = out.next_state
        if self.t >= self.max_episode_steps:
            out.done = True
        return out

    def apply_transfer(self) -> "MountainCarEnv":
        if self.phase != "source":
            raise EnvError("transfer already applied")
        self.gravity_scale *= 2.0
        self.phase = "transfer"
        return self

    def to_tabular(self, discount=0.99):
        raise EnvError("mountain car has a continuous state space")


REGISTRY = {FourRoomsEnv.name: FourRoomsEnv, MountainCarEnv.name: MountainCarEnv}


def make_env(spec, seed=None):
    """Build an environment from a name or a ``{"name": ..., "params": {...}}`` descriptor."""
    if isinstance(spec, str):
        name, params = spec, {}
    else:
        name, params = spec["name"], dict(spec.get("params", {}))
    if name not in REGISTRY:
        raise ValueError(f"unknown environment {name!r}; expected one of {sorted(REGISTRY)}")
    return REGISTRY[name](seed=seed, **params)


def env_step(env, state, action, rng) -> StepOutcome:
    return env.step(state, action, rng)


def apply_transfer(env):
    return env.apply_transfer()


def to_tabular(env, discount=0.99) -> TabularMdp:
    return env.to_tabular(discount)
