"""Toy gridworld environments with ground-truth validity oracles.

Both environments instantiate the rarely-valid-critical-action regime: a
corridor whose goal-reaching action (descend / open_door) is valid only at a
handful of states. Invalid actions are silent no-ops with zero reward by
default; an optional penalty per invalid action is exposed as config.

Also provides the correlated feature maps used by the linear-logit theory
runs, including the rho dial that switches feature alignment on and off.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mdp import AbstractState, TabularMdp, ValidityMask

STATE_SPACE_LIMIT = 100_000


# ---------------------------------------------------------------------------
# StaircaseCorridor
# ---------------------------------------------------------------------------

LEFT, RIGHT, DESCEND, NOOP = 0, 1, 2, 3


@dataclass(frozen=True)
class StaircaseConfig:
    length: int = 8
    num_actions: int = 4  # >= 4; actions beyond the base set are distractors
    horizon: int = 64
    goal_reward: float = 1.0
    invalid_penalty: float = 0.0

    def __post_init__(self):
        if self.num_actions < 4:
            raise ValueError("StaircaseCorridor needs at least 4 actions")
        if self.length < 2:
            raise ValueError("corridor length must be >= 2")


class StaircaseCorridor:
    """1-D corridor with a staircase in the last cell.

    descend is valid only on the staircase cell and ends the episode with the
    goal reward; movement is valid when it stays in bounds; noop is always
    valid; any extra actions are always-invalid distractors.
    """

    def __init__(self, config: StaircaseConfig = StaircaseConfig()):
        self.config = config
        self.num_actions = config.num_actions
        self.staircase_cell = config.length - 1
        self.observation_dim = config.length + 3
        self.reset()

    def reset(self) -> np.ndarray:
        self.cell = 0
        self.steps = 0
        self.done = False
        return self.observation()

    # -- symbolic view ------------------------------------------------------

    def abstract_state(self) -> AbstractState:
        return AbstractState(
            (
                ("on_staircase", self.cell == self.staircase_cell),
                ("can_left", self.cell > 0),
                ("can_right", self.cell < self.config.length - 1),
            )
        )

    def validity_mask(self) -> ValidityMask:
        return self.validity_mask_for_cell(self.cell)

    def validity_mask_for_cell(self, cell: int) -> ValidityMask:
        mask = np.zeros(self.num_actions, dtype=bool)
        mask[LEFT] = cell > 0
        mask[RIGHT] = cell < self.config.length - 1
        mask[DESCEND] = cell == self.staircase_cell
        mask[NOOP] = True
        return ValidityMask(mask)

    # -- dynamics ------------------------------------------------------------

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range")
        valid = bool(self.validity_mask().mask[action])
        reward = 0.0
        if not valid:
            # Bumping a wall consumes the turn (plain no-op); only invalid
            # non-movement attempts (descend, distractors) draw the penalty.
            if action not in (LEFT, RIGHT):
                reward = self.config.invalid_penalty
        elif action == LEFT:
            self.cell -= 1
        elif action == RIGHT:
            self.cell += 1
        elif action == DESCEND:
            reward = self.config.goal_reward
            self.done = True
        self.steps += 1
        if self.steps >= self.config.horizon:
            self.done = True
        return self.observation(), reward, self.done, valid

    def observation(self) -> np.ndarray:
        return self.observation_for_cell(self.cell)

    def observation_for_cell(self, cell: int) -> np.ndarray:
        obs = np.zeros(self.observation_dim)
        obs[cell] = 1.0
        obs[self.config.length + 0] = 1.0 if cell == self.staircase_cell else 0.0
        obs[self.config.length + 1] = 1.0 if cell > 0 else 0.0
        obs[self.config.length + 2] = 1.0 if cell < self.config.length - 1 else 0.0
        return obs

    def state_id(self) -> int:
        return self.cell

    # -- tabular bridge ------------------------------------------------------

    def enumerate_states(self):
        return list(range(self.config.length))

    def target_states(self):
        """States where descend is valid (the probe set)."""
        return [self.staircase_cell]

    @property
    def target_action(self) -> int:
        return DESCEND

    def to_tabular(self, gamma: float = 0.99):
        return _env_to_tabular(self, gamma)

    def observation_for_state(self, state_id: int) -> np.ndarray:
        return self.observation_for_cell(state_id)

    def validity_mask_for_state(self, state_id: int) -> ValidityMask:
        return self.validity_mask_for_cell(state_id)

    def _snapshot(self):
        return (self.cell, self.steps, self.done)

    def _restore(self, snap):
        self.cell, self.steps, self.done = snap

    def _set_state(self, state_id: int):
        self.cell = state_id
        self.steps = 0
        self.done = False


# ---------------------------------------------------------------------------
# DoorCorridor
# ---------------------------------------------------------------------------

D_LEFT, D_RIGHT, D_UP, D_DOWN, OPEN_DOOR, SEARCH_WAIT = 0, 1, 2, 3, 4, 5


@dataclass(frozen=True)
class DoorConfig:
    num_cells: int = 15
    door_cells: tuple = (5, 10)
    horizon: int = 64
    goal_reward: float = 1.0
    invalid_penalty: float = 0.0

    def __post_init__(self):
        for c in self.door_cells:
            if not 0 < c < self.num_cells - 1:
                raise ValueError(f"door cell {c} must be interior")


class DoorCorridor:
    """Corridor of cells with closed doors blocking passage.

    Movement into a wall or a closed-door cell is invalid; open_door is valid
    only when a neighboring cell holds a closed door and opens every adjacent
    closed door; up/down are blocked by the corridor walls everywhere;
    search_wait is always valid. The goal is the last cell, reward +1.
    """

    num_actions = 6

    def __init__(self, config: DoorConfig = DoorConfig()):
        self.config = config
        self.observation_dim = config.num_cells + len(config.door_cells) + 3
        self.reset()

    def reset(self) -> np.ndarray:
        self.cell = 0
        self.doors_open = tuple(False for _ in self.config.door_cells)
        self.steps = 0
        self.done = False
        return self.observation()

    # -- symbolic view ------------------------------------------------------

    def _closed_door_at(self, cell: int, doors_open) -> bool:
        for door_cell, is_open in zip(self.config.door_cells, doors_open):
            if door_cell == cell and not is_open:
                return True
        return False

    def _adjacent_closed_door(self, cell: int, doors_open) -> bool:
        return self._closed_door_at(cell - 1, doors_open) or self._closed_door_at(
            cell + 1, doors_open
        )

    def abstract_state(self) -> AbstractState:
        preds = [
            ("adjacent_closed_door", self._adjacent_closed_door(self.cell, self.doors_open)),
            ("at_goal", self.cell == self.config.num_cells - 1),
        ]
        for i, is_open in enumerate(self.doors_open):
            preds.append((f"door_{i}_open", is_open))
        return AbstractState(tuple(preds))

    def validity_mask(self) -> ValidityMask:
        return self.validity_mask_for_state((self.cell, self.doors_open))

    def validity_mask_for_state(self, state) -> ValidityMask:
        cell, doors_open = state
        mask = np.zeros(self.num_actions, dtype=bool)
        mask[D_LEFT] = cell > 0 and not self._closed_door_at(cell - 1, doors_open)
        mask[D_RIGHT] = cell < self.config.num_cells - 1 and not self._closed_door_at(
            cell + 1, doors_open
        )
        # up/down hit the corridor walls everywhere
        mask[OPEN_DOOR] = self._adjacent_closed_door(cell, doors_open)
        mask[SEARCH_WAIT] = True
        return ValidityMask(mask)

    # -- dynamics ------------------------------------------------------------

    def step(self, action: int):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range")
        valid = bool(self.validity_mask().mask[action])
        reward = 0.0
        if not valid:
            # Movement into walls/closed doors consumes the turn; only the
            # invalid open_door attempt draws the penalty.
            if action == OPEN_DOOR:
                reward = self.config.invalid_penalty
        elif action == D_LEFT:
            self.cell -= 1
        elif action == D_RIGHT:
            self.cell += 1
            if self.cell == self.config.num_cells - 1:
                reward = self.config.goal_reward
                self.done = True
        elif action == OPEN_DOOR:
            opened = list(self.doors_open)
            for i, door_cell in enumerate(self.config.door_cells):
                if door_cell in (self.cell - 1, self.cell + 1) and not opened[i]:
                    opened[i] = True
            self.doors_open = tuple(opened)
        self.steps += 1
        if self.steps >= self.config.horizon:
            self.done = True
        return self.observation(), reward, self.done, valid

    def observation(self) -> np.ndarray:
        return self.observation_for_state((self.cell, self.doors_open))

    def observation_for_state(self, state) -> np.ndarray:
        cell, doors_open = state
        C = self.config.num_cells
        obs = np.zeros(self.observation_dim)
        obs[cell] = 1.0
        for i, is_open in enumerate(doors_open):
            obs[C + i] = 1.0 if is_open else 0.0
        base = C + len(doors_open)
        obs[base + 0] = 1.0 if self._adjacent_closed_door(cell, doors_open) else 0.0
        obs[base + 1] = (
            1.0 if cell > 0 and not self._closed_door_at(cell - 1, doors_open) else 0.0
        )
        obs[base + 2] = (
            1.0
            if cell < C - 1 and not self._closed_door_at(cell + 1, doors_open)
            else 0.0
        )
        return obs

    def state_id(self):
        return (self.cell, self.doors_open)

    # -- tabular bridge ------------------------------------------------------

    def enumerate_states(self):
        """Breadth-first enumeration of states reachable from the start."""
        start = (0, tuple(False for _ in self.config.door_cells))
        seen = {start}
        frontier = [start]
        order = [start]
        while frontier:
            state = frontier.pop(0)
            for action in range(self.num_actions):
                nxt, _, terminal = self._transition(state, action)
                if terminal or nxt in seen:
                    continue
                seen.add(nxt)
                frontier.append(nxt)
                order.append(nxt)
                if len(order) > STATE_SPACE_LIMIT:
                    raise RuntimeError("state space exceeds enumeration limit")
        return order

    def _transition(self, state, action):
        """Pure transition used by enumeration: (next_state, reward, terminal)."""
        cell, doors_open = state
        mask = self.validity_mask_for_state(state).mask
        if not mask[action]:
            penalty = self.config.invalid_penalty if action == OPEN_DOOR else 0.0
            return state, penalty, False
        if action == D_LEFT:
            return (cell - 1, doors_open), 0.0, False
        if action == D_RIGHT:
            if cell + 1 == self.config.num_cells - 1:
                return (cell + 1, doors_open), self.config.goal_reward, True
            return (cell + 1, doors_open), 0.0, False
        if action == OPEN_DOOR:
            opened = list(doors_open)
            for i, door_cell in enumerate(self.config.door_cells):
                if door_cell in (cell - 1, cell + 1) and not opened[i]:
                    opened[i] = True
            return (cell, tuple(opened)), 0.0, False
        return state, 0.0, False

    def target_states(self):
        """Reachable states where open_door is valid (the probe set)."""
        return [
            s
            for s in self.enumerate_states()
            if self.validity_mask_for_state(s).mask[OPEN_DOOR]
        ]

    @property
    def target_action(self) -> int:
        return OPEN_DOOR

    def to_tabular(self, gamma: float = 0.99):
        return _env_to_tabular(self, gamma)

    def _snapshot(self):
        return (self.cell, self.doors_open, self.steps, self.done)

    def _restore(self, snap):
        self.cell, self.doors_open, self.steps, self.done = snap

    def _set_state(self, state):
        self.cell, self.doors_open = state
        self.steps = 0
        self.done = False


# ---------------------------------------------------------------------------
# env -> TabularMdp
# ---------------------------------------------------------------------------

def _env_to_tabular(env, gamma: float):
    """Enumerate reachable states and replay step() to fill the tensors.

    Returns (mdp, mask_table, state_index) where the last tabular state is an
    absorbing terminal and state_index maps env state ids to indices.
    """
    states = env.enumerate_states()
    if len(states) > STATE_SPACE_LIMIT:
        raise RuntimeError("state space exceeds tabular limit")
    index = {s: i for i, s in enumerate(states)}
    S = len(states) + 1  # + absorbing terminal
    A = env.num_actions
    terminal = S - 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    masks = np.zeros((S, A), dtype=bool)
    snap = env._snapshot()
    for s, state in enumerate(states):
        masks[s] = env.validity_mask_for_state(state).mask
        if not masks[s].any():
            raise RuntimeError(f"state {state} has no valid action")
        for a in range(A):
            env._set_state(state)
            _, reward, done, _ = env.step(a)
            # Horizon truncation is episode bookkeeping, not MDP structure:
            # only goal transitions are terminal here.
            goal_done = done and env.steps < env.config.horizon
            nxt = terminal if goal_done else index[env.state_id()]
            P[s, a, nxt] = 1.0
            R[s, a] = reward
    env._restore(snap)
    P[terminal, :, terminal] = 1.0
    masks[terminal, :] = True
    mu = np.zeros(S)
    mu[0] = 1.0
    r_max = max(float(np.max(np.abs(R))), 1e-12)
    mdp = TabularMdp(S, A, P, R, gamma, r_max, mu)
    return mdp, masks, index


# ---------------------------------------------------------------------------
# Linear-theory feature maps and blocked-corridor MDPs
# ---------------------------------------------------------------------------

def correlated_features(num_states: int, target_state: int, rho: float) -> np.ndarray:
    """Feature matrix (S x S) with a correlation dial for the target state.

    Non-target states get orthonormal one-hot features. The target state's
    feature is rho * u + sqrt(1 - rho^2) * e_target, where u is the normalized
    uniform direction over the non-target states. rho = 0 makes the target
    feature exactly orthogonal to every other state's feature; rho = 1 aligns
    it fully with the visited subspace.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if not 0 <= target_state < num_states:
        raise ValueError("target_state out of range")
    phi = np.eye(num_states)
    if rho > 0.0:
        others = np.ones(num_states)
        others[target_state] = 0.0
        u = others / np.linalg.norm(others)
        phi[target_state] = rho * u + np.sqrt(1.0 - rho * rho) * np.eye(num_states)[
            target_state
        ]
    return phi


def blocked_corridor(
    length: int = 5,
    num_actions: int = 4,
    gamma: float = 0.9,
    goal_reward: float = 1.0,
):
    """Continuing corridor MDP whose staircase state exists but is unreachable.

    Cells 0..length-1 support left/right/noop; moving right off the last cell
    collects the goal reward and restarts at cell 0 (a continuing task, so
    every visited state keeps a strictly positive value and invalid no-ops
    stay strictly dominated). The staircase state (index length) receives no
    incoming transitions, so its visitation is exactly zero: it is the
    first-valid-occurrence state for descend, which is invalid at every
    visited cell. Extra actions are always-invalid no-op distractors.

    Returns (mdp, mask_table, target_state, target_action).
    """
    if num_actions < 4:
        raise ValueError("need at least the four base actions")
    S = length + 1  # cells plus the unreachable staircase
    target = length
    P = np.zeros((S, num_actions, S))
    R = np.zeros((S, num_actions))
    masks = np.zeros((S, num_actions), dtype=bool)
    for s in range(length):
        for a in range(num_actions):
            P[s, a, s] = 1.0  # default: stay (no-op)
        P[s, LEFT, s] = 0.0
        P[s, LEFT, max(s - 1, 0)] = 1.0
        P[s, RIGHT, s] = 0.0
        if s < length - 1:
            P[s, RIGHT, s + 1] = 1.0
        else:
            P[s, RIGHT, 0] = 1.0
            R[s, RIGHT] = goal_reward
        masks[s, LEFT] = s > 0
        masks[s, RIGHT] = True
        masks[s, NOOP] = True
    # Staircase: descend restarts the corridor with the goal reward; it is the
    # only goal-reaching action there. Unreachable from the visited cells.
    for a in range(num_actions):
        P[target, a, target] = 1.0
    P[target, DESCEND, target] = 0.0
    P[target, DESCEND, 0] = 1.0
    R[target, DESCEND] = goal_reward
    masks[target, DESCEND] = True
    masks[target, NOOP] = True
    mu = np.zeros(S)
    mu[0] = 1.0
    mdp = TabularMdp(S, num_actions, P, R, gamma, max(goal_reward, 1.0), mu)
    return mdp, masks, target, DESCEND


def make_staircase(config=None, **overrides) -> StaircaseCorridor:
    config = config or StaircaseConfig()
    if overrides:
        config = replace(config, **overrides)
    return StaircaseCorridor(config)


def make_door_corridor(config=None, **overrides) -> DoorCorridor:
    config = config or DoorConfig()
    if overrides:
        config = replace(config, **overrides)
    return DoorCorridor(config)
