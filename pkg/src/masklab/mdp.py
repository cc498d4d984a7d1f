"""Exact finite-MDP substrate: tabular models, validity masks, and brute-force
policy evaluation (Q, V, advantage, discounted visitation).

Everything here is 64-bit and solved to tight tolerances (1e-10 or better) so
that downstream theory checks are not polluted by solver noise. Policy
evaluation uses a direct linear solve at desk scale and falls back to
fixed-point iteration for large state-action spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Direct linear solves below this many state-action pairs, iteration above.
DIRECT_SOLVE_LIMIT = 10_000
# Fixed-point iteration residual target for the large-MDP path.
ITERATION_RESIDUAL = 1e-12
# States with d_pi above this threshold count as visited.
VISITATION_EPS = 1e-9


def _locked(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with dense transition tensor P(s'|s,a) and reward R(s,a).

    transition has shape (S, A, S), reward (S, A). All rows of the transition
    tensor must sum to one within 1e-12, the discount must lie in (0, 1), and
    |R| must not exceed r_max.
    """

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    r_max: float
    initial_dist: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "transition", _locked(self.transition))
        object.__setattr__(self, "reward", _locked(self.reward))
        object.__setattr__(self, "initial_dist", _locked(self.initial_dist))
        S, A = self.num_states, self.num_actions
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward shape {self.reward.shape} != {(S, A)}")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist shape {self.initial_dist.shape} != {(S,)}")
        row_err = np.max(np.abs(self.transition.sum(axis=2) - 1.0))
        if row_err > 1e-12:
            raise ValueError(f"transition rows must sum to 1 (max error {row_err:.3e})")
        if np.any(self.transition < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if not (0.0 < self.discount < 1.0):
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        if np.max(np.abs(self.reward)) > self.r_max + 1e-12:
            raise ValueError("rewards exceed r_max")
        if abs(self.initial_dist.sum() - 1.0) > 1e-12 or np.any(self.initial_dist < 0):
            raise ValueError("initial_dist must be a probability vector")


@dataclass(frozen=True)
class AbstractState:
    """Symbolic view of a state: an ordered tuple of named boolean facts."""

    predicates: tuple

    def __post_init__(self):
        names = [name for name, _ in self.predicates]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate predicate names in {names}")

    def get(self, name: str) -> bool:
        for key, value in self.predicates:
            if key == name:
                return bool(value)
        raise KeyError(name)

    def bits(self) -> np.ndarray:
        return np.array([1.0 if v else 0.0 for _, v in self.predicates])


@dataclass(frozen=True)
class ValidityMask:
    """Boolean per-action validity vector for one state."""

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mask", _locked(self.mask, dtype=bool))

    @property
    def num_valid(self) -> int:
        return int(self.mask.sum())

    def any_valid(self) -> bool:
        return bool(self.mask.any())


@dataclass(frozen=True)
class VisitationPartition:
    """Discounted visitation d_pi plus the visited/unvisited state split."""

    d_pi: np.ndarray
    visited: np.ndarray
    unvisited: np.ndarray

    @classmethod
    def from_distribution(cls, d_pi: np.ndarray, eps: float = VISITATION_EPS):
        d_pi = _locked(d_pi)
        idx = np.arange(d_pi.shape[0])
        return cls(d_pi=d_pi, visited=idx[d_pi > eps], unvisited=idx[d_pi <= eps])


@dataclass
class DominanceReport:
    """Measured dominance gaps for invalid actions at visited states.

    margins[s, a] holds max_valid Q(s,.) - Q(s,a) for visited s and invalid a,
    NaN elsewhere. condition_i_ok means every such margin is strictly positive.

    The advantage bound A(s,a) <= -g*(1 - pi(a|s)) is provable with
    g = min_{a' != a} Q(s,a') - Q(s,a) (gap to the worst other action); that
    version is enforced at 1e-10 and its residual stored in lemma_residual.
    With g = margin (gap to the best valid action) the bound only holds when
    every other action ties the best valid one, e.g. with two actions; its
    residual is reported in best_gap_bound_residual without being enforced.
    """

    margins: np.ndarray
    worst_gaps: np.ndarray
    condition_i_ok: bool
    lemma_residual: float
    best_gap_bound_residual: float
    pairs: list = field(default_factory=list)


def _check_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.shape} != {(mdp.num_states, mdp.num_actions)}"
        )
    if np.any(policy < -1e-12):
        raise ValueError("policy has negative probabilities")
    row_err = np.max(np.abs(policy.sum(axis=1) - 1.0))
    if row_err > 1e-9:
        raise ValueError(f"policy rows must sum to 1 (max error {row_err:.3e})")
    return policy


def exact_state_values(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """V_pi via direct solve of (I - gamma P_pi) V = R_pi (or iteration)."""
    policy = _check_policy(mdp, policy)
    p_pi = np.einsum("sa,saz->sz", policy, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, mdp.reward)
    if mdp.num_states * mdp.num_actions <= DIRECT_SOLVE_LIMIT:
        eye = np.eye(mdp.num_states)
        return np.linalg.solve(eye - mdp.discount * p_pi, r_pi)
    v = np.zeros(mdp.num_states)
    while True:
        v_next = r_pi + mdp.discount * (p_pi @ v)
        if np.max(np.abs(v_next - v)) < ITERATION_RESIDUAL:
            return v_next
        v = v_next


def exact_q_values(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Q_pi(s,a) = R(s,a) + gamma * sum_s' P(s'|s,a) V_pi(s')."""
    v = exact_state_values(mdp, policy)
    return mdp.reward + mdp.discount * np.einsum("saz,z->sa", mdp.transition, v)


def exact_advantage(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """A_pi(s,a) = Q_pi(s,a) - sum_a' pi(a'|s) Q_pi(s,a')."""
    policy = _check_policy(mdp, policy)
    q = exact_q_values(mdp, policy)
    v = np.einsum("sa,sa->s", policy, q)
    return q - v[:, None]


def visitation_distribution(
    mdp: TabularMdp, policy: np.ndarray, eps: float = VISITATION_EPS
) -> VisitationPartition:
    """Solve d = (1-gamma) mu0 + gamma P_pi^T d and partition the states."""
    policy = _check_policy(mdp, policy)
    p_pi = np.einsum("sa,saz->sz", policy, mdp.transition)
    eye = np.eye(mdp.num_states)
    d = np.linalg.solve(eye - mdp.discount * p_pi.T, (1.0 - mdp.discount) * mdp.initial_dist)
    if d.min() < -1e-12:
        raise RuntimeError(f"visitation solve produced negative mass {d.min():.3e}")
    d = np.where(d < 0.0, 0.0, d)
    return VisitationPartition.from_distribution(d, eps=eps)


def dominance_gap_check(
    mdp: TabularMdp, policy: np.ndarray, masks: np.ndarray
) -> DominanceReport:
    """Measure the dominance gap for every (visited state, invalid action) pair.

    masks is a boolean (S, A) table of the validity oracle. Also verifies the
    advantage bound A(s,a) <= -margin(s,a) * (1 - pi(a|s)) at 1e-10.
    """
    policy = _check_policy(mdp, policy)
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("mask table shape mismatch")
    q = exact_q_values(mdp, policy)
    adv = q - np.einsum("sa,sa->s", policy, q)[:, None]
    part = visitation_distribution(mdp, policy)

    margins = np.full((mdp.num_states, mdp.num_actions), np.nan)
    worst_gaps = np.full((mdp.num_states, mdp.num_actions), np.nan)
    pairs = []
    condition_i = True
    lemma_residual = 0.0
    best_gap_residual = 0.0
    for s in part.visited:
        valid = masks[s]
        if not valid.any():
            raise RuntimeError(f"visited state {s} has no valid action")
        best_valid = np.max(q[s][valid])
        for a in np.flatnonzero(~valid):
            gap = best_valid - q[s, a]
            margins[s, a] = gap
            pairs.append((int(s), int(a), float(gap)))
            if gap <= 0.0:
                condition_i = False
            others = np.delete(q[s], a)
            wgap = float(np.min(others) - q[s, a])
            worst_gaps[s, a] = wgap
            bound = -wgap * (1.0 - policy[s, a])
            lemma_residual = max(lemma_residual, float(adv[s, a] - bound))
            stated = -gap * (1.0 - policy[s, a])
            best_gap_residual = max(best_gap_residual, float(adv[s, a] - stated))
    if lemma_residual > 1e-10:
        raise RuntimeError(
            f"advantage bound violated by {lemma_residual:.3e} (> 1e-10)"
        )
    return DominanceReport(
        margins=margins,
        worst_gaps=worst_gaps,
        condition_i_ok=condition_i,
        lemma_residual=lemma_residual,
        best_gap_bound_residual=best_gap_residual,
        pairs=pairs,
    )
