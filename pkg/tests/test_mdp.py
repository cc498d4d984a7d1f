import numpy as np
import pytest

from masklab.mdp import (
    AbstractState,
    TabularMdp,
    ValidityMask,
    VisitationPartition,
    dominance_gap_check,
    exact_advantage,
    exact_q_values,
    exact_state_values,
    visitation_distribution,
)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def value_iteration_oracle(mdp, policy, tol=1e-14, max_iters=2_000_000):
    """Plain Bellman iteration for Q_pi, independent of the linear-solve path."""
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(max_iters):
        v = np.einsum("sa,sa->s", policy, q)
        q_next = mdp.reward + mdp.discount * np.einsum("saz,z->sa", mdp.transition, v)
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next
    raise AssertionError("oracle did not converge")


def visitation_power_series_oracle(mdp, policy, terms=2000):
    """Truncated sum (1-gamma) * sum_t gamma^t mu0 P_pi^t."""
    p_pi = np.einsum("sa,saz->sz", policy, mdp.transition)
    d = np.zeros(mdp.num_states)
    mu = mdp.initial_dist.copy()
    for t in range(terms):
        d += (1.0 - mdp.discount) * (mdp.discount**t) * mu
        mu = mu @ p_pi
    return d


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

def single_state_mdp(gamma=0.5, reward=1.0, n_actions=2):
    P = np.ones((1, n_actions, 1))
    R = np.full((1, n_actions), reward)
    return TabularMdp(1, n_actions, P, R, gamma, max(abs(reward), 1.0), np.array([1.0]))


def two_state_chain(gamma=0.5):
    # s0 -> s1 deterministically under every action, s1 absorbing.
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    P[1, :, 1] = 1.0
    R = np.zeros((2, 2))
    return TabularMdp(2, 2, P, R, gamma, 1.0, np.array([1.0, 0.0]))


def corridor_3_mdp(gamma=0.9):
    """3-cell corridor, terminal reward 1 for moving right off the last cell."""
    S, A = 4, 2  # cells 0..2 plus absorbing terminal; actions left/right
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    for s in range(3):
        P[s, 0, max(s - 1, 0)] = 1.0
        if s < 2:
            P[s, 1, s + 1] = 1.0
        else:
            P[s, 1, 3] = 1.0
            R[s, 1] = 1.0
    P[3, :, 3] = 1.0
    mu = np.zeros(S)
    mu[0] = 1.0
    return TabularMdp(S, A, P, R, gamma, 1.0, mu)


def random_mdp(rng, n_states=5, n_actions=3, gamma=0.85):
    P = rng.random((n_states, n_actions, n_states))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(-1, 1, size=(n_states, n_actions))
    mu = rng.random(n_states)
    mu /= mu.sum()
    return TabularMdp(n_states, n_actions, P, R, gamma, 1.0, mu)


def uniform_policy(mdp):
    return np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)


# ---------------------------------------------------------------------------
# TabularMdp validation
# ---------------------------------------------------------------------------

class TestTabularMdp:
    def test_rejects_non_stochastic_rows(self):
        P = np.zeros((1, 1, 1))
        with pytest.raises(ValueError, match="sum to 1"):
            TabularMdp(1, 1, P, np.zeros((1, 1)), 0.9, 1.0, np.array([1.0]))

    def test_rejects_bad_discount(self):
        P = np.ones((1, 1, 1))
        for gamma in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError, match="discount"):
                TabularMdp(1, 1, P, np.zeros((1, 1)), gamma, 1.0, np.array([1.0]))

    def test_rejects_reward_above_r_max(self):
        P = np.ones((1, 1, 1))
        with pytest.raises(ValueError, match="r_max"):
            TabularMdp(1, 1, P, np.array([[2.0]]), 0.9, 1.0, np.array([1.0]))

    def test_rejects_bad_initial_dist(self):
        P = np.ones((1, 1, 1))
        with pytest.raises(ValueError, match="initial_dist"):
            TabularMdp(1, 1, P, np.zeros((1, 1)), 0.9, 1.0, np.array([0.5]))

    def test_arrays_are_immutable(self):
        mdp = single_state_mdp()
        with pytest.raises(ValueError):
            mdp.reward[0, 0] = 5.0


class TestAbstractState:
    def test_rejects_duplicate_names(self):
        with pytest.raises(ValueError):
            AbstractState((("on_staircase", True), ("on_staircase", False)))

    def test_get_and_bits(self):
        z = AbstractState((("on_staircase", True), ("can_left", False)))
        assert z.get("on_staircase") is True
        assert np.array_equal(z.bits(), np.array([1.0, 0.0]))
        with pytest.raises(KeyError):
            z.get("missing")


class TestValidityMask:
    def test_counts(self):
        m = ValidityMask(np.array([True, False, True]))
        assert m.num_valid == 2 and m.any_valid()
        assert not ValidityMask(np.array([False])).any_valid()


# ---------------------------------------------------------------------------
# exact_q_values
# ---------------------------------------------------------------------------

class TestExactQValues:
    def test_single_state_geometric_series(self):
        mdp = single_state_mdp(gamma=0.5, reward=1.0)
        q = exact_q_values(mdp, uniform_policy(mdp))
        assert np.allclose(q, 2.0, atol=1e-12)

    def test_zero_reward_chain(self):
        mdp = two_state_chain()
        q = exact_q_values(mdp, uniform_policy(mdp))
        assert np.allclose(q, 0.0, atol=1e-14)

    def test_corridor_matches_value_iteration_oracle(self):
        mdp = corridor_3_mdp()
        pi = uniform_policy(mdp)
        q = exact_q_values(mdp, pi)
        q_oracle = value_iteration_oracle(mdp, pi)
        assert np.max(np.abs(q - q_oracle)) < 1e-10

    def test_bellman_residual_on_random_mdps(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            mdp = random_mdp(rng)
            pi = rng.random((mdp.num_states, mdp.num_actions))
            pi /= pi.sum(axis=1, keepdims=True)
            q = exact_q_values(mdp, pi)
            v = np.einsum("sa,sa->s", pi, q)
            residual = mdp.reward + mdp.discount * np.einsum(
                "saz,z->sa", mdp.transition, v
            ) - q
            assert np.max(np.abs(residual)) < 1e-10

    def test_non_stochastic_policy_rejected(self):
        mdp = single_state_mdp()
        with pytest.raises(ValueError, match="policy"):
            exact_q_values(mdp, np.array([[0.7, 0.6]]))


# ---------------------------------------------------------------------------
# exact_advantage
# ---------------------------------------------------------------------------

class TestExactAdvantage:
    def test_zero_reward_gives_zero_advantage(self):
        mdp = two_state_chain()
        a = exact_advantage(mdp, uniform_policy(mdp))
        assert np.allclose(a, 0.0, atol=1e-14)

    def test_hand_computed_two_action_case(self):
        # Single state, gamma tiny so Q ~ R; R = (0, 1) and uniform policy.
        P = np.ones((1, 2, 1))
        R = np.array([[0.0, 1.0]])
        mdp = TabularMdp(1, 2, P, R, 1e-9, 1.0, np.array([1.0]))
        a = exact_advantage(mdp, np.array([[0.5, 0.5]]))
        assert np.allclose(a, [[-0.5, 0.5]], atol=1e-8)

    def test_symmetric_rewards_give_zero_advantage(self):
        P = np.ones((1, 3, 1))
        R = np.full((1, 3), 0.4)
        mdp = TabularMdp(1, 3, P, R, 0.7, 1.0, np.array([1.0]))
        a = exact_advantage(mdp, uniform_policy(mdp))
        assert np.allclose(a, 0.0, atol=1e-12)

    def test_policy_weighted_advantage_sums_to_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            mdp = random_mdp(rng)
            pi = rng.random((mdp.num_states, mdp.num_actions))
            pi /= pi.sum(axis=1, keepdims=True)
            a = exact_advantage(mdp, pi)
            assert np.max(np.abs(np.einsum("sa,sa->s", pi, a))) < 1e-10


# ---------------------------------------------------------------------------
# visitation_distribution
# ---------------------------------------------------------------------------

class TestVisitationDistribution:
    def test_single_state(self):
        mdp = single_state_mdp()
        part = visitation_distribution(mdp, uniform_policy(mdp))
        assert np.allclose(part.d_pi, [1.0], atol=1e-14)

    def test_absorbing_chain_closed_form(self):
        # d(s0) = (1-g) sum g^t [t=0] = 1-g = 0.5; d(s1) = g = 0.5.
        mdp = two_state_chain(gamma=0.5)
        pi = uniform_policy(mdp)
        part = visitation_distribution(mdp, pi)
        assert np.allclose(part.d_pi, [0.5, 0.5], atol=1e-12)
        oracle = visitation_power_series_oracle(mdp, pi)
        assert np.max(np.abs(part.d_pi - oracle)) < 1e-10

    def test_unreachable_state_has_zero_mass(self):
        # Three states; s2 unreachable from s0.
        P = np.zeros((3, 1, 3))
        P[0, 0, 1] = 1.0
        P[1, 0, 1] = 1.0
        P[2, 0, 2] = 1.0
        mdp = TabularMdp(3, 1, P, np.zeros((3, 1)), 0.9, 1.0, np.array([1.0, 0.0, 0.0]))
        part = visitation_distribution(mdp, np.ones((3, 1)))
        assert part.d_pi[2] == 0.0
        assert 2 in part.unvisited and 2 not in part.visited

    def test_sums_to_one_and_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            mdp = random_mdp(rng)
            pi = rng.random((mdp.num_states, mdp.num_actions))
            pi /= pi.sum(axis=1, keepdims=True)
            part = visitation_distribution(mdp, pi)
            assert abs(part.d_pi.sum() - 1.0) < 1e-10
            assert part.d_pi.min() >= 0.0
            oracle = visitation_power_series_oracle(mdp, pi)
            assert np.max(np.abs(part.d_pi - oracle)) < 1e-9

    def test_partition_covers_all_states(self):
        mdp = corridor_3_mdp()
        part = visitation_distribution(mdp, uniform_policy(mdp))
        together = np.sort(np.concatenate([part.visited, part.unvisited]))
        assert np.array_equal(together, np.arange(mdp.num_states))


class TestVisitationPartition:
    def test_threshold(self):
        part = VisitationPartition.from_distribution(np.array([1e-10, 1.0 - 1e-10]))
        assert list(part.visited) == [1]
        assert list(part.unvisited) == [0]


# ---------------------------------------------------------------------------
# dominance_gap_check
# ---------------------------------------------------------------------------

class TestDominanceGap:
    def _two_action_mdp(self):
        # Q ~ (0, 1) at the single state under near-zero discount.
        P = np.ones((1, 2, 1))
        R = np.array([[0.0, 1.0]])
        return TabularMdp(1, 2, P, R, 1e-9, 1.0, np.array([1.0]))

    def test_positive_gap(self):
        mdp = self._two_action_mdp()
        report = dominance_gap_check(
            mdp, np.array([[0.5, 0.5]]), np.array([[False, True]])
        )
        assert report.condition_i_ok
        assert abs(report.margins[0, 0] - 1.0) < 1e-8

    def test_boundary_equal_q_fails_condition(self):
        P = np.ones((1, 2, 1))
        R = np.array([[1.0, 1.0]])
        mdp = TabularMdp(1, 2, P, R, 1e-9, 1.0, np.array([1.0]))
        report = dominance_gap_check(
            mdp, np.array([[0.5, 0.5]]), np.array([[False, True]])
        )
        assert not report.condition_i_ok
        assert abs(report.margins[0, 0]) < 1e-12

    def test_lemma_equality_two_actions(self):
        # With two actions, A(s, invalid) = -gap * (1 - pi(invalid)) exactly.
        mdp = self._two_action_mdp()
        pi = np.array([[0.5, 0.5]])
        adv = exact_advantage(mdp, pi)
        report = dominance_gap_check(mdp, pi, np.array([[False, True]]))
        gap = report.margins[0, 0]
        assert abs(adv[0, 0] - (-gap * (1.0 - pi[0, 0]))) < 1e-10
        assert abs(adv[0, 0] + 0.5) < 1e-8
        # Best-valid gap and worst-other gap coincide with two actions.
        assert abs(report.worst_gaps[0, 0] - gap) < 1e-12
        assert report.best_gap_bound_residual < 1e-10

    def test_all_invalid_state_is_structural_error(self):
        mdp = self._two_action_mdp()
        with pytest.raises(RuntimeError, match="no valid action"):
            dominance_gap_check(mdp, np.array([[0.5, 0.5]]), np.array([[False, False]]))

    def test_lemma_bound_on_random_mdps(self):
        # The worst-other-action form of the advantage bound holds universally.
        rng = np.random.default_rng(3)
        for _ in range(20):
            mdp = random_mdp(rng, n_states=4, n_actions=4)
            pi = rng.random((4, 4))
            pi /= pi.sum(axis=1, keepdims=True)
            masks = rng.random((4, 4)) > 0.3
            masks[:, 0] = True  # keep at least one valid action
            report = dominance_gap_check(mdp, pi, masks)
            assert report.lemma_residual <= 1e-10

    def test_best_gap_bound_can_fail_with_three_actions(self):
        # Q = (0, 0.5, 1), uniform policy, invalid a=0: A = -0.5 but the
        # best-valid-gap bound is -1*(2/3); the enforced bound uses the gap to
        # the worst other action (0.5) and holds with slack.
        P = np.ones((1, 3, 1))
        R = np.array([[0.0, 0.5, 1.0]])
        mdp = TabularMdp(1, 3, P, R, 1e-9, 1.0, np.array([1.0]))
        pi = np.full((1, 3), 1.0 / 3.0)
        report = dominance_gap_check(mdp, pi, np.array([[False, True, True]]))
        assert report.best_gap_bound_residual > 0.1
        assert report.lemma_residual <= 1e-10
        assert report.condition_i_ok


class TestStateValues:
    def test_values_match_policy_weighted_q(self):
        mdp = corridor_3_mdp()
        pi = uniform_policy(mdp)
        v = exact_state_values(mdp, pi)
        q = exact_q_values(mdp, pi)
        assert np.max(np.abs(v - np.einsum("sa,sa->s", pi, q))) < 1e-12
