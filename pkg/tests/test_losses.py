import numpy as np
import pytest

from _gradcheck import fd_gradient, relative_error
from masklab.losses import (
    CONDITIONS,
    LossConfig,
    RolloutBatch,
    focal_loss,
    gae,
    kl_balanced_loss,
    kl_weights,
    normalize_advantages,
    normalize_weights,
    ppo_loss,
    total_loss,
    total_loss_grad,
)
from masklab.network import MlpActorCritic, masked_log_softmax, sigmoid


# ---------------------------------------------------------------------------
# batch construction helpers
# ---------------------------------------------------------------------------

def make_batch(rng, net, B=12, mode="oracle_masked", ratio_one=False):
    obs = rng.normal(size=(B, net.obs_dim))
    masks = rng.random((B, net.num_actions)) > 0.35
    masks[:, 0] = True
    cache = net.forward_cache(obs)
    if mode == "oracle_masked":
        log_probs = masked_log_softmax(cache["logits"], masks)
    else:
        z = cache["logits"] - cache["logits"].max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    actions = np.array([rng.choice(net.num_actions, p=probs[i]) for i in range(B)])
    old_lp = log_probs[np.arange(B), actions]
    if not ratio_one:
        old_lp = old_lp + rng.normal(scale=0.1, size=B)
    rewards = rng.normal(size=B)
    dones = rng.random(B) > 0.8
    values = cache["values"].copy()
    labels = rng.random((B, net.num_actions)) > 0.5
    batch = RolloutBatch(
        observations=obs,
        actions=actions,
        old_log_probs=old_lp,
        rewards=rewards,
        dones=dones,
        values=values,
        validity_labels=labels,
        masks=masks,
    )
    adv, ret = gae(rewards, values, dones, 0.99, 0.8, bootstrap_value=0.3)
    batch.advantages = normalize_advantages(adv)
    batch.returns = ret
    return batch


def make_net(rng_seed=0, obs_dim=7, n=4, hidden=12):
    net = MlpActorCritic(obs_dim, n, hidden=hidden, seed=rng_seed)
    rng = np.random.default_rng(rng_seed + 1000)
    net.policy_w = rng.normal(scale=0.4, size=net.policy_w.shape)
    net.policy_b = rng.normal(scale=0.1, size=net.policy_b.shape)
    return net


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

class TestGae:
    def test_single_step_td(self):
        adv, ret = gae([1.0], [0.4], [False], 0.9, 0.0, bootstrap_value=2.0)
        assert abs(adv[0] - (1.0 + 0.9 * 2.0 - 0.4)) < 1e-15
        assert abs(ret[0] - (adv[0] + 0.4)) < 1e-15

    def test_lambda_one_is_monte_carlo(self):
        rewards = [1.0, 0.5, 2.0]
        values = [0.3, -0.2, 0.1]
        dones = [False, False, True]
        g = 0.9
        adv, _ = gae(rewards, values, dones, g, 1.0)
        returns_mc = [
            1.0 + g * 0.5 + g * g * 2.0,
            0.5 + g * 2.0,
            2.0,
        ]
        for t in range(3):
            assert abs(adv[t] - (returns_mc[t] - values[t])) < 1e-12

    def test_three_step_matches_brute_force(self):
        # Direct summation oracle: A_t = sum_l (gamma lam)^l delta_{t+l}.
        rng = np.random.default_rng(0)
        rewards = rng.normal(size=3)
        values = rng.normal(size=3)
        bootstrap = 0.7
        g, lam = 0.9, 0.8
        deltas = [
            rewards[0] + g * values[1] - values[0],
            rewards[1] + g * values[2] - values[1],
            rewards[2] + g * bootstrap - values[2],
        ]
        expected = [
            deltas[0] + (g * lam) * deltas[1] + (g * lam) ** 2 * deltas[2],
            deltas[1] + (g * lam) * deltas[2],
            deltas[2],
        ]
        adv, ret = gae(rewards, values, [False] * 3, g, lam, bootstrap_value=bootstrap)
        assert np.max(np.abs(adv - np.array(expected))) < 1e-12
        assert np.max(np.abs(ret - (adv + values))) < 1e-15

    def test_done_blocks_bootstrap(self):
        adv, _ = gae([1.0], [0.0], [True], 0.9, 0.8, bootstrap_value=100.0)
        assert abs(adv[0] - 1.0) < 1e-15

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], [False], 0.9, 0.8)


# ---------------------------------------------------------------------------
# PPO loss
# ---------------------------------------------------------------------------

class TestPpoLoss:
    def test_ratio_one_surrogate_is_mean_advantage(self):
        rng = np.random.default_rng(1)
        net = make_net(1)
        batch = make_batch(rng, net, ratio_one=True)
        config = LossConfig(entropy_coeff=0.0, value_coeff=0.0)
        loss, diag = ppo_loss(batch, net, config, "oracle_masked")
        assert abs(diag["surrogate"] - batch.advantages.mean()) < 1e-12
        assert abs(loss + batch.advantages.mean()) < 1e-12
        assert diag["clip_fraction"] == 0.0

    def test_clipping_at_boundary(self):
        # ratio = 1 + 2 eps with positive advantage clips to 1 + eps.
        net = make_net(2)
        rng = np.random.default_rng(2)
        batch = make_batch(rng, net, B=1, ratio_one=True)
        eps = 0.2
        batch.old_log_probs = batch.old_log_probs - np.log(1.0 + 2.0 * eps)
        batch.advantages = np.array([1.0])
        batch.returns = batch.values.copy()
        config = LossConfig(clip_epsilon=eps, entropy_coeff=0.0, value_coeff=0.0)
        loss, diag = ppo_loss(batch, net, config, "oracle_masked")
        assert abs(diag["surrogate"] - (1.0 + eps)) < 1e-12
        assert diag["clip_fraction"] == 1.0

    def test_entropy_computed_over_masked_support(self):
        net = MlpActorCritic(5, 4, hidden=8, seed=0)  # zero policy head
        rng = np.random.default_rng(3)
        batch = make_batch(rng, net, B=6, ratio_one=True)
        batch.masks = np.tile(np.array([True, True, False, False]), (6, 1))
        cache_lp = masked_log_softmax(net.forward_cache(batch.observations)["logits"], batch.masks)
        batch.actions = np.zeros(6, dtype=int)
        batch.old_log_probs = cache_lp[:, 0]
        config = LossConfig()
        _, diag = ppo_loss(batch, net, config, "oracle_masked")
        assert abs(diag["entropy"] - np.log(2.0)) < 1e-12


# ---------------------------------------------------------------------------
# focal loss
# ---------------------------------------------------------------------------

class TestFocalLoss:
    def test_gamma_zero_is_bce(self):
        rng = np.random.default_rng(4)
        probs = rng.uniform(0.02, 0.98, size=(10, 5))
        labels = rng.random((10, 5)) > 0.5
        p_true = np.where(labels, probs, 1.0 - probs)
        bce = float((-np.log(p_true)).mean())
        assert abs(focal_loss(probs, labels, 0.0) - bce) < 1e-12

    def test_perfect_predictions_zero_loss(self):
        labels = np.array([[True, False]])
        probs = np.array([[1.0, 0.0]])
        assert focal_loss(probs, labels, 2.0) == 0.0

    def test_half_probability_value(self):
        # single action, p = 0.5, gamma = 2 -> 0.25 * log 2
        val = focal_loss(np.array([[0.5]]), np.array([[True]]), 2.0)
        assert abs(val - 0.25 * np.log(2.0)) < 1e-15

    def test_monotone_in_gamma_for_easy_batches(self):
        rng = np.random.default_rng(5)
        probs = rng.uniform(0.55, 0.99, size=(8, 4))
        labels = np.ones((8, 4), dtype=bool)  # p_true = probs > 1/2
        values = [focal_loss(probs, labels, g) for g in (0.0, 0.5, 1.0, 2.0, 4.0)]
        assert all(a >= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------------------
# KL weights
# ---------------------------------------------------------------------------

class TestKlWeights:
    def test_identical_masks_fall_back_to_uniform(self):
        logits = np.array([[0.3, -0.2, 0.5]])
        mask = np.array([[True, False, True]])
        w, w_norm = kl_weights(logits, mask, mask, LossConfig())
        assert np.array_equal(w, np.zeros((1, 3)))
        assert np.array_equal(w_norm, np.full((1, 3), 1.0 / 3.0))

    def test_two_action_hand_case(self):
        # uniform logits, oracle all-valid, predicted masks out action 1.
        logits = np.zeros((1, 2))
        oracle = np.array([[True, True]])
        pred = np.array([[True, False]])
        w, w_norm = kl_weights(logits, oracle, pred, LossConfig())
        lse_pred = np.log(1.0 + np.exp(-20.0))
        lp_oracle = -np.log(2.0)
        expected_w0 = 0.5 * abs(lp_oracle - (-lse_pred))
        expected_w1 = 0.5 * abs(lp_oracle - (-20.0 - lse_pred))
        assert abs(w[0, 0] - expected_w0) < 1e-15
        assert abs(w[0, 1] - expected_w1) < 1e-15
        assert abs(w_norm.sum() - 1.0) < 1e-12

    def test_nonnegative_and_normalized(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(9, 5))
        oracle = rng.random((9, 5)) > 0.4
        oracle[:, 0] = True
        pred = rng.random((9, 5)) > 0.4
        pred[:, 1] = True
        w, w_norm = kl_weights(logits, oracle, pred, LossConfig())
        assert (w >= 0).all()
        assert np.max(np.abs(w_norm.sum(axis=1) - 1.0)) < 1e-12

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(7)
        w = rng.uniform(0.0, 2.0, size=(6, 4))
        w[2] = 0.0  # fallback row
        a = normalize_weights(w)
        b = normalize_weights(3.7 * w)
        assert np.max(np.abs(a - b)) < 1e-15

    def test_prefactor_variants(self):
        logits = np.array([[0.5, -0.5, 0.0]])
        oracle = np.array([[True, True, False]])
        pred = np.array([[True, False, True]])
        for prefactor in ("oracle_soft", "unmasked", "oracle_exact"):
            config = LossConfig(kl_prefactor=prefactor)
            w, w_norm = kl_weights(logits, oracle, pred, config)
            assert (w >= 0).all() and abs(w_norm.sum() - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# KL-balanced loss
# ---------------------------------------------------------------------------

class TestKlBalancedLoss:
    def test_uniform_weights_reduce_to_focal(self):
        rng = np.random.default_rng(8)
        probs = rng.uniform(0.05, 0.95, size=(7, 4))
        labels = rng.random((7, 4)) > 0.5
        uniform = np.full((7, 4), 0.25)
        assert (
            abs(kl_balanced_loss(probs, labels, uniform, 2.0) - focal_loss(probs, labels, 2.0))
            < 1e-12
        )

    def test_concentrated_weight_selects_single_term(self):
        probs = np.array([[0.7, 0.4, 0.9]])
        labels = np.array([[True, True, False]])
        weights = np.array([[0.0, 1.0, 0.0]])
        expected = -((1.0 - 0.4) ** 2.0) * np.log(0.4)
        assert abs(kl_balanced_loss(probs, labels, weights, 2.0) - expected) < 1e-14

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        B, n = 11, 5
        probs = rng.uniform(0.02, 0.98, size=(B, n))
        labels = rng.random((B, n)) > 0.5
        weights = normalize_weights(rng.uniform(size=(B, n)))
        gamma_f = 2.0
        total = 0.0
        for i in range(B):
            for a in range(n):
                p = probs[i, a] if labels[i, a] else 1.0 - probs[i, a]
                total += weights[i, a] * (-((1.0 - p) ** gamma_f) * np.log(max(p, 1e-12)))
        oracle = total / B
        assert abs(kl_balanced_loss(probs, labels, weights, gamma_f) - oracle) < 1e-12


# ---------------------------------------------------------------------------
# total loss composition
# ---------------------------------------------------------------------------

class TestTotalLoss:
    def test_lambda_zero_conditions_equal_ppo(self):
        rng = np.random.default_rng(10)
        net = make_net(10)
        batch = make_batch(rng, net)
        config = LossConfig()
        for condition, mode in (("C1", "oracle_masked"), ("C2", "unmasked")):
            total, diag = total_loss(batch, net, config, condition)
            ppo, _ = ppo_loss(batch, net, config, mode)
            assert total == ppo
            assert diag["loss_cls"] == 0.0

    def test_c4_with_zero_ppo_is_lambda_times_kl(self):
        rng = np.random.default_rng(11)
        net = make_net(11)
        batch = make_batch(rng, net, ratio_one=True)
        batch.advantages = np.zeros(len(batch))
        batch.returns = batch.values.copy()
        config = LossConfig(entropy_coeff=0.0, classification_coeff=10.0)
        total, diag = total_loss(batch, net, config, "C4")
        assert abs(diag["loss_ppo"]) < 1e-12
        assert abs(total - 10.0 * diag["loss_cls"]) < 1e-12
        out = net.forward(batch.observations, "unmasked")
        ref = kl_balanced_loss(
            out.validity_probs, batch.validity_labels, diag["kl_weights"], config.focal_gamma
        )
        assert abs(diag["loss_cls"] - ref) < 1e-12

    def test_c3_equals_c4_under_uniform_weights(self):
        rng = np.random.default_rng(12)
        net = make_net(12)
        batch = make_batch(rng, net)
        config = LossConfig()
        n = net.num_actions
        uniform = np.full((len(batch), n), 1.0 / n)
        c3, _ = total_loss(batch, net, config, "C3")
        c4, _ = total_loss(batch, net, config, "C4", kl_weights_override=uniform)
        assert abs(c3 - c4) < 1e-12

    def test_unknown_condition_rejected(self):
        net = make_net(13)
        batch = make_batch(np.random.default_rng(13), net)
        with pytest.raises(ValueError, match="condition"):
            total_loss(batch, net, LossConfig(), "C9")

    @pytest.mark.parametrize("condition", CONDITIONS)
    def test_gradients_match_finite_differences(self, condition):
        # 20 random nets/batches per condition at < 1e-5 relative error.
        for trial in range(20):
            seed = 200 + 17 * trial
            rng = np.random.default_rng(seed)
            net = make_net(seed, obs_dim=6, n=4, hidden=8)
            batch = make_batch(rng, net, B=8)
            config = LossConfig(entropy_coeff=0.013)
            loss0, grad, diag = total_loss_grad(batch, net, config, condition)
            frozen = diag.get("kl_weights")

            def loss_fn(model):
                value, _ = total_loss(batch, model, config, condition, kl_weights_override=frozen)
                return value

            assert loss_fn(net) == loss0
            coords = rng.choice(net.num_params, size=60, replace=False)
            numeric = fd_gradient(loss_fn, net, coords)
            assert relative_error(grad[coords], numeric) < 1e-5


class TestNormalizeAdvantages:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(14)
        adv = normalize_advantages(rng.normal(3.0, 2.0, size=500))
        assert abs(adv.mean()) < 1e-12
        assert abs(adv.std() - 1.0) < 1e-6

    def test_constant_input_does_not_blow_up(self):
        adv = normalize_advantages(np.zeros(8))
        assert np.array_equal(adv, np.zeros(8))
