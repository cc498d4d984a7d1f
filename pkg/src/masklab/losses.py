"""Training objectives: clipped PPO with GAE, focal validity classification,
and the KL-balanced variant that weights each action by how much the policy
would change if its validity were misclassified.

Condition table (policy sampling mode and classification term):

  C1  oracle-masked PPO, no classification
  C2  unmasked PPO, no classification
  C3  oracle-masked PPO + lambda * focal loss
  C4  oracle-masked PPO + lambda * KL-balanced loss

KL weights w_a = pi(a|s) |log pi_oracle(a|s) - log pi_pred(a|s)| are computed
from soft-masked (-20 offset) policies so both logs stay finite, then
normalized per state; they are treated as constants in the backward pass. If
a state's weights sum to zero (the masks agree exactly) the weights fall back
to uniform 1/n so the classifier keeps receiving signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import (
    MlpActorCritic,
    log_softmax,
    masked_entropy,
    masked_log_softmax,
    predicted_mask,
    sigmoid,
    soft_masked_logits,
)

PROB_CLAMP = 1e-12

CONDITIONS = ("C1", "C2", "C3", "C4")

# condition -> (policy mode, classification loss kind)
_CONDITION_TABLE = {
    "C1": ("oracle_masked", None),
    "C2": ("unmasked", None),
    "C3": ("oracle_masked", "focal"),
    "C4": ("oracle_masked", "kl"),
}


@dataclass(frozen=True)
class LossConfig:
    clip_epsilon: float = 0.2
    value_coeff: float = 0.5
    entropy_coeff: float = 0.01
    classification_coeff: float = 10.0
    focal_gamma: float = 2.0
    kl_soft_mask_value: float = -20.0
    threshold: float = 0.5
    gae_lambda: float = 0.8
    discount: float = 0.99
    normalize_advantages: bool = True
    # Which policy's probability weights Eq-9-style per-action sensitivity.
    # The unmasked policy is the one that sees deployment-relevant errors:
    # an oracle-masked prefactor gives near-zero weight to every action the
    # oracle excludes, so the classifier never learns the exact mispredictions
    # that break predicted-mask deployment.
    kl_prefactor: str = "unmasked"  # {"oracle_soft", "unmasked", "oracle_exact"}

    def __post_init__(self):
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.classification_coeff < 0 or self.focal_gamma < 0:
            raise ValueError("classification_coeff and focal_gamma must be >= 0")
        if self.kl_prefactor not in ("oracle_soft", "unmasked", "oracle_exact"):
            raise ValueError(f"unknown kl_prefactor {self.kl_prefactor!r}")


@dataclass
class RolloutBatch:
    """On-policy rollout data; advantages/returns are filled by gae()."""

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    validity_labels: np.ndarray  # (T, n) oracle labels nu(s, .)
    masks: np.ndarray            # (T, n) masks used at collection time
    bootstrap_value: float = 0.0
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        T = len(self.actions)
        for name in ("observations", "old_log_probs", "rewards", "dones", "values",
                     "validity_labels", "masks"):
            if len(getattr(self, name)) != T:
                raise ValueError(f"{name} length mismatch (expected {T})")

    def __len__(self):
        return len(self.actions)

    def select(self, idx) -> "RolloutBatch":
        return RolloutBatch(
            observations=self.observations[idx],
            actions=self.actions[idx],
            old_log_probs=self.old_log_probs[idx],
            rewards=self.rewards[idx],
            dones=self.dones[idx],
            values=self.values[idx],
            validity_labels=self.validity_labels[idx],
            masks=self.masks[idx],
            bootstrap_value=self.bootstrap_value,
            advantages=self.advantages[idx] if len(self.advantages) else self.advantages,
            returns=self.returns[idx] if len(self.returns) else self.returns,
        )


def gae(rewards, values, dones, gamma, lam, bootstrap_value=0.0):
    """Standard recursive generalized advantage estimation.

    dones flag both termination and truncation (no bootstrap past either);
    bootstrap_value is V(s_T) for a rollout cut mid-episode.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    if len(values) != T or len(dones) != T:
        raise ValueError("rewards, values, dones must have equal length")
    advantages = np.zeros(T)
    next_value = bootstrap_value
    running = 0.0
    for t in range(T - 1, -1, -1):
        not_done = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages, eps=1e-8):
    adv = np.asarray(advantages, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------

def _true_label_probs(validity_probs, labels):
    labels = np.asarray(labels, dtype=bool)
    return np.where(labels, validity_probs, 1.0 - validity_probs)


def _focal_terms(p_true, focal_gamma):
    p = np.maximum(p_true, PROB_CLAMP)
    return -((1.0 - p_true) ** focal_gamma) * np.log(p)


def _focal_terms_dp(p_true, focal_gamma):
    """d/dp of -(1-p)^gamma log(max(p, clamp))."""
    p = np.maximum(p_true, PROB_CLAMP)
    one_minus = 1.0 - p_true
    if focal_gamma == 0.0:
        power_part = np.zeros_like(p_true)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            power_part = np.where(
                one_minus > 0.0,
                focal_gamma * one_minus ** (focal_gamma - 1.0) * np.log(p),
                0.0,
            )
    log_part = np.where(p_true > PROB_CLAMP, (one_minus**focal_gamma) / p, 0.0)
    return power_part - log_part


def focal_loss(validity_probs, labels, focal_gamma):
    """Mean over states of (1/n) sum_a (1 - p_a)^gamma * (-log p_a), where
    p_a is the predicted probability of the true label."""
    p_true = _true_label_probs(validity_probs, labels)
    terms = _focal_terms(p_true, focal_gamma)
    return float(terms.mean())


def kl_weights(logits, oracle_mask, pred_mask, config: LossConfig):
    """Per-action policy-sensitivity weights (Eq. w_a) and their normalization.

    Both policies use the soft mask so the log ratio stays finite. Returns
    (w, w_normalized); rows whose weights sum to zero fall back to uniform.
    """
    oracle_mask = np.asarray(oracle_mask, dtype=bool)
    pred_mask = np.asarray(pred_mask, dtype=bool)
    offset = config.kl_soft_mask_value
    lp_oracle = log_softmax(logits + offset * (~oracle_mask).astype(np.float64))
    lp_pred = log_softmax(logits + offset * (~pred_mask).astype(np.float64))
    if config.kl_prefactor == "oracle_soft":
        prefactor = np.exp(lp_oracle)
    elif config.kl_prefactor == "unmasked":
        prefactor = np.exp(log_softmax(logits))
    else:  # oracle_exact
        prefactor = np.exp(masked_log_softmax(logits, oracle_mask))
    w = prefactor * np.abs(lp_oracle - lp_pred)
    return w, normalize_weights(w)


def normalize_weights(w):
    """Row-normalize nonnegative weights; all-zero rows become uniform 1/n."""
    w = np.asarray(w, dtype=np.float64)
    sums = w.sum(axis=1, keepdims=True)
    n = w.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(sums > 0.0, w / sums, 1.0 / n)
    return normalized


def kl_balanced_loss(validity_probs, labels, weights, focal_gamma):
    """Mean over states of sum_a w_a (1 - p_a)^gamma * (-log p_a)."""
    p_true = _true_label_probs(validity_probs, labels)
    terms = _focal_terms(p_true, focal_gamma)
    return float((weights * terms).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# PPO loss
# ---------------------------------------------------------------------------

def _policy_log_probs(cache, mode, masks):
    if mode == "unmasked":
        return log_softmax(cache["logits"]), None
    if mode == "oracle_masked":
        return masked_log_softmax(cache["logits"], masks), masks
    if mode == "soft_masked":
        return log_softmax(soft_masked_logits(cache["logits"], masks)), None
    raise ValueError(f"unsupported policy mode {mode!r}")


def ppo_loss(batch: RolloutBatch, net: MlpActorCritic, config: LossConfig, mode: str):
    """Value-only clipped PPO objective; see total_loss for the gradient path."""
    loss, _, diag = _ppo_core(batch, net.forward_cache(batch.observations), config, mode, want_grad=False)
    return loss, diag


def _ppo_core(batch, cache, config, mode, want_grad):
    B = len(batch)
    log_probs, support = _policy_log_probs(cache, mode, batch.masks)
    idx = np.arange(B)
    lp_actions = log_probs[idx, batch.actions]
    ratio = np.exp(lp_actions - batch.old_log_probs)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * adv
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -float(surrogate.mean())
    value_error = cache["values"] - batch.returns
    value_loss = float((value_error**2).mean())
    entropies = masked_entropy(log_probs)
    entropy = float(entropies.mean())
    loss = policy_loss + config.value_coeff * value_loss - config.entropy_coeff * entropy
    diag = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip_epsilon)),
        "surrogate": float(surrogate.mean()),
    }
    if not want_grad:
        return loss, None, diag

    probs = np.exp(log_probs)
    # d policy_loss / d lp(action): gradient flows through the unclipped branch
    # (ties inside the clip region have equal derivatives on both branches).
    active = unclipped <= clipped
    dlp = np.where(active, ratio * adv, 0.0) * (-1.0 / B)
    onehot = np.zeros_like(probs)
    onehot[idx, batch.actions] = 1.0
    dlogits = dlp[:, None] * (onehot - probs)
    if support is not None:
        dlogits = np.where(support, dlogits, 0.0)
    # entropy bonus: dH/dz_k = -p_k (log p_k + H) on the support
    dh = np.zeros_like(probs)
    on_support = probs > 0.0
    ent_rows = np.broadcast_to(entropies[:, None], probs.shape)
    dh[on_support] = -probs[on_support] * (log_probs[on_support] + ent_rows[on_support])
    dlogits += (-config.entropy_coeff / B) * dh
    dvalues = (2.0 * config.value_coeff / B) * value_error
    return loss, (dlogits, dvalues), diag


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------

def total_loss(
    batch: RolloutBatch,
    net: MlpActorCritic,
    config: LossConfig,
    condition: str,
    kl_weights_override: np.ndarray | None = None,
):
    """Composed objective L_PPO + lambda * L_cls for one condition (value only).

    kl_weights_override fixes the (stop-gradient) KL weights; used by the
    finite-difference checks, which differentiate the objective at frozen
    weights exactly as the backward pass does.
    """
    loss, _, diag = _total_core(batch, net, config, condition, False, kl_weights_override)
    return loss, diag


def total_loss_grad(
    batch: RolloutBatch,
    net: MlpActorCritic,
    config: LossConfig,
    condition: str,
):
    """(loss, flat parameter gradient, diagnostics) for one condition."""
    return _total_core(batch, net, config, condition, True, None)


def _total_core(batch, net, config, condition, want_grad, kl_weights_override):
    if condition not in _CONDITION_TABLE:
        raise ValueError(f"unknown condition {condition!r}")
    mode, cls_kind = _CONDITION_TABLE[condition]
    lam = config.classification_coeff if cls_kind is not None else 0.0
    cache = net.forward_cache(batch.observations)
    loss, head_grads, diag = _ppo_core(batch, cache, config, mode, want_grad)
    diag["loss_ppo"] = loss

    dcls = None
    cls_loss = 0.0
    validity_probs = sigmoid(cache["cls_logits"])
    labels = np.asarray(batch.validity_labels, dtype=bool)
    diag["cls_accuracy"] = float(
        np.mean((validity_probs > config.threshold) == labels)
    )
    if cls_kind is not None and lam > 0.0:
        B, n = validity_probs.shape
        if cls_kind == "focal":
            weights = np.full((B, n), 1.0 / n)
        elif kl_weights_override is not None:
            weights = kl_weights_override
        else:
            pred = predicted_mask(validity_probs, config.threshold)
            _, weights = kl_weights(cache["logits"], batch.masks, pred, config)
        p_true = _true_label_probs(validity_probs, labels)
        terms = _focal_terms(p_true, config.focal_gamma)
        cls_loss = float((weights * terms).sum(axis=1).mean())
        loss = loss + lam * cls_loss
        if want_grad:
            dterms_dp = _focal_terms_dp(p_true, config.focal_gamma)
            sign = np.where(labels, 1.0, -1.0)
            dp_du = validity_probs * (1.0 - validity_probs) * sign
            dcls = (lam / B) * weights * dterms_dp * dp_du
        diag["kl_weights"] = weights
    diag["loss_cls"] = cls_loss
    diag["loss_total"] = loss

    if not want_grad:
        return loss, None, diag
    dlogits, dvalues = head_grads
    grad = net.backward(cache, dlogits=dlogits, dvalues=dvalues, dcls_logits=dcls)
    return loss, grad, diag
