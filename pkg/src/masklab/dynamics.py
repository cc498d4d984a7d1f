"""Exact expected policy-gradient dynamics for linear-logit softmax policies.

This is the theory engine: it iterates the expected gradient update for a
policy z_a(s) = phi(s)^T w_a on a tabular MDP, recomputing exact advantages
and the discounted visitation at every step, and records a per-step
suppression trace for a target (state, action) pair:

  * per-step suppression kappa_t and its cumulative sum K_t,
  * realized vs closed-form predicted logit change at the target state,
  * the probability bound exp(-K_t)/n and the realized probability,
  * dominance-gap and feature-alignment condition flags,
  * zero-sum and Jensen partition-function residuals.

With entropy regularization the logit update per state becomes
pi * (A - beta*(log pi + H)); the zero-sum identity survives and a floor
exp(-r_max/(beta*(1-gamma))) limits how far the target probability can fall.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .mdp import TabularMdp, VisitationPartition, VISITATION_EPS


@dataclass(frozen=True)
class DynamicsConfig:
    learning_rate: float = 0.1
    entropy_coeff: float = 0.0
    num_steps: int = 1000
    update_mode: str = "expected"  # "expected" | "sampled"
    check_bound: bool = True
    run_until_converged: bool = False
    convergence_window: int = 100
    convergence_tol: float = 1e-8
    logit_guard: float = 700.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.entropy_coeff < 0:
            raise ValueError("entropy_coeff must be nonnegative")
        if self.update_mode not in ("expected", "sampled"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")


class LinearSoftmaxPolicy:
    """Softmax policy with per-action weight vectors over a fixed feature map.

    features has shape (S, d): the feature map evaluated on the whole state
    space. weights has shape (n, d). Probabilities are computed with max-logit
    subtraction; uniform initialization (zero weights) gives exactly 1/n.
    """

    def __init__(self, features: np.ndarray, weights: np.ndarray):
        self.features = np.asarray(features, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.features.ndim != 2 or self.weights.ndim != 2:
            raise ValueError("features and weights must be 2-D")
        if self.features.shape[1] != self.weights.shape[1]:
            raise ValueError("feature dimension mismatch")

    @classmethod
    def uniform(cls, features: np.ndarray, num_actions: int):
        features = np.asarray(features, dtype=np.float64)
        return cls(features, np.zeros((num_actions, features.shape[1])))

    @property
    def num_actions(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self) -> np.ndarray:
        return self.features @ self.weights.T

    def log_probs(self) -> np.ndarray:
        z = self.logits()
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())


@dataclass
class SuppressionRate:
    """Closed-form per-step suppression for a target pair, with flags."""

    kappa: float
    condition_i_ok: bool
    condition_ii_ok: bool


@dataclass
class ZeroSumReport:
    max_expected_residual: float
    max_sampled_residual: float


@dataclass
class SuppressionTrace:
    """Per-step record of a dynamics run for one target (state, action)."""

    target_state: int
    target_action: int
    num_actions: int
    entropy_coeff: float
    entropy_floor_log: float  # -r_max / (beta (1-gamma)); -inf when beta == 0
    step: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kappa: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cum_suppression: np.ndarray = field(default_factory=lambda: np.zeros(0))
    realized_dz: np.ndarray = field(default_factory=lambda: np.zeros(0))
    predicted_dz: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pi_target: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_pi_target: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bound: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cond_i: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    cond_ii: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    zero_sum_residual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prop_residual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jensen_slack: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = False
    steps_run: int = 0
    final_weights: np.ndarray | None = None

    @property
    def conditions_held_throughout(self) -> bool:
        return bool(np.all(self.cond_i) and np.all(self.cond_ii))

    def bound_log(self) -> np.ndarray:
        return -self.cum_suppression - np.log(self.num_actions)

    def max_bound_violation(self) -> float:
        """Largest log pi - (-K - log n) over steps; negative means slack."""
        return float(np.max(self.log_pi_target - self.bound_log()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step", "kappa", "K", "pi_target", "bound", "log_pi_target", "cond_i", "cond_ii"]
            )
            for i in range(len(self.step)):
                writer.writerow(
                    [
                        int(self.step[i]),
                        repr(float(self.kappa[i])),
                        repr(float(self.cum_suppression[i])),
                        repr(float(self.pi_target[i])),
                        repr(float(self.bound[i])),
                        repr(float(self.log_pi_target[i])),
                        int(self.cond_i[i]),
                        int(self.cond_ii[i]),
                    ]
                )


# ---------------------------------------------------------------------------
# Elementary identities
# ---------------------------------------------------------------------------

def logit_grad(policy: LinearSoftmaxPolicy, s: int, a_taken: int, a_target: int) -> float:
    """d log pi(a_taken|s) / d z_{a_target}(s) = 1{a_taken=a_target} - pi(a_target|s)."""
    probs = policy.probs()
    return float((1.0 if a_taken == a_target else 0.0) - probs[s, a_target])


def _policy_eval(mdp: TabularMdp, probs: np.ndarray):
    """(Q, A, d_pi) for a policy given as a (S, n) probability table."""
    p_pi = np.einsum("sa,saz->sz", probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", probs, mdp.reward)
    eye = np.eye(mdp.num_states)
    v = np.linalg.solve(eye - mdp.discount * p_pi, r_pi)
    q = mdp.reward + mdp.discount * np.einsum("saz,z->sa", mdp.transition, v)
    adv = q - np.einsum("sa,sa->s", probs, q)[:, None]
    d = np.linalg.solve(
        eye - mdp.discount * p_pi.T, (1.0 - mdp.discount) * mdp.initial_dist
    )
    d = np.where(d < 0.0, 0.0, d)
    return q, adv, d


def expected_logit_update(
    policy: LinearSoftmaxPolicy, mdp: TabularMdp, s: int, a: int
) -> float:
    """Expected logit update at (s, a): pi(a|s) * A(s, a)."""
    probs = policy.probs()
    _, adv, _ = _policy_eval(mdp, probs)
    return float(probs[s, a] * adv[s, a])


def _update_direction(probs, adv, entropy_coeff):
    """Per-(state, action) expected logit-update direction G(s, a)."""
    if entropy_coeff == 0.0:
        return probs * adv
    with np.errstate(divide="ignore"):
        log_probs = np.log(probs)
    plogp = np.where(probs > 0.0, probs * log_probs, 0.0)
    entropy = -plogp.sum(axis=1, keepdims=True)
    correction = np.where(probs > 0.0, log_probs, 0.0) + entropy
    return probs * (adv - entropy_coeff * correction)


def expected_param_update(
    policy: LinearSoftmaxPolicy,
    mdp: TabularMdp,
    learning_rate: float = 1.0,
    entropy_coeff: float = 0.0,
) -> np.ndarray:
    """Delta w_a = eta * E_{s~d_pi}[ pi(a|s) A(s,a) phi(s) ] as an (n, d) array.

    With entropy_coeff > 0 the advantage is replaced by the entropy-regularized
    direction A - beta*(log pi + H).
    """
    probs = policy.probs()
    _, adv, d = _policy_eval(mdp, probs)
    g = _update_direction(probs, adv, entropy_coeff)
    return learning_rate * (d[:, None] * g).T @ policy.features


def sampled_param_update(
    policy: LinearSoftmaxPolicy,
    mdp: TabularMdp,
    rng: np.random.Generator,
    learning_rate: float = 1.0,
) -> np.ndarray:
    """Single-sample stochastic estimate of expected_param_update (beta = 0)."""
    probs = policy.probs()
    _, adv, d = _policy_eval(mdp, probs)
    s = int(rng.choice(mdp.num_states, p=d / d.sum()))
    a_taken = int(rng.choice(mdp.num_actions, p=probs[s]))
    score = -probs[s].copy()
    score[a_taken] += 1.0
    return learning_rate * adv[s, a_taken] * np.outer(score, policy.features[s])


def _target_condition_flags(q, adv, d, probs, masks, s_star, a, features, learning_rate):
    """(cond_i, cond_ii, kappa_closed_form) for the target pair."""
    visited = np.flatnonzero(d > VISITATION_EPS)
    cond_i = True
    for s in visited:
        if masks[s, a]:
            cond_i = False  # target action must be invalid at visited states
            continue
        valid = masks[s]
        if not valid.any():
            raise RuntimeError(f"visited state {s} has no valid action")
        if np.max(q[s][valid]) - q[s, a] <= 0.0:
            cond_i = False
    c = probs[:, a] * np.abs(adv[:, a])
    alignment = float(features[s_star] @ ((d * c) @ features))
    kappa = learning_rate * alignment
    return cond_i, alignment > 0.0, kappa


def suppression_rate(
    policy: LinearSoftmaxPolicy,
    mdp: TabularMdp,
    masks: np.ndarray,
    s_star: int,
    a: int,
    learning_rate: float = 0.1,
) -> SuppressionRate:
    """Closed-form kappa = eta * phi(s*)^T E_{s~d}[c(s) phi(s)], with flags."""
    probs = policy.probs()
    q, adv, d = _policy_eval(mdp, probs)
    cond_i, cond_ii, kappa = _target_condition_flags(
        q, adv, d, probs, np.asarray(masks, dtype=bool), s_star, a,
        policy.features, learning_rate,
    )
    return SuppressionRate(kappa=kappa, condition_i_ok=cond_i, condition_ii_ok=cond_ii)


def zero_sum_check(
    policy: LinearSoftmaxPolicy,
    mdp: TabularMdp,
    entropy_coeff: float = 0.0,
    learning_rate: float = 1.0,
    num_samples: int = 256,
    seed: int = 0,
) -> ZeroSumReport:
    """Max |sum_j Delta z_j(s)| over every state (parameter sharing included).

    Also evaluates the sampled-gradient variant: for sampled actions a', the
    per-sample score vector 1{a'=j} - pi(j|s) must sum to zero.
    """
    delta_w = expected_param_update(policy, mdp, learning_rate, entropy_coeff)
    delta_z = policy.features @ delta_w.T
    expected_residual = float(np.max(np.abs(delta_z.sum(axis=1))))
    probs = policy.probs()
    rng = np.random.default_rng(seed)
    sampled_residual = 0.0
    for _ in range(num_samples):
        s = int(rng.integers(mdp.num_states))
        a_taken = int(rng.choice(mdp.num_actions, p=probs[s]))
        score = -probs[s].copy()
        score[a_taken] += 1.0
        sampled_residual = max(sampled_residual, abs(float(score.sum())))
    return ZeroSumReport(expected_residual, sampled_residual)


# ---------------------------------------------------------------------------
# Full dynamics run
# ---------------------------------------------------------------------------

def run_dynamics(
    mdp: TabularMdp,
    masks: np.ndarray,
    features: np.ndarray,
    config: DynamicsConfig,
    target: tuple,
) -> SuppressionTrace:
    """Iterate expected-gradient steps from uniform init and record the trace.

    target is the first-valid-occurrence pair (s_star, a): the action must be
    invalid at every visited state and s_star must carry zero visitation.
    Raises on logit overflow (|z| > logit_guard). When check_bound is set, the
    probability bound is asserted at every step at which both condition flags
    have held so far.
    """
    masks = np.asarray(masks, dtype=bool)
    s_star, a_target = target
    n = mdp.num_actions
    eta = config.learning_rate
    beta = config.entropy_coeff
    policy = LinearSoftmaxPolicy.uniform(features, n)
    phi = policy.features
    rng = np.random.default_rng(config.seed)

    if beta > 0.0:
        floor_log = -mdp.r_max / (beta * (1.0 - mdp.discount))
    else:
        floor_log = -np.inf

    rows = {
        name: []
        for name in (
            "step", "kappa", "K", "realized", "predicted", "pi", "log_pi",
            "bound", "cond_i", "cond_ii", "zero_sum", "prop", "jensen",
        )
    }
    cum_k = 0.0
    flags_held = True
    quiet_steps = 0
    converged = False
    max_steps = config.num_steps

    for tau in range(max_steps):
        z = phi @ policy.weights.T
        if np.max(np.abs(z)) > config.logit_guard:
            raise RuntimeError(
                f"logit overflow at step {tau}: max |z| = {np.max(np.abs(z)):.1f} "
                f"exceeds guard {config.logit_guard}"
            )
        z_shift = z - z.max(axis=1, keepdims=True)
        log_probs = z_shift - np.log(np.exp(z_shift).sum(axis=1, keepdims=True))
        probs = np.exp(log_probs)
        q, adv, d = _policy_eval(mdp, probs)
        cond_i, cond_ii, _ = _target_condition_flags(
            q, adv, d, probs, masks, s_star, a_target, phi, eta
        )
        g = _update_direction(probs, adv, beta)
        if config.update_mode == "expected":
            delta_w = eta * (d[:, None] * g).T @ phi
        else:
            delta_w = sampled_param_update(policy, mdp, rng, eta)
        delta_z = phi @ delta_w.T
        zero_sum = float(np.max(np.abs(delta_z.sum(axis=1))))
        realized = float(delta_z[s_star, a_target])
        # Independent accumulation path for the closed-form prediction.
        if config.update_mode == "expected":
            predicted = eta * sum(
                d[s] * g[s, a_target] * float(phi[s_star] @ phi[s])
                for s in range(mdp.num_states)
            )
        else:
            predicted = float(phi[s_star] @ delta_w[a_target])
        kappa = -realized
        cum_k += kappa

        policy.weights = policy.weights + delta_w

        z_new = phi @ policy.weights.T
        sigma = z_new[s_star]  # cumulative logit change (uniform init at 0)
        log_norm = _logsumexp(sigma)
        log_pi = float(sigma[a_target] - log_norm)
        jensen_slack = float(log_norm - np.log(n))

        flags_held = flags_held and cond_i and cond_ii
        if config.check_bound and flags_held:
            violation = log_pi - (-cum_k - np.log(n))
            if violation > 1e-10:
                raise RuntimeError(
                    f"probability bound violated at step {tau}: "
                    f"log pi exceeds -K - log n by {violation:.3e}"
                )

        rows["step"].append(tau)
        rows["kappa"].append(kappa)
        rows["K"].append(cum_k)
        rows["realized"].append(realized)
        rows["predicted"].append(predicted)
        rows["pi"].append(np.exp(log_pi))
        rows["log_pi"].append(log_pi)
        rows["bound"].append(np.exp(-cum_k) / n)
        rows["cond_i"].append(cond_i)
        rows["cond_ii"].append(cond_ii)
        rows["zero_sum"].append(zero_sum)
        rows["prop"].append(abs(realized - predicted))
        rows["jensen"].append(jensen_slack)

        if np.max(np.abs(delta_z)) < config.convergence_tol:
            quiet_steps += 1
            if quiet_steps >= config.convergence_window:
                converged = True
                if config.run_until_converged:
                    break
        else:
            quiet_steps = 0

    return SuppressionTrace(
        target_state=s_star,
        target_action=a_target,
        num_actions=n,
        entropy_coeff=beta,
        entropy_floor_log=floor_log,
        step=np.array(rows["step"], dtype=int),
        kappa=np.array(rows["kappa"]),
        cum_suppression=np.array(rows["K"]),
        realized_dz=np.array(rows["realized"]),
        predicted_dz=np.array(rows["predicted"]),
        pi_target=np.array(rows["pi"]),
        log_pi_target=np.array(rows["log_pi"]),
        bound=np.array(rows["bound"]),
        cond_i=np.array(rows["cond_i"], dtype=bool),
        cond_ii=np.array(rows["cond_ii"], dtype=bool),
        zero_sum_residual=np.array(rows["zero_sum"]),
        prop_residual=np.array(rows["prop"]),
        jensen_slack=np.array(rows["jensen"]),
        converged=converged,
        steps_run=len(rows["step"]),
        final_weights=policy.weights.copy(),
    )


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.exp(x - m).sum()))
