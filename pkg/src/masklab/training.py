"""On-policy PPO training over batched toy environments for conditions C1-C4,
with the probe measurements used by the research questions:

  * pi(target | probe states) every update, under the condition's own policy
    mode (masked conditions probe the masked policy, unmasked the raw one),
  * the latent (unmasked) probability of the target action where it is
    invalid,
  * feature correlation between valid/invalid states for the target action,
  * first-occurrence suppression metrics: log-probability when a probe state
    first enters a training batch, the suppression ratio against uniform
    initialization, and time until the probability recovers past 0.5.

Runs are deterministic given the config and seed: one RNG drives environment
sampling and minibatch shuffling, updates are single-threaded, and the metric
CSV is written with full-precision floats.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from .envs import DoorConfig, DoorCorridor, StaircaseConfig, StaircaseCorridor
from .losses import (
    LossConfig,
    RolloutBatch,
    gae,
    normalize_advantages,
    total_loss_grad,
)
from .network import MlpActorCritic, feature_correlation

METRIC_COLUMNS = (
    "update", "step", "condition", "seed", "return_mean", "return_std",
    "pi_target_valid", "pi_target_invalid", "valid_rate", "feat_corr",
    "cls_acc", "loss_ppo", "loss_cls", "kappa_proxy",
)

EVAL_MODES = ("ground_truth_mask", "predicted_mask", "unmasked")


@dataclass
class TrainConfig:
    condition: str = "C1"
    env: str = "staircase"  # "staircase" | "door"
    env_params: dict = field(default_factory=dict)
    num_envs: int = 64
    rollout_len: int = 32
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 3e-4
    anneal_lr: bool = False
    total_steps: int = 200_000
    seed: int = 0
    hidden: int = 64
    eval_mode: str = "ground_truth_mask"

    def __post_init__(self):
        if self.condition not in ("C1", "C2", "C3", "C4"):
            raise ValueError(f"unknown condition {self.condition!r}")
        batch = self.num_envs * self.rollout_len
        if batch % self.minibatches != 0:
            raise ValueError("batch size must divide evenly into minibatches")
        if self.env not in ("staircase", "door"):
            raise ValueError(f"unknown env {self.env!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.rollout_len

    @property
    def num_updates(self) -> int:
        return max(1, self.total_steps // self.batch_size)


@dataclass
class SuppressionMetrics:
    first_occurrence_update: int | None = None
    first_occurrence_logprob: float | None = None
    suppression_ratio: float | None = None
    time_to_valid: int | None = None
    first_target_visit_update: int | None = None


@dataclass
class EvalReport:
    eval_mode: str
    mean_return: float
    std_return: float
    mean_length: float
    cls_accuracy: float
    episodes: int
    predictor_fallback: bool = False


@dataclass
class TrainResult:
    net: MlpActorCritic
    history: list
    suppression: SuppressionMetrics
    config: TrainConfig
    csv_text: str


def make_env(config: TrainConfig):
    if config.env == "staircase":
        return StaircaseCorridor(StaircaseConfig(**config.env_params))
    return DoorCorridor(DoorConfig(**config.env_params))


def _sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return (u[:, None] > cdf).sum(axis=1)


def _condition_mode(condition: str) -> str:
    return "unmasked" if condition == "C2" else "oracle_masked"


class RolloutWorker:
    """Owns the batched environments and their episode accumulators."""

    def __init__(self, config: TrainConfig):
        self.envs = [make_env(config) for _ in range(config.num_envs)]
        self.acc_returns = np.zeros(config.num_envs)

    def collect(
        self,
        net: MlpActorCritic,
        condition: str,
        rollout_len: int,
        rng: np.random.Generator,
        discount: float,
        gae_lambda: float,
    ):
        """One synchronous rollout; returns (batch, stats).

        stats: fraction of valid chosen actions, episode returns/lengths
        completed during the rollout, and the set of state ids encountered.
        """
        envs = self.envs
        E = len(envs)
        mode = _condition_mode(condition)
        obs_buf, act_buf, lp_buf = [], [], []
        rew_buf, done_buf, val_buf, label_buf = [], [], [], []
        valid_chosen = 0
        episode_returns, episode_lengths = [], []
        seen_states = set()

        for i, env in enumerate(envs):
            if env.done:
                env.reset()
                self.acc_returns[i] = 0.0

        for _ in range(rollout_len):
            obs = np.stack([env.observation() for env in envs])
            masks = np.stack([env.validity_mask().mask for env in envs])
            for env in envs:
                seen_states.add(env.state_id())
            out = net.forward(obs, mode, mask=masks if mode == "oracle_masked" else None)
            actions = _sample_actions(out.probs, rng)
            log_probs = out.log_probs[np.arange(E), actions]
            rewards = np.zeros(E)
            dones = np.zeros(E, dtype=bool)
            for i, env in enumerate(envs):
                _, r, done, valid = env.step(int(actions[i]))
                rewards[i] = r
                dones[i] = done
                valid_chosen += int(valid)
                self.acc_returns[i] += r
                if done:
                    episode_returns.append(self.acc_returns[i])
                    episode_lengths.append(env.steps)
                    self.acc_returns[i] = 0.0
                    env.reset()
            obs_buf.append(obs)
            act_buf.append(actions)
            lp_buf.append(log_probs)
            rew_buf.append(rewards)
            done_buf.append(dones)
            val_buf.append(out.values)
            label_buf.append(masks)  # oracle validity labels nu(s, .)

        bootstrap_obs = np.stack([env.observation() for env in envs])
        bootstrap_values = net.forward_cache(bootstrap_obs)["values"]

        T = rollout_len
        rewards = np.stack(rew_buf)
        values = np.stack(val_buf)
        dones = np.stack(done_buf)
        advantages = np.zeros((T, E))
        returns = np.zeros((T, E))
        for e in range(E):
            advantages[:, e], returns[:, e] = gae(
                rewards[:, e], values[:, e], dones[:, e],
                gamma=discount, lam=gae_lambda,
                bootstrap_value=float(bootstrap_values[e]),
            )

        batch = RolloutBatch(
            observations=np.concatenate(obs_buf),
            actions=np.concatenate(act_buf),
            old_log_probs=np.concatenate(lp_buf),
            rewards=rewards.ravel(),
            dones=dones.ravel(),
            values=values.ravel(),
            validity_labels=np.concatenate(label_buf),
            masks=np.concatenate(label_buf),
            advantages=advantages.ravel(),
            returns=returns.ravel(),
        )
        stats = {
            "valid_rate": valid_chosen / (T * E),
            "episode_returns": episode_returns,
            "episode_lengths": episode_lengths,
            "seen_states": seen_states,
        }
        return batch, stats


class Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, lr_scale=1.0):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * lr_scale * m_hat / (np.sqrt(v_hat) + self.eps)


def train(
    config: TrainConfig,
    loss_config: LossConfig | None = None,
    metrics_path=None,
    config_hash: str = "",
) -> TrainResult:
    """Run PPO under one condition; returns the net, metric history, and the
    metric CSV text (also written to metrics_path when given).

    Aborts with a diagnostic dump if any loss goes non-finite.
    """
    loss_config = loss_config or LossConfig()
    rng = np.random.default_rng(config.seed)
    probe_env = make_env(config)
    worker = RolloutWorker(config)

    net = MlpActorCritic(
        probe_env.observation_dim, probe_env.num_actions,
        hidden=config.hidden, seed=config.seed,
    )
    if config.condition in ("C3", "C4") and loss_config.classification_coeff > 0:
        net.classification_trained = True

    # Fixed probe sets: states where the target action is valid / invalid.
    target_action = probe_env.target_action
    all_states = probe_env.enumerate_states()
    target_states = probe_env.target_states()
    probe_obs = np.stack([probe_env.observation_for_state(s) for s in target_states])
    probe_masks = np.stack(
        [probe_env.validity_mask_for_state(s).mask for s in target_states]
    )
    invalid_states = [s for s in all_states if s not in set(target_states)]
    invalid_obs = np.stack([probe_env.observation_for_state(s) for s in invalid_states])
    all_obs = np.stack([probe_env.observation_for_state(s) for s in all_states])
    all_validity = np.stack(
        [probe_env.validity_mask_for_state(s).mask for s in all_states]
    )
    target_ids = set(target_states)
    probe_mode = _condition_mode(config.condition)

    def probe_pi(network):
        outp = network.forward(
            probe_obs, probe_mode,
            mask=probe_masks if probe_mode == "oracle_masked" else None,
        )
        return float(outp.probs[:, target_action].mean())

    suppression = SuppressionMetrics()
    uniform_prob = 1.0 / probe_env.num_actions
    history = []
    out = io.StringIO()
    out.write(f"# config_hash={config_hash} seed={config.seed}\n")
    out.write(",".join(METRIC_COLUMNS) + "\n")
    prev_probe_logit = None
    optimizer = Adam(net.num_params, config.learning_rate)

    for update in range(config.num_updates):
        batch, stats = worker.collect(
            net, config.condition, config.rollout_len, rng,
            loss_config.discount, loss_config.gae_lambda,
        )

        # First entry of a probe state into a training batch: snapshot the
        # collecting policy's probability (first-occurrence log-probability).
        if (
            suppression.first_occurrence_update is None
            and stats["seen_states"] & target_ids
        ):
            pi_now = probe_pi(net)
            suppression.first_occurrence_update = update
            suppression.first_target_visit_update = update
            suppression.first_occurrence_logprob = float(np.log(max(pi_now, 1e-300)))
            suppression.suppression_ratio = pi_now / uniform_prob

        lr_scale = 1.0 - update / config.num_updates if config.anneal_lr else 1.0
        diag_acc = {"loss_ppo": [], "loss_cls": []}
        indices = np.arange(len(batch))
        mb_size = len(batch) // config.minibatches
        for _ in range(config.epochs):
            perm = rng.permutation(indices)
            for k in range(config.minibatches):
                mb = batch.select(perm[k * mb_size : (k + 1) * mb_size])
                if loss_config.normalize_advantages:
                    mb.advantages = normalize_advantages(mb.advantages)
                loss, grad, diag = total_loss_grad(mb, net, loss_config, config.condition)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at update {update}: "
                        f"ppo={diag['loss_ppo']} cls={diag['loss_cls']} "
                        f"|grad|={np.linalg.norm(grad):.3e}"
                    )
                new_params = optimizer.step(
                    net.parameter_vector().values, grad, lr_scale
                )
                net.load_parameter_vector(new_params)
                diag_acc["loss_ppo"].append(diag["loss_ppo"])
                diag_acc["loss_cls"].append(diag["loss_cls"])

        # Post-update probes.
        pi_target_valid = probe_pi(net)
        latent = net.forward(invalid_obs, "unmasked")
        pi_target_invalid = float(latent.probs[:, target_action].mean())
        probe_logit = float(
            net.forward_cache(probe_obs)["logits"][:, target_action].mean()
        )
        kappa_proxy = 0.0 if prev_probe_logit is None else prev_probe_logit - probe_logit
        prev_probe_logit = probe_logit

        if (
            suppression.first_occurrence_update is not None
            and suppression.time_to_valid is None
            and pi_target_valid > 0.5
        ):
            suppression.time_to_valid = update - suppression.first_occurrence_update

        probe = feature_correlation(net, all_obs, all_validity, target_action)
        full_out = net.forward(batch.observations, "unmasked")
        cls_acc = float(
            np.mean(
                (full_out.validity_probs > loss_config.threshold)
                == batch.validity_labels.astype(bool)
            )
        )
        ep_returns = stats["episode_returns"]
        row = {
            "update": update,
            "step": (update + 1) * config.batch_size,
            "condition": config.condition,
            "seed": config.seed,
            "return_mean": float(np.mean(ep_returns)) if ep_returns else float("nan"),
            "return_std": float(np.std(ep_returns)) if ep_returns else float("nan"),
            "pi_target_valid": pi_target_valid,
            "pi_target_invalid": pi_target_invalid,
            "valid_rate": stats["valid_rate"],
            "feat_corr": float("nan") if probe.missing else probe.correlation,
            "cls_acc": cls_acc,
            "loss_ppo": float(np.mean(diag_acc["loss_ppo"])),
            "loss_cls": float(np.mean(diag_acc["loss_cls"])),
            "kappa_proxy": kappa_proxy,
        }
        history.append(row)
        out.write(",".join(_format_cell(row[c]) for c in METRIC_COLUMNS) + "\n")

    csv_text = out.getvalue()
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write(csv_text)
    return TrainResult(
        net=net, history=history, suppression=suppression,
        config=config, csv_text=csv_text,
    )


def _format_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def evaluate(
    net: MlpActorCritic,
    config: TrainConfig,
    eval_mode: str,
    episodes: int = 512,
    seed: int = 10_000,
    threshold: float = 0.5,
    parallel: int = 64,
) -> EvalReport:
    """Stochastic-policy evaluation under one deployment mode.

    predicted_mask mode needs trained classification heads; nets without them
    (C1/C2) are evaluated with an all-valid fallback and flagged.
    """
    if eval_mode not in EVAL_MODES:
        raise ValueError(f"unknown eval_mode {eval_mode!r}")
    fallback = eval_mode == "predicted_mask" and not net.classification_trained
    rng = np.random.default_rng(seed)
    returns, lengths = [], []
    cls_hits, cls_total = 0, 0
    remaining = episodes
    while remaining > 0:
        group = min(parallel, remaining)
        envs = [make_env(config) for _ in range(group)]
        acc = np.zeros(group)
        steps = np.zeros(group, dtype=int)
        active = np.ones(group, dtype=bool)
        while active.any():
            obs = np.stack([env.observation() for env in envs])
            masks = np.stack([env.validity_mask().mask for env in envs])
            if eval_mode == "ground_truth_mask":
                outp = net.forward(obs, "oracle_masked", mask=masks)
            elif eval_mode == "unmasked" or fallback:
                outp = net.forward(obs, "unmasked")
            else:
                outp = net.forward(obs, "predicted_masked", threshold=threshold)
            hits = (outp.validity_probs > threshold) == masks
            cls_hits += int(hits[active].sum())
            cls_total += int(active.sum()) * masks.shape[1]
            actions = _sample_actions(outp.probs, rng)
            for i, env in enumerate(envs):
                if not active[i]:
                    continue
                _, r, done, _ = env.step(int(actions[i]))
                acc[i] += r
                steps[i] += 1
                if done:
                    active[i] = False
        returns.extend(acc.tolist())
        lengths.extend(steps.tolist())
        remaining -= group
    return EvalReport(
        eval_mode=eval_mode,
        mean_return=float(np.mean(returns)),
        std_return=float(np.std(returns)),
        mean_length=float(np.mean(lengths)),
        cls_accuracy=cls_hits / max(cls_total, 1),
        episodes=episodes,
        predictor_fallback=fallback,
    )


def ablation_sweep(
    base_config: TrainConfig,
    loss_config: LossConfig,
    lambdas,
    seeds,
    eval_episodes: int = 256,
):
    """Train + evaluate across classification coefficients.

    Every cell runs the C4 composition with its own lambda; lambda = 0 makes
    that composition metric-identical to C1 at the same seed. Returns one row
    per (lambda, seed) with GT/Pred returns and final accuracy.
    """
    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = replace(base_config, condition="C4", seed=seed)
            lcfg = replace(loss_config, classification_coeff=float(lam))
            result = train(cfg, lcfg)
            gt = evaluate(result.net, cfg, "ground_truth_mask", episodes=eval_episodes)
            pred = evaluate(result.net, cfg, "predicted_mask", episodes=eval_episodes)
            rows.append(
                {
                    "lambda": float(lam),
                    "seed": seed,
                    "gt_return": gt.mean_return,
                    "pred_return": pred.mean_return,
                    "cls_acc": result.history[-1]["cls_acc"],
                    "pred_fallback": pred.predictor_fallback,
                    "csv_text": result.csv_text,
                }
            )
    return rows
