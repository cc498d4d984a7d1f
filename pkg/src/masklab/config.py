"""Strict JSON run configuration.

A run config is a JSON object with a command plus per-concern sections; every
key is checked against the schema below and unknown keys are rejected with
their dotted path (experiment misconfiguration should fail loudly, not run
with defaults). Parsing is round-trip stable: parse -> serialize -> parse is
the identity.

The "mdp" section defines a tabular MDP (sparse transition quads, reward
triples, and a validity table) for theory runs on hand-written models.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .dynamics import DynamicsConfig
from .losses import LossConfig
from .mdp import TabularMdp
from .training import TrainConfig

OUTPUT_ROOT_ENV = "MASKLAB_OUTPUT_ROOT"

COMMANDS = ("verify-theory", "train", "eval", "sweep", "report")

_SCHEMA = {
    "command": None,
    "seeds": None,
    "output_dir": None,
    "env": {
        "name", "length", "num_actions", "horizon", "goal_reward",
        "invalid_penalty", "num_cells", "door_cells",
    },
    "train": {
        "condition", "num_envs", "rollout_len", "epochs", "minibatches",
        "learning_rate", "anneal_lr", "total_steps", "hidden", "eval_mode",
    },
    "loss": {
        "clip_epsilon", "value_coeff", "entropy_coeff", "classification_coeff",
        "focal_gamma", "kl_soft_mask_value", "threshold", "gae_lambda",
        "discount", "normalize_advantages", "kl_prefactor",
    },
    "dynamics": {
        "learning_rate", "entropy_coeff", "num_steps", "update_mode",
        "check_bound", "run_until_converged", "convergence_window",
        "convergence_tol", "logit_guard", "seed",
    },
    "battery": {
        "lengths", "action_counts", "entropy_coeffs", "rhos", "steps",
        "long_steps", "long_action_counts", "gamma", "learning_rate",
        "sandwich_learning_rates",
    },
    "eval": {"snapshot", "mode", "episodes", "seed"},
    "sweep": {"param", "values", "eval_episodes"},
    "mdp": {
        "num_states", "num_actions", "discount", "r_max", "initial_dist",
        "transitions", "rewards", "valid",
    },
}


class ConfigError(ValueError):
    pass


def validate(data: dict) -> dict:
    """Reject unknown keys anywhere in the config; returns data unchanged."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for key, value in data.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is None:
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be an object")
        for sub in value:
            if sub not in allowed:
                raise ConfigError(f"unknown config key {key + '.' + sub!r}")
    if "command" in data and data["command"] not in COMMANDS:
        raise ConfigError(f"unknown command {data['command']!r}")
    return data


def loads(text: str) -> dict:
    return validate(json.loads(text))


def load(path) -> dict:
    with open(path) as fh:
        return loads(fh.read())


def dumps(config: dict) -> str:
    return json.dumps(config, sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def output_root(config: dict | None = None) -> str:
    env_override = os.environ.get(OUTPUT_ROOT_ENV)
    if env_override:
        return env_override
    if config and config.get("output_dir"):
        return config["output_dir"]
    return "runs"


# ---------------------------------------------------------------------------
# section -> dataclass builders
# ---------------------------------------------------------------------------

def build_train_config(config: dict, seed: int) -> TrainConfig:
    env = dict(config.get("env", {}))
    name = env.pop("name", "staircase")
    if "door_cells" in env:
        env["door_cells"] = tuple(env["door_cells"])
    section = dict(config.get("train", {}))
    return TrainConfig(env=name, env_params=env, seed=seed, **section)


def build_loss_config(config: dict) -> LossConfig:
    return LossConfig(**config.get("loss", {}))


def build_dynamics_config(config: dict) -> DynamicsConfig:
    return DynamicsConfig(**config.get("dynamics", {}))


def load_mdp(section: dict):
    """Tabular MDP + validity table from the sparse config format.

    transitions: [state, action, next_state, probability] quads
    rewards:     [state, action, reward] triples
    initial_dist: [state, probability] pairs
    valid:       [state, action] pairs (everything else is invalid)
    """
    S = int(section["num_states"])
    A = int(section["num_actions"])
    P = np.zeros((S, A, S))
    for s, a, s2, p in section["transitions"]:
        P[int(s), int(a), int(s2)] = float(p)
    R = np.zeros((S, A))
    for s, a, r in section.get("rewards", []):
        R[int(s), int(a)] = float(r)
    mu = np.zeros(S)
    for s, p in section["initial_dist"]:
        mu[int(s)] = float(p)
    masks = np.zeros((S, A), dtype=bool)
    for s, a in section.get("valid", []):
        masks[int(s), int(a)] = True
    r_max = float(section.get("r_max", max(float(np.max(np.abs(R))), 1e-12)))
    mdp = TabularMdp(S, A, P, R, float(section["discount"]), r_max, mu)
    return mdp, masks
