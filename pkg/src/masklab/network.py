"""Actor-critic MLP with a shared encoder, policy/value heads, and one binary
validity-classification head per action, all in 64-bit numpy.

The network carries its own exact reverse-mode pass: forward() caches the
activations and backward() maps gradients at the three head outputs to a flat
parameter-gradient vector. Keeping this explicit (instead of an autodiff
framework) makes the finite-difference contracts cheap to state and check.

Masking modes for the action distribution:

  * unmasked          - plain softmax over all logits
  * oracle_masked     - invalid actions excluded: exactly zero probability
  * soft_masked       - invalid logits offset by -20: near-zero but positive
  * predicted_masked  - oracle-style masking with 1[sigmoid(h_a) > tau];
                        rows with no action above threshold fall back to
                        all-valid
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SOFT_MASK_VALUE = -20.0

MODES = ("unmasked", "oracle_masked", "soft_masked", "predicted_masked")


@dataclass
class ParameterVector:
    """Flat view of all parameters plus the named segment map."""

    values: np.ndarray
    segments: tuple  # ((name, shape, offset), ...)

    def segment(self, name: str) -> np.ndarray:
        for seg_name, shape, offset in self.segments:
            if seg_name == name:
                size = int(np.prod(shape))
                return self.values[offset : offset + size].reshape(shape)
        raise KeyError(name)


@dataclass
class ForwardResult:
    probs: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    validity_probs: np.ndarray
    mask_used: np.ndarray | None
    mode: str


@dataclass
class CorrelationProbe:
    """Pearson correlation between mean encoder activations of the states
    where an action is valid and the states where it is invalid."""

    target_action: int
    correlation: float | None
    num_valid_states: int
    num_invalid_states: int

    @property
    def missing(self) -> bool:
        return self.correlation is None


class MlpActorCritic:
    """2x64 tanh encoder; zero-initialized policy head so pi_0 = 1/n exactly."""

    PARAM_NAMES = (
        "enc_w1", "enc_b1", "enc_w2", "enc_b2",
        "policy_w", "policy_b", "value_w", "value_b", "cls_w", "cls_b",
    )

    def __init__(self, obs_dim: int, num_actions: int, hidden: int = 64, seed: int = 0):
        self.obs_dim = obs_dim
        self.num_actions = num_actions
        self.hidden = hidden
        self.classification_trained = False
        rng = np.random.default_rng(seed)

        def xavier(rows, cols):
            bound = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols))

        self.enc_w1 = xavier(hidden, obs_dim)
        self.enc_b1 = np.zeros(hidden)
        self.enc_w2 = xavier(hidden, hidden)
        self.enc_b2 = np.zeros(hidden)
        self.policy_w = np.zeros((num_actions, hidden))
        self.policy_b = np.zeros(num_actions)
        self.value_w = xavier(1, hidden)[0]
        self.value_b = np.zeros(1)
        self.cls_w = xavier(num_actions, hidden)
        self.cls_b = np.zeros(num_actions)

    # -- parameter plumbing ---------------------------------------------------

    def _params(self):
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def segment_map(self):
        segments = []
        offset = 0
        for name, arr in zip(self.PARAM_NAMES, self._params()):
            segments.append((name, arr.shape, offset))
            offset += arr.size
        return tuple(segments)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self._params())

    def parameter_vector(self) -> ParameterVector:
        flat = np.concatenate([p.ravel() for p in self._params()])
        return ParameterVector(values=flat, segments=self.segment_map())

    def load_parameter_vector(self, flat) -> None:
        flat = flat.values if isinstance(flat, ParameterVector) else np.asarray(flat)
        if flat.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {flat.shape}")
        offset = 0
        for name, arr in zip(self.PARAM_NAMES, self._params()):
            setattr(self, name, flat[offset : offset + arr.size].reshape(arr.shape).copy())
            offset += arr.size

    # -- forward --------------------------------------------------------------

    def encode(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        h1 = np.tanh(obs @ self.enc_w1.T + self.enc_b1)
        return np.tanh(h1 @ self.enc_w2.T + self.enc_b2)

    def forward_cache(self, obs: np.ndarray) -> dict:
        """Raw head outputs plus the activations needed by backward()."""
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        h1 = np.tanh(obs @ self.enc_w1.T + self.enc_b1)
        phi = np.tanh(h1 @ self.enc_w2.T + self.enc_b2)
        logits = phi @ self.policy_w.T + self.policy_b
        values = phi @ self.value_w + self.value_b[0]
        cls_logits = phi @ self.cls_w.T + self.cls_b
        return {
            "obs": obs, "h1": h1, "phi": phi,
            "logits": logits, "values": values, "cls_logits": cls_logits,
        }

    def forward(
        self,
        obs: np.ndarray,
        mode: str = "unmasked",
        mask: np.ndarray | None = None,
        threshold: float = 0.5,
    ) -> ForwardResult:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        cache = self.forward_cache(obs)
        logits = cache["logits"]
        validity_probs = sigmoid(cache["cls_logits"])
        mask_used = None
        if mode == "unmasked":
            log_probs = log_softmax(logits)
        elif mode == "oracle_masked":
            mask_used = _check_mask(mask, logits.shape)
            log_probs = masked_log_softmax(logits, mask_used)
        elif mode == "soft_masked":
            mask_used = _check_mask(mask, logits.shape)
            log_probs = log_softmax(soft_masked_logits(logits, mask_used))
        else:  # predicted_masked
            mask_used = predicted_mask(validity_probs, threshold)
            log_probs = masked_log_softmax(logits, mask_used)
        return ForwardResult(
            probs=np.exp(log_probs),
            log_probs=log_probs,
            values=cache["values"],
            validity_probs=validity_probs,
            mask_used=mask_used,
            mode=mode,
        )

    # -- backward ---------------------------------------------------------------

    def backward(
        self,
        cache: dict,
        dlogits: np.ndarray | None = None,
        dvalues: np.ndarray | None = None,
        dcls_logits: np.ndarray | None = None,
    ) -> np.ndarray:
        """Exact gradient of a scalar loss given its head-output gradients."""
        obs, h1, phi = cache["obs"], cache["h1"], cache["phi"]
        B = obs.shape[0]
        if dlogits is None:
            dlogits = np.zeros((B, self.num_actions))
        if dvalues is None:
            dvalues = np.zeros(B)
        if dcls_logits is None:
            dcls_logits = np.zeros((B, self.num_actions))

        d_policy_w = dlogits.T @ phi
        d_policy_b = dlogits.sum(axis=0)
        d_value_w = dvalues @ phi
        d_value_b = np.array([dvalues.sum()])
        d_cls_w = dcls_logits.T @ phi
        d_cls_b = dcls_logits.sum(axis=0)

        dphi = dlogits @ self.policy_w + np.outer(dvalues, self.value_w) + dcls_logits @ self.cls_w
        dpre2 = dphi * (1.0 - phi * phi)
        d_enc_w2 = dpre2.T @ h1
        d_enc_b2 = dpre2.sum(axis=0)
        dh1 = dpre2 @ self.enc_w2
        dpre1 = dh1 * (1.0 - h1 * h1)
        d_enc_w1 = dpre1.T @ obs
        d_enc_b1 = dpre1.sum(axis=0)

        grads = {
            "enc_w1": d_enc_w1, "enc_b1": d_enc_b1,
            "enc_w2": d_enc_w2, "enc_b2": d_enc_b2,
            "policy_w": d_policy_w, "policy_b": d_policy_b,
            "value_w": d_value_w, "value_b": d_value_b,
            "cls_w": d_cls_w, "cls_b": d_cls_b,
        }
        return np.concatenate([grads[name].ravel() for name in self.PARAM_NAMES])


# ---------------------------------------------------------------------------
# softmax / masking primitives
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log-softmax over the valid support; invalid entries get -inf (prob 0)."""
    neg_inf = np.where(mask, logits, -np.inf)
    shifted = neg_inf - neg_inf.max(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        ex = np.exp(shifted)
    total = ex.sum(axis=1, keepdims=True)
    return shifted - np.log(total)


def soft_masked_logits(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return logits + SOFT_MASK_VALUE * (~mask).astype(np.float64)


def predicted_mask(validity_probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold the validity heads; rows with no prediction above threshold
    fall back to treating every action as valid."""
    mask = validity_probs > threshold
    empty = ~mask.any(axis=1)
    if empty.any():
        mask = mask.copy()
        mask[empty] = True
    return mask


def masked_entropy(log_probs: np.ndarray) -> np.ndarray:
    """Entropy per row; zero-probability entries contribute exactly zero."""
    probs = np.exp(log_probs)
    terms = np.zeros_like(probs)
    support = probs > 0.0
    terms[support] = probs[support] * log_probs[support]
    return -terms.sum(axis=1)


def _check_mask(mask, shape):
    if mask is None:
        raise ValueError("masked mode requires a mask")
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {shape}")
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one valid action")
    return mask


# ---------------------------------------------------------------------------
# feature-correlation probe
# ---------------------------------------------------------------------------

def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


def feature_correlation(
    net: MlpActorCritic,
    observations: np.ndarray,
    validity: np.ndarray,
    action: int,
) -> CorrelationProbe:
    """Correlation of group-mean encoder activations, split by validity[:, action].

    Reported as missing when either group has fewer than two states or a
    group-mean vector has zero variance across feature dimensions.
    """
    validity = np.asarray(validity, dtype=bool)
    phi = net.encode(observations)
    valid_group = phi[validity[:, action]]
    invalid_group = phi[~validity[:, action]]
    if valid_group.shape[0] < 2 or invalid_group.shape[0] < 2:
        return CorrelationProbe(action, None, valid_group.shape[0], invalid_group.shape[0])
    r = pearson(valid_group.mean(axis=0), invalid_group.mean(axis=0))
    return CorrelationProbe(action, r, valid_group.shape[0], invalid_group.shape[0])


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

def save_snapshot(net: MlpActorCritic, path, metadata: dict | None = None) -> None:
    """One JSON header line (dims, segment map, metadata) + raw float64 bytes."""
    header = {
        "obs_dim": net.obs_dim,
        "num_actions": net.num_actions,
        "hidden": net.hidden,
        "classification_trained": net.classification_trained,
        "segments": [
            {"name": name, "shape": list(shape), "offset": offset}
            for name, shape, offset in net.segment_map()
        ],
        "metadata": metadata or {},
    }
    flat = net.parameter_vector().values
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.astype("<f8").tobytes())


def load_snapshot(path) -> tuple:
    """Returns (net, metadata)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    net = MlpActorCritic(header["obs_dim"], header["num_actions"], header["hidden"])
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    net.load_parameter_vector(flat)
    net.classification_trained = bool(header.get("classification_trained", False))
    return net, header.get("metadata", {})
