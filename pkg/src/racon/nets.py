"""Minimal feedforward stack: tanh MLPs with exact manual gradients, diagonal
Gaussian policy heads (optionally squashed to [0, 2]), and Adam.

Everything is float64 and batch-first: inputs are (B, in). The discriminator
needs the parameter gradient of its input-gradient penalty, so the MLP also
implements reverse-mode differentiation through a forward (tangent) pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
DEFAULT_HIDDEN = (1024, 512)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Mlp:
    """Per-layer weights (in, out) and biases; tanh hidden, linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def add_(self, other: "MlpGrads", scale: float = 1.0) -> "MlpGrads":
        for mine, theirs in zip(self.params(), other.params()):
            mine += scale * theirs
        return self


def zero_grads(mlp: Mlp) -> MlpGrads:
    return MlpGrads(
        weights=[np.zeros_like(w) for w in mlp.weights],
        biases=[np.zeros_like(b) for b in mlp.biases],
    )


def mlp_init(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    hidden=DEFAULT_HIDDEN,
    out_scale: float = 1.0,
) -> Mlp:
    """Glorot-uniform init; out_scale shrinks the last layer (small policy means)."""
    sizes = [in_dim, *hidden, out_dim]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        if i == len(sizes) - 2:
            limit *= out_scale
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases)


def forward(mlp: Mlp, x: np.ndarray):
    """Batch forward pass; the cache holds the layer activations for backward."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != mlp.in_dim:
        raise ValueError(f"input width {x.shape[1]} != network input {mlp.in_dim}")
    acts = [x]
    h = x
    for w, b in zip(mlp.weights[:-1], mlp.biases[:-1]):
        h = np.tanh(h @ w + b)
        acts.append(h)
    y = h @ mlp.weights[-1] + mlp.biases[-1]
    return y, (mlp, acts)


def backward(cache, out_grad: np.ndarray):
    """Exact gradients of sum(out_grad * output) w.r.t. params and input."""
    mlp, acts = cache
    out_grad = np.atleast_2d(np.asarray(out_grad, dtype=float))
    n_layers = len(mlp.weights)
    g_w = [None] * n_layers
    g_b = [None] * n_layers
    g = out_grad
    for layer in range(n_layers - 1, -1, -1):
        g_w[layer] = acts[layer].T @ g
        g_b[layer] = g.sum(axis=0)
        g = g @ mlp.weights[layer].T
        if layer > 0:
            g = g * (1.0 - acts[layer] ** 2)
    return MlpGrads(weights=g_w, biases=g_b), g


def input_gradient(mlp: Mlp, x: np.ndarray) -> np.ndarray:
    """Per-sample gradient of the scalar output w.r.t. the input, shape (B, in)."""
    if mlp.out_dim != 1:
        raise ValueError("input_gradient expects a scalar-output network")
    y, cache = forward(mlp, x)
    _, gx = backward(cache, np.ones_like(y))
    return gx


def grad_penalty(mlp: Mlp, x: np.ndarray):
    """Mean squared input-gradient norm and its exact parameter gradients.

    penalty = mean_i ||d y_i / d x_i||^2 for the scalar pre-activation output.
    The parameter gradient is obtained by reverse-differentiating a tangent
    (forward-mode) pass seeded with the input gradient held constant.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    batch = x.shape[0]
    n_layers = len(mlp.weights)
    _, (_, acts) = forward(mlp, x)

    # Input gradient g = dy/dx, plus the intermediate gradients per layer.
    up = np.ones((batch, 1))
    ups = [None] * n_layers  # gradient w.r.t. layer `l` pre-activation output
    g = up
    for layer in range(n_layers - 1, -1, -1):
        ups[layer] = g
        g = g @ mlp.weights[layer].T
        if layer > 0:
            g = g * (1.0 - acts[layer] ** 2)
    in_grad = g
    penalty = float(np.mean(np.einsum("ij,ij->i", in_grad, in_grad)))

    # Tangent pass u_l with v = 2/B * g (constant): d penalty / d theta equals
    # the parameter gradient of mean_i <v_i, dy_i/dx_i> = tangent output sum.
    v = (2.0 / batch) * in_grad
    u = v
    tangents = [u]  # tangent of layer inputs (pre first layer = v)
    raws = []       # tangent of pre-tanh activations per hidden layer
    for layer in range(n_layers - 1):
        c = u @ mlp.weights[layer]
        raws.append(c)
        u = (1.0 - acts[layer + 1] ** 2) * c
        tangents.append(u)
    # Tangent output: u @ W_last, summed with unit seed.

    g_w = [np.zeros_like(w) for w in mlp.weights]
    g_b = [np.zeros_like(b) for b in mlp.biases]
    g_h = [np.zeros_like(a) for a in acts]  # gradient flowing into primal activations

    # Reverse through the tangent chain (seed 1 on each tangent output row).
    q_u = np.ones((batch, 1))
    g_w[-1] += tangents[-1].T @ q_u
    q_u = q_u @ mlp.weights[-1].T
    for layer in range(n_layers - 2, -1, -1):
        s = 1.0 - acts[layer + 1] ** 2
        q_c = q_u * s
        # s depends on the primal activation: d s / d h = -2 h.
        g_h[layer + 1] += q_u * raws[layer] * (-2.0 * acts[layer + 1])
        g_w[layer] += tangents[layer].T @ q_c
        q_u = q_c @ mlp.weights[layer].T

    # Reverse through the primal chain, collecting the tangent contributions.
    q_h = g_h[n_layers - 1]
    for layer in range(n_layers - 2, -1, -1):
        q_a = q_h * (1.0 - acts[layer + 1] ** 2)
        g_w[layer] += acts[layer].T @ q_a
        g_b[layer] += q_a.sum(axis=0)
        q_h = q_a @ mlp.weights[layer].T + g_h[layer]
    return penalty, MlpGrads(weights=g_w, biases=g_b)


# --- Gaussian policy heads ----------------------------------------------------


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian over actions; optionally squashed to (0, 2) per dim."""

    mlp: Mlp
    log_std: np.ndarray
    squash: bool = False

    @property
    def act_dim(self) -> int:
        return self.mlp.out_dim

    def params(self) -> list[np.ndarray]:
        return self.mlp.params() + [self.log_std]

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def policy_init(
    obs_dim: int,
    act_dim: int,
    rng: np.random.Generator,
    hidden=DEFAULT_HIDDEN,
    log_std: float = -1.0,
    squash: bool = False,
) -> GaussianPolicy:
    mlp = mlp_init(obs_dim, act_dim, rng, hidden=hidden, out_scale=0.01)
    return GaussianPolicy(mlp=mlp, log_std=np.full(act_dim, float(log_std)), squash=squash)


def squash_actions(z: np.ndarray) -> np.ndarray:
    return 2.0 / (1.0 + np.exp(-z))


def gaussian_log_prob(z: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    std = np.exp(log_std)
    t = (z - mean) / std
    return -0.5 * np.sum(t * t, axis=-1) - np.sum(log_std) - 0.5 * z.shape[-1] * LOG_2PI


def squash_correction(z: np.ndarray) -> np.ndarray:
    """Sum of log|da/dz| for a = 2*sigmoid(z); stable softplus form."""
    # log(2 s (1 - s)) = log 2 - softplus(z) - softplus(-z)
    sp = np.logaddexp(0.0, z) + np.logaddexp(0.0, -z)
    return np.sum(math.log(2.0) - sp, axis=-1)


def policy_log_prob(policy: GaussianPolicy, z: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Log density of the emitted action given the pre-squash sample z."""
    logp = gaussian_log_prob(z, mean, policy.log_std)
    if policy.squash:
        logp = logp - squash_correction(z)
    return logp


def policy_sample_batch(policy: GaussianPolicy, obs: np.ndarray, rng: np.random.Generator):
    """Sample actions for a batch of observations.

    Returns (actions, pre-squash z, log-probs, means). For an unsquashed
    policy the action is z itself.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    mean, _ = forward(policy.mlp, obs)
    std = np.exp(policy.log_std)
    z = mean + std * rng.standard_normal(mean.shape)
    logp = policy_log_prob(policy, z, mean)
    action = squash_actions(z) if policy.squash else z
    return action, z, logp, mean


def policy_sample(policy: GaussianPolicy, obs: np.ndarray, rng: np.random.Generator):
    """Single-observation sampling: (action, log_prob)."""
    action, _, logp, _ = policy_sample_batch(policy, obs[None, :], rng)
    return action[0], float(logp[0])


def policy_mean_action(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    mean, _ = forward(policy.mlp, obs)
    action = squash_actions(mean) if policy.squash else mean
    return action[0] if action.shape[0] == 1 else action


def policy_entropy(policy: GaussianPolicy) -> float:
    """Entropy of the underlying Gaussian (the squash correction is omitted)."""
    d = policy.act_dim
    return float(np.sum(policy.log_std) + 0.5 * d * (1.0 + LOG_2PI))


# --- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place adaptive-moment update with bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient, and moment lists must align")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
