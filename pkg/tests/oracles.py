"""Independent reference implementations used as test oracles.

Everything here is written with plain loops against the math directly, shares
no code with the package, and stays deliberately slow and obvious.
"""
from __future__ import annotations

import math

import numpy as np


def dense_forward(weights, biases, x):
    """Loop-based tanh MLP forward for a single input vector."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out.append(acc)
        if layer < len(weights) - 1:
            out = [math.tanh(v) for v in out]
        h = out
    return np.array(h)


def numeric_param_grads(fn, params, h=1e-5):
    """Central finite differences of a scalar function over a list of arrays."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gae_double_loop(rewards, values, dones, gamma, lam):
    """Brute-force advantage sums: A_t = sum_l (gamma*lam)^l * delta_{t+l},
    cut at episode ends."""
    steps = len(rewards)
    deltas = []
    for t in range(steps):
        nxt = 0.0 if dones[t] else values[t + 1]
        deltas.append(rewards[t] + gamma * nxt - values[t])
    adv = np.zeros(steps)
    for t in range(steps):
        acc = 0.0
        factor = 1.0
        for l in range(t, steps):
            acc += factor * deltas[l]
            if dones[l]:
                break
            factor *= gamma * lam
        adv[t] = acc
    returns = adv + np.asarray(values[:steps])
    return adv, returns


def two_pass_stats(keys):
    keys = np.asarray(keys, dtype=float)
    n, d = keys.shape
    mean = np.zeros(d)
    for row in keys:
        mean += row
    mean /= n
    var = np.zeros(d)
    for row in keys:
        var += (row - mean) ** 2
    var /= n
    return mean, np.sqrt(var)


def linear_scan_nn(keys, query, weights=None):
    """Index of the nearest key under the (optionally weighted) metric; ties go
    to the smaller index."""
    best = -1
    best_d = float("inf")
    for i in range(keys.shape[0]):
        acc = 0.0
        for j in range(keys.shape[1]):
            if weights is None:
                diff = keys[i, j] - query[j]
            else:
                diff = keys[i, j] * weights[j] - query[j]
            acc += diff * diff
        if acc < best_d:
            best_d = acc
            best = i
    return best, math.sqrt(best_d)


def linear_scan_nn_vectorized(keys, query, weights=None):
    """Same scan with plain numpy broadcasting (fast enough for large sweeps);
    np.argmin keeps the smallest index on ties."""
    if weights is None:
        diff = keys - query
    else:
        diff = keys * weights - query
    d2 = (diff * diff).sum(axis=1)
    best = int(np.argmin(d2))
    return best, math.sqrt(d2[best])


def goal_distance_formula(goal_v, facing, vel, yaw, c_dir, c_speed, c_face, deadband=0.05):
    gs = math.hypot(goal_v[0], goal_v[1])
    vs = math.hypot(vel[0], vel[1])
    d = c_speed * abs(gs - vs)
    if gs >= deadband and vs >= deadband:
        cos = (goal_v[0] * vel[0] + goal_v[1] * vel[1]) / (gs * vs)
        d += c_dir * (1.0 - cos)
    if facing is not None:
        d += c_face * (1.0 - math.cos(yaw - facing))
    return d


def gaussian_log_density(x, mean, std):
    acc = 0.0
    for xi, mi, si in zip(x, mean, std):
        acc += -0.5 * ((xi - mi) / si) ** 2 - math.log(si) - 0.5 * math.log(2.0 * math.pi)
    return acc
