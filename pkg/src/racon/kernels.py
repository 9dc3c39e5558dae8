"""Hot numeric kernels: numba-compiled with a pure-numpy fallback.

The weighted distance scan dominates retrieval and the advantage recursion
dominates post-rollout processing, so both carry @njit versions. Set
RACON_DISABLE_NUMBA=1 to force the numpy path; benchmarks/bench_kernels.py
times the two side by side and tests assert they agree.
"""
from __future__ import annotations

import os

import numpy as np


def _numpy_sq_dists(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = keys - query
    return np.einsum("ij,ij->i", diff, diff)


def _numpy_weighted_sq_dists(keys: np.ndarray, query: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = keys * weights - query
    return np.einsum("ij,ij->i", diff, diff)


def _numpy_gae_scan(
    rewards: np.ndarray, values: np.ndarray, not_done: np.ndarray, gamma: float, lam: float
) -> np.ndarray:
    steps = rewards.shape[0]
    adv = np.zeros(steps)
    running = 0.0
    for t in range(steps - 1, -1, -1):
        delta = rewards[t] + gamma * not_done[t] * values[t + 1] - values[t]
        running = delta + gamma * lam * not_done[t] * running
        adv[t] = running
    return adv


_DISABLE = os.environ.get("RACON_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if not _DISABLE:
    try:
        from numba import njit

        @njit(cache=True, fastmath=False)
        def _numba_sq_dists(keys, query):
            n, d = keys.shape
            out = np.empty(n)
            for i in range(n):
                acc = 0.0
                for j in range(d):
                    diff = keys[i, j] - query[j]
                    acc += diff * diff
                out[i] = acc
            return out

        @njit(cache=True, fastmath=False)
        def _numba_weighted_sq_dists(keys, query, weights):
            n, d = keys.shape
            out = np.empty(n)
            for i in range(n):
                acc = 0.0
                for j in range(d):
                    diff = keys[i, j] * weights[j] - query[j]
                    acc += diff * diff
                out[i] = acc
            return out

        @njit(cache=True, fastmath=False)
        def _numba_gae_scan(rewards, values, not_done, gamma, lam):
            steps = rewards.shape[0]
            adv = np.zeros(steps)
            running = 0.0
            for t in range(steps - 1, -1, -1):
                delta = rewards[t] + gamma * not_done[t] * values[t + 1] - values[t]
                running = delta + gamma * lam * not_done[t] * running
                adv[t] = running
            return adv

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False

if NUMBA_ENABLED:
    sq_dists = _numba_sq_dists
    weighted_sq_dists = _numba_weighted_sq_dists
    gae_scan = _numba_gae_scan
else:
    sq_dists = _numpy_sq_dists
    weighted_sq_dists = _numpy_weighted_sq_dists
    gae_scan = _numpy_gae_scan
