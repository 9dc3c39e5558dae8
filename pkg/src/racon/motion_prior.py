"""Retrieval-augmented adversarial motion prior.

The discriminator scores three-state transition windows. Real windows come
from demonstration clips; generated windows splice the retrieved reference
into simulated rollouts, either as a lookahead third state (controller prior)
or as the continuation after the current simulated state (retriever prior).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

from .features import extract_disc_observation
from .motion import CharacterState, MotionClip
from .nets import AdamState, Mlp, adam_step, backward, forward, grad_penalty
from .retrieval import RetrievalEnv, RetrievalState

TripletSource = Literal["demo", "sim_ra", "retr"]

DEFAULT_GP_WEIGHT = 10.0
DEFAULT_DISC_BATCH = 256


@dataclass(frozen=True)
class TransitionTriplet:
    obs: np.ndarray
    source: TripletSource

    def __post_init__(self):
        obs = np.array(self.obs, dtype=float)
        if not np.all(np.isfinite(obs)):
            raise ValueError("triplet observation must be finite")
        obs.setflags(write=False)
        object.__setattr__(self, "obs", obs)


def assemble_demo_triplet(clip: MotionClip, t: int) -> TransitionTriplet:
    if not (0 <= t and t + 2 < len(clip.frames)):
        raise IndexError(f"t={t} leaves no 3-frame window in a {len(clip.frames)}-frame clip")
    states = tuple(CharacterState(frame=clip.frames[t + i], time_index=t + i) for i in range(3))
    return TransitionTriplet(obs=extract_disc_observation(states), source="demo")


def assemble_demo_window(clip: MotionClip, t: int, before: int = 0, after: int = 0) -> TransitionTriplet:
    """Demo window extended `before` frames back and `after` frames forward."""
    first = t - before
    last = t + 2 + after
    if not (0 <= first and last < len(clip.frames)):
        raise IndexError(
            f"window [{first}, {last}] does not fit a {len(clip.frames)}-frame clip"
        )
    states = tuple(
        CharacterState(frame=clip.frames[k], time_index=k) for k in range(first, last + 1)
    )
    return TransitionTriplet(obs=extract_disc_observation(states), source="demo")


def demo_triplet_count(clips: Iterable[MotionClip], before: int = 0, after: int = 0) -> int:
    span = 3 + before + after
    return sum(max(0, len(c.frames) - span + 1) for c in clips)


def assemble_ra_fake(
    s_t: CharacterState,
    s_t1: CharacterState,
    retr_env: RetrievalEnv,
    retr_state: RetrievalState,
) -> TransitionTriplet:
    """Simulated pair plus the retrieved lookahead in the third slot."""
    lookahead = retr_env.peek_next(retr_state)
    return TransitionTriplet(
        obs=extract_disc_observation((s_t, s_t1, lookahead)), source="sim_ra"
    )


def assemble_retr_fake(
    s_t: CharacterState, ref_t1: CharacterState, ref_t2: CharacterState
) -> TransitionTriplet:
    """Simulated state followed by the retrieved state and its step (coherence
    window for the retriever's prior)."""
    return TransitionTriplet(obs=extract_disc_observation((s_t, ref_t1, ref_t2)), source="retr")


class RingBuffer:
    """Fixed-capacity row store with uniform sampling; oldest rows overwrite."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.data = np.zeros((capacity, dim))
        self.size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self.size

    def push(self, rows: np.ndarray) -> None:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        n = rows.shape[0]
        if n >= self.capacity:
            self.data[...] = rows[-self.capacity:]
            self._cursor = 0
            self.size = self.capacity
            return
        end = self._cursor + n
        if end <= self.capacity:
            self.data[self._cursor:end] = rows
        else:
            split = self.capacity - self._cursor
            self.data[self._cursor:] = rows[:split]
            self.data[: end - self.capacity] = rows[split:]
        self._cursor = end % self.capacity
        self.size = min(self.size + n, self.capacity)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.data[idx]

    def state_dict(self) -> dict:
        return {"data": self.data.copy(), "size": self.size, "cursor": self._cursor}

    def load_state_dict(self, d: dict) -> None:
        self.data[...] = d["data"]
        self.size = int(d["size"])
        self._cursor = int(d["cursor"])


@dataclass
class DiscBuffers:
    demo: RingBuffer
    fake: RingBuffer

    @classmethod
    def create(cls, dim: int, capacity: int = 100_000) -> "DiscBuffers":
        return cls(demo=RingBuffer(capacity, dim), fake=RingBuffer(capacity, dim))

    def push_triplet(self, triplet: TransitionTriplet) -> None:
        buf = self.demo if triplet.source == "demo" else self.fake
        buf.push(triplet.obs)


def disc_probs(mlp: Mlp, obs: np.ndarray) -> np.ndarray:
    """Sigmoid discriminator outputs, shape (B,)."""
    logits, _ = forward(mlp, obs)
    return 1.0 / (1.0 + np.exp(-logits[:, 0]))


def discriminator_loss(mlp: Mlp, demo_batch: np.ndarray, fake_batch: np.ndarray, gp_weight: float):
    """Binary cross-entropy with an input-gradient penalty on demo samples.

    loss = -E_demo[log D] - E_fake[log(1 - D)] + (gp_weight / 2) * E_demo ||d logits/d obs||^2
    Returns (loss, grads, mean_d_demo, mean_d_fake, gp_penalty); gradients exact.
    """
    demo_batch = np.atleast_2d(np.asarray(demo_batch, dtype=float))
    fake_batch = np.atleast_2d(np.asarray(fake_batch, dtype=float))
    if demo_batch.shape[1] != fake_batch.shape[1]:
        raise ValueError("demo and fake batches must share the observation width")

    demo_logits, demo_cache = forward(mlp, demo_batch)
    fake_logits, fake_cache = forward(mlp, fake_batch)
    n_demo = demo_batch.shape[0]
    n_fake = fake_batch.shape[0]
    # Stable -log sigmoid(x) = softplus(-x); -log(1 - sigmoid(x)) = softplus(x).
    loss = float(
        np.mean(np.logaddexp(0.0, -demo_logits[:, 0]))
        + np.mean(np.logaddexp(0.0, fake_logits[:, 0]))
    )
    d_demo = 1.0 / (1.0 + np.exp(-demo_logits))
    d_fake = 1.0 / (1.0 + np.exp(-fake_logits))
    grads, _ = backward(demo_cache, (d_demo - 1.0) / n_demo)
    fake_grads, _ = backward(fake_cache, d_fake / n_fake)
    grads.add_(fake_grads)
    penalty = 0.0
    if gp_weight > 0.0:
        penalty, gp_grads = grad_penalty(mlp, demo_batch)
        loss += 0.5 * gp_weight * penalty
        grads.add_(gp_grads, scale=0.5 * gp_weight)
    return loss, grads, float(d_demo.mean()), float(d_fake.mean()), penalty


@dataclass
class DiscUpdateStats:
    demo_mean: float = float("nan")
    fake_mean: float = float("nan")
    loss: float = float("nan")
    gp_penalty: float = float("nan")


def update_discriminator(
    buffers: DiscBuffers,
    mlp: Mlp,
    adam: AdamState,
    steps: int,
    rng: np.random.Generator,
    lr: float = 5e-5,
    batch_size: int = DEFAULT_DISC_BATCH,
    gp_weight: float = DEFAULT_GP_WEIGHT,
) -> DiscUpdateStats:
    """Run optimizer steps on balanced fresh batches; returns the last step's
    diagnostics (mean D per side, loss, gradient-penalty magnitude)."""
    if steps > 0 and (len(buffers.demo) == 0 or len(buffers.fake) == 0):
        raise ValueError("both demo and fake buffers must be non-empty")
    stats = DiscUpdateStats()
    half = max(1, batch_size // 2)
    for _ in range(steps):
        demo = buffers.demo.sample(half, rng)
        fake = buffers.fake.sample(half, rng)
        loss, grads, demo_mean, fake_mean, gp = discriminator_loss(mlp, demo, fake, gp_weight)
        adam_step(mlp.params(), grads.params(), adam, lr)
        stats = DiscUpdateStats(demo_mean=demo_mean, fake_mean=fake_mean, loss=loss, gp_penalty=gp)
    return stats
