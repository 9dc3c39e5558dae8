"""Surrogate character dynamics at a fixed 30 Hz clock.

A deliberately simple stand-in for rigid-body simulation: the root integrates
clamped planar acceleration and yaw rate, height and end effectors chase their
targets with first-order lag, and small Gaussian actuation noise keeps rollouts
stochastic. The module is the only place that knows these dynamics, so a real
physics backend can replace it behind the same reset/step/termination surface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .motion import CharacterFrame, CharacterState, Goal
from .retrieval import RetrievalDatabase

TICK_DT = 1.0 / 30.0


@dataclass(frozen=True)
class EnvParams:
    dt: float = TICK_DT
    accel_limit: float = 10.0         # m/s^2 per horizontal axis resultant
    yaw_rate_limit: float = 2.0 * math.pi
    height_range: tuple[float, float] = (0.2, 1.5)
    endpoint_limit: float = 1.5       # |target endpoint coordinate| bound, m
    track_rate: float = 10.0          # 1/s exponential lag toward targets
    vel_noise: float = 0.02           # m/s per axis per step
    endpoint_noise: float = 0.005     # m per coordinate per step
    reset_noise: float = 0.02
    max_speed: float = 8.0
    min_height: float = 0.15          # termination threshold
    speed_error_limit: float = 6.0    # m/s
    speed_error_ticks: int = 30       # consecutive ticks before termination


@dataclass(frozen=True)
class ControlAction:
    """Actuator targets; every component is clamped to the EnvParams bounds."""

    target_root_accel: np.ndarray   # (2,) m/s^2
    target_yaw_rate: float          # rad/s
    target_height: float            # m, absolute
    target_endpoints: np.ndarray    # (E, 3) yaw-local offsets from the root

    def __post_init__(self):
        accel = np.array(self.target_root_accel, dtype=float).reshape(2)
        ee = np.array(self.target_endpoints, dtype=float).reshape(-1, 3)
        accel.setflags(write=False)
        ee.setflags(write=False)
        object.__setattr__(self, "target_root_accel", accel)
        object.__setattr__(self, "target_endpoints", ee)

    def clamped(self, p: EnvParams) -> "ControlAction":
        accel = np.clip(self.target_root_accel, -p.accel_limit, p.accel_limit)
        return ControlAction(
            target_root_accel=accel,
            target_yaw_rate=float(np.clip(self.target_yaw_rate, -p.yaw_rate_limit, p.yaw_rate_limit)),
            target_height=float(np.clip(self.target_height, *p.height_range)),
            target_endpoints=np.clip(self.target_endpoints, -p.endpoint_limit, p.endpoint_limit),
        )


class SurrogateEnv:
    """Single-owner environment instance with its own rng stream."""

    def __init__(self, params: EnvParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng
        self._speed_err_count = 0

    def reset(self, db: RetrievalDatabase) -> CharacterState:
        """Reference-state initialization: a random database frame plus noise."""
        p = self.params
        clip = db.clips[self.rng.integers(0, len(db.clips))]
        frame = clip.frames[self.rng.integers(0, len(clip.frames))]
        sigma = p.reset_noise
        if sigma > 0.0:
            pos = frame.root_pos + np.concatenate([self.rng.normal(0.0, sigma, 2), [0.0]])
            yaw_jitter = self.rng.normal(0.0, sigma)
            rot = geom.quat_mul(geom.quat_from_yaw(yaw_jitter), frame.root_rot)
            vel = frame.root_linvel + np.concatenate([self.rng.normal(0.0, sigma, 2), [0.0]])
            frame = CharacterFrame(
                root_pos=pos,
                root_rot=rot,
                root_linvel=vel,
                root_angvel=frame.root_angvel,
                endpoints=frame.endpoints,
                endpoint_vels=frame.endpoint_vels,
            )
        self._speed_err_count = 0
        return CharacterState(frame=frame, time_index=0)

    def step(self, state: CharacterState, action: ControlAction) -> CharacterState:
        p = self.params
        if not (
            np.all(np.isfinite(action.target_root_accel))
            and math.isfinite(action.target_yaw_rate)
            and math.isfinite(action.target_height)
            and np.all(np.isfinite(action.target_endpoints))
        ):
            raise ValueError("non-finite control action")
        act = action.clamped(p)
        frame = state.frame
        dt = p.dt
        lag = 1.0 - math.exp(-p.track_rate * dt)

        vel_xy = frame.root_linvel[:2] + act.target_root_accel * dt
        if p.vel_noise > 0.0:
            vel_xy = vel_xy + self.rng.normal(0.0, p.vel_noise, 2)
        speed = float(np.linalg.norm(vel_xy))
        if speed > p.max_speed:
            vel_xy = vel_xy * (p.max_speed / speed)
        pos_xy = frame.root_pos[:2] + vel_xy * dt

        yaw = geom.wrap_pi(frame.yaw + act.target_yaw_rate * dt)
        height = frame.height + lag * (act.target_height - frame.height)
        vz = (height - frame.height) / dt

        endpoints = frame.endpoints + lag * (act.target_endpoints - frame.endpoints)
        if p.endpoint_noise > 0.0:
            endpoints = endpoints + self.rng.normal(0.0, p.endpoint_noise, endpoints.shape)
        endpoint_vels = (endpoints - frame.endpoints) / dt

        nxt = CharacterFrame(
            root_pos=np.array([pos_xy[0], pos_xy[1], height]),
            root_rot=geom.quat_from_yaw(yaw),
            root_linvel=np.array([vel_xy[0], vel_xy[1], vz]),
            root_angvel=np.array([0.0, 0.0, act.target_yaw_rate]),
            endpoints=endpoints,
            endpoint_vels=endpoint_vels,
        )
        return CharacterState(frame=nxt, time_index=state.time_index + 1)

    def termination_check(self, state: CharacterState, goal: Goal) -> bool:
        """Fallen, non-finite, or persistently failing to track the commanded
        speed. The persistence counter is part of the environment state."""
        p = self.params
        frame = state.frame
        finite = (
            np.all(np.isfinite(frame.root_pos))
            and np.all(np.isfinite(frame.root_linvel))
            and np.all(np.isfinite(frame.endpoints))
        )
        if not finite:
            return True
        if frame.height < p.min_height:
            return True
        err = float(np.linalg.norm(frame.root_linvel[:2] - goal.desired_velocity))
        if err > p.speed_error_limit:
            self._speed_err_count += 1
        else:
            self._speed_err_count = 0
        return self._speed_err_count >= p.speed_error_ticks


def clip_tracking_action(state: CharacterState, ref_next: CharacterState, p: EnvParams) -> ControlAction:
    """Inverse-dynamics targets that reproduce ref_next in one noise-free step.

    Lag compensation overshoots the target by 1/(1 - e^{-rate*dt}) so the
    first-order trackers land exactly on the reference; used by tests and as a
    scripted tracking baseline.
    """
    dt = p.dt
    lag = 1.0 - math.exp(-p.track_rate * dt)
    accel = (ref_next.frame.root_linvel[:2] - state.frame.root_linvel[:2]) / dt
    yaw_rate = geom.wrap_pi(ref_next.frame.yaw - state.frame.yaw) / dt
    height = state.frame.height + (ref_next.frame.height - state.frame.height) / lag
    endpoints = state.frame.endpoints + (ref_next.frame.endpoints - state.frame.endpoints) / lag
    return ControlAction(
        target_root_accel=accel,
        target_yaw_rate=float(yaw_rate),
        target_height=height,
        target_endpoints=endpoints,
    )
