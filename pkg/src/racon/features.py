"""Feature extraction for retrieval keys, raw queries, and discriminator inputs.

All features are heading-invariant: velocities and end effectors are expressed
in the yaw-local frame of a reference pose (a clip's first frame, the querying
character, or the first state of a transition window).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .motion import CharacterState, Goal, MotionClip

SPEED_DEADBAND = 0.05  # m/s; below this a direction is undefined

# Key layout for E end effectors: initial yaw-local root velocity (2), clip
# average yaw-local velocity (2), final-frame yaw displacement (1), first-frame
# endpoints (3E), final-frame endpoints (3E), first-frame root height (1).
KEY_INIT_VEL = slice(0, 2)
KEY_AVG_VEL = slice(2, 4)
KEY_YAW_DISP = 4
KEY_VELOCITY_DIMS = (0, 1, 2, 3)


def key_dim(num_endpoints: int = 4) -> int:
    return 6 + 6 * num_endpoints


def key_ee_first(num_endpoints: int = 4) -> slice:
    return slice(5, 5 + 3 * num_endpoints)


def key_ee_last(num_endpoints: int = 4) -> slice:
    return slice(5 + 3 * num_endpoints, 5 + 6 * num_endpoints)


def key_height_index(num_endpoints: int = 4) -> int:
    return 5 + 6 * num_endpoints


KEY_DIM = key_dim()


def extract_key(clip: MotionClip) -> np.ndarray:
    """Retrieval key of a clip; invariant to world-yaw rotations of the clip."""
    first = clip.frames[0]
    last = clip.frames[-1]
    yaw0 = first.yaw
    init_vel = geom.rotate_xy(first.root_linvel[:2], -yaw0)
    avg_world = np.mean(np.stack([f.root_linvel[:2] for f in clip.frames]), axis=0)
    avg_vel = geom.rotate_xy(avg_world, -yaw0)
    yaw_disp = geom.wrap_pi(last.yaw - yaw0)
    out = np.empty(key_dim(first.endpoints.shape[0]))
    out[KEY_INIT_VEL] = init_vel
    out[KEY_AVG_VEL] = avg_vel
    out[KEY_YAW_DISP] = yaw_disp
    out[key_ee_first(first.endpoints.shape[0])] = first.endpoints.ravel()
    out[key_ee_last(first.endpoints.shape[0])] = last.endpoints.ravel()
    out[key_height_index(first.endpoints.shape[0])] = first.height
    return out


def desired_facing(goal: Goal, current_yaw: float) -> float:
    """Facing target: explicit goal facing, direction of travel, or hold current."""
    if goal.desired_facing is not None:
        return float(goal.desired_facing)
    if goal.speed >= SPEED_DEADBAND:
        return math.atan2(goal.desired_velocity[1], goal.desired_velocity[0])
    return current_yaw


def extract_raw_query(state: CharacterState, goal: Goal) -> np.ndarray:
    """Raw query in key space: goal fills the average-velocity and yaw slots,
    the current pose fills everything else."""
    frame = state.frame
    yaw = frame.yaw
    e = frame.endpoints.shape[0]
    out = np.empty(key_dim(e))
    out[KEY_INIT_VEL] = geom.rotate_xy(frame.root_linvel[:2], -yaw)
    out[KEY_AVG_VEL] = geom.rotate_xy(goal.desired_velocity, -yaw)
    out[KEY_YAW_DISP] = geom.wrap_pi(desired_facing(goal, yaw) - yaw)
    out[key_ee_first(e)] = frame.endpoints.ravel()
    out[key_ee_last(e)] = frame.endpoints.ravel()
    out[key_height_index(e)] = frame.height
    return out


STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormStats:
    """Per-dimension z-score statistics; std floored so division is safe."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        std = np.maximum(np.array(self.std, dtype=float), STD_FLOOR)
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=float) - self.mean) / self.std


def fit_norm_stats(keys) -> NormStats:
    keys = np.asarray(keys, dtype=float)
    if keys.ndim != 2 or keys.shape[0] < 2:
        raise ValueError("need at least 2 keys to fit normalization statistics")
    mean = keys.mean(axis=0)
    std = np.sqrt(np.mean((keys - mean) ** 2, axis=0))
    return NormStats(mean=mean, std=std)


# Discriminator observation: three states, each encoded relative to the first
# state's yaw as [height, tilt-basis x/y columns (6), linvel (3), angvel (3),
# endpoints (3E), endpoint velocities (3E)].


def disc_state_dim(num_endpoints: int = 4) -> int:
    return 13 + 6 * num_endpoints


def disc_dim(num_endpoints: int = 4) -> int:
    return 3 * disc_state_dim(num_endpoints)


DISC_STATE_DIM = disc_state_dim()
DISC_DIM = disc_dim()


def state_block(frame, ref_yaw: float) -> np.ndarray:
    """37-dim (for E=4) pose/velocity block of one frame in a reference yaw frame."""
    rot_local = geom.quat_to_matrix(geom.quat_mul(geom.quat_from_yaw(-ref_yaw), frame.root_rot))
    return np.concatenate(
        [
            [frame.height],
            rot_local[:, 0],
            rot_local[:, 1],
            geom.rotate_xy(frame.root_linvel, -ref_yaw),
            frame.root_angvel,
            frame.endpoints.ravel(),
            frame.endpoint_vels.ravel(),
        ]
    )


def extract_disc_observation(states) -> np.ndarray:
    """Concatenated blocks of a transition window, yaw-local to the first state.

    The core window is three consecutive states; it may extend backward and
    forward (see disc_window_dim), always yielding 37 dims per state.
    """
    states = tuple(states)
    if len(states) < 3:
        raise ValueError(f"expected at least 3 states, got {len(states)}")
    ref_yaw = states[0].frame.yaw
    return np.concatenate([state_block(s.frame, ref_yaw) for s in states])


def disc_window_dim(before: int = 0, after: int = 0, num_endpoints: int = 4) -> int:
    """Observation width for a window of 3 + before + after states."""
    if before < 0 or after < 0:
        raise ValueError("window extensions must be >= 0")
    return (3 + before + after) * disc_state_dim(num_endpoints)
