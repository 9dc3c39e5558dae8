"""Scalar reward terms: goal distance and rewards, reference tracking reward,
motion-prior reward, and the weighted composites for both policies."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .features import SPEED_DEADBAND
from .motion import CharacterState, Goal


@dataclass(frozen=True)
class RewardWeights:
    # retriever composite
    goal_tilde: float = 0.7
    prior_retr: float = 0.3
    # controller composite
    goal: float = 0.5
    reference: float = 0.3
    prior_ctrl: float = 0.2
    # reference sub-terms
    height: float = 0.25
    root_rot: float = 0.25
    root_angvel: float = 0.25
    endpoints: float = 0.25
    # kernel scales
    k_height: float = 10.0
    k_root_rot: float = 2.0
    k_root_angvel: float = 0.1
    k_endpoints: float = 4.0
    # goal distance coefficients
    c_dir: float = 1.0
    c_speed: float = 0.5
    c_face: float = 0.25
    # motion prior
    alpha: float = 0.5
    eps: float = 1e-4

    def __post_init__(self):
        for name in (
            "goal_tilde", "prior_retr", "goal", "reference", "prior_ctrl",
            "height", "root_rot", "root_angvel", "endpoints",
            "k_height", "k_root_rot", "k_root_angvel", "k_endpoints",
            "c_dir", "c_speed", "c_face",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must be >= 0")
        if not (0.0 < self.eps < 1.0):
            raise ValueError("eps must lie in (0, 1)")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def goal_distance(goal: Goal, vel_xy: np.ndarray, yaw: float, w: RewardWeights) -> float:
    """Mismatch between commanded and realized horizontal motion.

    Direction and speed terms compare the velocity vectors; the direction term
    vanishes inside the deadband where a heading is undefined. The facing term
    only applies when the goal pins a facing.
    """
    vel_xy = np.asarray(vel_xy, dtype=float)
    goal_v = goal.desired_velocity
    speed = float(np.linalg.norm(vel_xy))
    goal_speed = goal.speed
    d = w.c_speed * abs(goal_speed - speed)
    if speed >= SPEED_DEADBAND and goal_speed >= SPEED_DEADBAND:
        cos = float(np.dot(goal_v, vel_xy)) / (goal_speed * speed)
        d += w.c_dir * (1.0 - cos)
    if goal.desired_facing is not None:
        d += w.c_face * (1.0 - math.cos(yaw - goal.desired_facing))
    return d


def goal_reward(goal: Goal, state: CharacterState, w: RewardWeights) -> float:
    """exp(-distance) of a state's horizontal velocity and heading to the goal."""
    frame = state.frame
    return math.exp(-goal_distance(goal, frame.root_linvel[:2], frame.yaw, w))


def reference_reward(sim: CharacterState, ref: CharacterState, w: RewardWeights) -> float:
    """Tracking reward against a reference state; yaw- and position-invariant.

    Terms: root height, yaw-removed root rotation, root-local angular velocity,
    and yaw-local end effector positions. No joint-rotation or root-position
    term, so the controller may drift from the reference trajectory as long as
    the end effector arrangement matches.
    """
    sf, rf = sim.frame, ref.frame
    r_h = math.exp(-w.k_height * (sf.height - rf.height) ** 2)
    angle = geom.quat_angle(geom.remove_yaw(sf.root_rot), geom.remove_yaw(rf.root_rot))
    r_rot = math.exp(-w.k_root_rot * angle * angle)
    dw = sf.root_angvel - rf.root_angvel
    r_avel = math.exp(-w.k_root_angvel * float(np.dot(dw, dw)))
    dee = sf.endpoints - rf.endpoints
    r_ee = math.exp(-w.k_endpoints * float(np.mean(np.sum(dee * dee, axis=1))))
    return w.height * r_h + w.root_rot * r_rot + w.root_angvel * r_avel + w.endpoints * r_ee


def prior_reward(d_out: float, alpha: float, eps: float) -> float:
    """-alpha * log(max(1 - D, eps)); 0 for confidently-fake, capped for real."""
    return -alpha * math.log(max(1.0 - d_out, eps))


def retriever_reward(goal_r: float, prior_r: float, w: RewardWeights) -> float:
    return w.goal_tilde * goal_r + w.prior_retr * prior_r


def controller_reward(goal_r: float, ref_r: float, prior_r: float, w: RewardWeights) -> float:
    return w.goal * goal_r + w.reference * ref_r + w.prior_ctrl * prior_r


def composite_rewards(
    goal_r_tilde: float,
    prior_r_retr: float,
    goal_r: float,
    ref_r: float,
    prior_r_ctrl: float,
    w: RewardWeights,
) -> tuple[float, float]:
    """(retriever, controller) weighted sums from the component rewards."""
    return (
        retriever_reward(goal_r_tilde, prior_r_retr, w),
        controller_reward(goal_r, ref_r, prior_r_ctrl, w),
    )
