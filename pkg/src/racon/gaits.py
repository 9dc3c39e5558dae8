"""Deterministic synthetic gait generator.

Stands in for a MoCap corpus: each style produces arc-walking clips with
periodic limb motion whose oscillation completes an integer number of cycles
over the clip span, so a clip's first and last frames share the same gait
phase. Speeds, turn rates and arm posture separate the styles measurably.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .motion import DEFAULT_FPS, DEFAULT_FRAME_COUNT, CharacterFrame, MotionClip

HAND_Y = 0.32
FOOT_Y = 0.11


@dataclass(frozen=True)
class _Style:
    speed: tuple[float, float]        # m/s, sampled per clip
    turn_deg: tuple[float, float]     # |turn rate| range, deg/s
    always_turning: bool              # sample sign only (turn style) vs full range
    cycles: int                       # gait cycles per clip span
    stride: float                     # foot swing amplitude, m
    arm_swing: float
    foot_lift: float
    height: tuple[float, float]       # root height range, m
    bob_amp: float
    arms_forward: bool = False


_STYLES: dict[str, _Style] = {
    "walk": _Style((0.9, 1.7), (0.0, 90.0), False, 1, 0.30, 0.15, 0.05, (0.87, 0.93), 0.015),
    "run": _Style((2.6, 4.8), (0.0, 90.0), False, 2, 0.50, 0.30, 0.10, (0.91, 0.97), 0.020),
    "turn": _Style((0.9, 1.7), (30.0, 90.0), True, 1, 0.30, 0.15, 0.05, (0.87, 0.93), 0.015),
    "skip": _Style((1.6, 2.4), (0.0, 0.0), False, 3, 0.40, 0.20, 0.12, (0.89, 0.95), 0.008),
    "zombie": _Style((0.0, 0.25), (0.0, 0.0), False, 1, 0.0, 0.0, 0.0, (0.82, 0.88), 0.003, True),
}

STYLE_NAMES = tuple(_STYLES)


def generate_synthetic_clips(
    style: str,
    count: int,
    seed: int,
    frame_count: int = DEFAULT_FRAME_COUNT,
    fps: int = DEFAULT_FPS,
    id_start: int = 0,
) -> list[MotionClip]:
    """Generate `count` clips of one style, deterministic in all arguments."""
    if style not in _STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(_STYLES)}")
    if count < 1:
        raise ValueError("count must be >= 1")
    p = _STYLES[style]
    rng = np.random.default_rng(seed)
    span = (frame_count - 1) / fps
    t = np.arange(frame_count) / fps
    clips = []
    for i in range(count):
        speed = rng.uniform(*p.speed)
        if p.always_turning:
            mag = rng.uniform(*p.turn_deg)
            omega = math.radians(mag) * (1.0 if rng.uniform(-1.0, 1.0) >= 0 else -1.0)
        elif p.turn_deg[1] > 0:
            omega = math.radians(rng.uniform(-p.turn_deg[1], p.turn_deg[1]))
        else:
            omega = 0.0
        yaw0 = rng.uniform(-math.pi, math.pi)
        origin = rng.uniform(-5.0, 5.0, size=2)
        phase = rng.uniform(0.0, geom.TWO_PI)
        bob_phase = rng.uniform(0.0, geom.TWO_PI)
        height = rng.uniform(*p.height)

        yaw = yaw0 + omega * t
        if abs(omega) > 1e-9:
            px = origin[0] + (speed / omega) * (np.sin(yaw) - math.sin(yaw0))
            py = origin[1] + (speed / omega) * (math.cos(yaw0) - np.cos(yaw))
        else:
            px = origin[0] + speed * t * math.cos(yaw0)
            py = origin[1] + speed * t * math.sin(yaw0)
        gait_w = geom.TWO_PI * p.cycles / span
        # Bob shares the gait frequency: higher harmonics alias badly at 30 fps.
        bob_w = gait_w
        pz = height + p.bob_amp * np.sin(bob_w * t + bob_phase)
        vx = speed * np.cos(yaw)
        vy = speed * np.sin(yaw)
        vz = p.bob_amp * bob_w * np.cos(bob_w * t + bob_phase)

        theta = gait_w * t + phase
        frames = []
        for k in range(frame_count):
            ee = np.empty((4, 3))
            eev = np.zeros((4, 3))
            if p.arms_forward:
                ee[0] = (0.45, HAND_Y, 0.05)
                ee[1] = (0.45, -HAND_Y, 0.05)
            else:
                for side, sign in ((0, 0.0), (1, math.pi)):
                    ph = theta[k] + sign
                    ee[side] = (
                        p.arm_swing * math.sin(ph),
                        HAND_Y if side == 0 else -HAND_Y,
                        -0.12 + 0.03 * math.cos(ph),
                    )
                    eev[side] = (
                        p.arm_swing * gait_w * math.cos(ph),
                        0.0,
                        -0.03 * gait_w * math.sin(ph),
                    )
            for side, sign in ((2, math.pi), (3, 0.0)):
                ph = theta[k] + sign
                ee[side] = (
                    p.stride * math.sin(ph),
                    FOOT_Y if side == 2 else -FOOT_Y,
                    -pz[k] + 0.04 + p.foot_lift * 0.5 * (1.0 + math.cos(ph)),
                )
                eev[side] = (
                    p.stride * gait_w * math.cos(ph),
                    0.0,
                    -vz[k] - p.foot_lift * 0.5 * gait_w * math.sin(ph),
                )
            frames.append(
                CharacterFrame(
                    root_pos=(px[k], py[k], pz[k]),
                    root_rot=geom.quat_from_yaw(yaw[k]),
                    root_linvel=(vx[k], vy[k], vz[k]),
                    root_angvel=(0.0, 0.0, omega),
                    endpoints=ee,
                    endpoint_vels=eev,
                )
            )
        clips.append(
            MotionClip(frames=tuple(frames), fps=fps, clip_id=id_start + i, style_tag=style)
        )
    return clips
