"""Core motion data types, clip file I/O, and kinematic stepping along clips.

A clip is a short fixed-rate pose sequence; a database value. Root pose and
velocities live in the world frame, end effectors in the yaw-local root frame
so that clip features are heading-invariant and a clip can be replanted
anywhere on the ground plane by a planar rigid transform.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Sequence

import numpy as np

from . import geom

CLIP_FILE_VERSION = 1
DEFAULT_FPS = 30
DEFAULT_FRAME_COUNT = 16
NUM_ENDPOINTS = 4
ENDPOINT_NAMES = ("hand_l", "hand_r", "foot_l", "foot_r")


class ClipFormatError(ValueError):
    """Raised when a clip file cannot be parsed."""


class ClipValidationError(ValueError):
    """Raised when parsed clip data violates an invariant."""


def _frozen(arr, shape) -> np.ndarray:
    out = np.array(arr, dtype=float).reshape(shape)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CharacterFrame:
    """One pose sample: world-frame root state plus yaw-local end effectors."""

    root_pos: np.ndarray       # (3,) meters, world
    root_rot: np.ndarray       # (4,) unit quaternion (w, x, y, z), world
    root_linvel: np.ndarray    # (3,) m/s, world
    root_angvel: np.ndarray    # (3,) rad/s, root-local
    endpoints: np.ndarray      # (E, 3) meters, relative to root, yaw-local
    endpoint_vels: np.ndarray  # (E, 3) m/s, yaw-local

    def __post_init__(self):
        object.__setattr__(self, "root_pos", _frozen(self.root_pos, (3,)))
        object.__setattr__(self, "root_rot", _frozen(self.root_rot, (4,)))
        object.__setattr__(self, "root_linvel", _frozen(self.root_linvel, (3,)))
        object.__setattr__(self, "root_angvel", _frozen(self.root_angvel, (3,)))
        ee = np.array(self.endpoints, dtype=float)
        ee = ee.reshape(-1, 3)
        object.__setattr__(self, "endpoints", _frozen(ee, ee.shape))
        eev = np.array(self.endpoint_vels, dtype=float).reshape(ee.shape)
        object.__setattr__(self, "endpoint_vels", _frozen(eev, ee.shape))

    @cached_property
    def yaw(self) -> float:
        return geom.yaw_of_quat(self.root_rot)

    @property
    def height(self) -> float:
        return float(self.root_pos[2])

    def to_dict(self) -> dict:
        return {
            "p": self.root_pos.tolist(),
            "q": self.root_rot.tolist(),
            "v": self.root_linvel.tolist(),
            "w": self.root_angvel.tolist(),
            "ee": self.endpoints.tolist(),
            "eev": self.endpoint_vels.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CharacterFrame":
        return cls(d["p"], d["q"], d["v"], d["w"], d["ee"], d["eev"])

    @classmethod
    def _from_trusted_arrays(cls, pos, rot, vel, angvel, ee, eev) -> "CharacterFrame":
        """Bulk-load fast path: arrays must already be float64, correctly
        shaped, and non-writeable (e.g. row views of a frozen block)."""
        self = object.__new__(cls)
        object.__setattr__(self, "root_pos", pos)
        object.__setattr__(self, "root_rot", rot)
        object.__setattr__(self, "root_linvel", vel)
        object.__setattr__(self, "root_angvel", angvel)
        object.__setattr__(self, "endpoints", ee)
        object.__setattr__(self, "endpoint_vels", eev)
        return self


@dataclass(frozen=True)
class CharacterState:
    """A character frame stamped with the simulation tick (30 Hz)."""

    frame: CharacterFrame
    time_index: int = 0


@dataclass(frozen=True)
class MotionClip:
    frames: tuple[CharacterFrame, ...]
    fps: int = DEFAULT_FPS
    clip_id: int = 0
    style_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def dt(self) -> float:
        return 1.0 / self.fps

    @property
    def duration(self) -> float:
        return (len(self.frames) - 1) / self.fps

    def mean_horizontal_speed(self) -> float:
        vels = np.stack([f.root_linvel[:2] for f in self.frames])
        return float(np.mean(np.linalg.norm(vels, axis=1)))

    def to_dict(self) -> dict:
        return {
            "id": self.clip_id,
            "style": self.style_tag,
            "frames": [f.to_dict() for f in self.frames],
        }


@dataclass(frozen=True)
class Goal:
    """Commanded horizontal velocity plus optional facing direction.

    A missing facing means "face the direction of travel".
    """

    desired_velocity: np.ndarray  # (2,) m/s, world horizontal
    desired_facing: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "desired_velocity", _frozen(self.desired_velocity, (2,)))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.desired_velocity))


DEFAULT_MAX_SPEED = 8.0


def validate_goal(goal: Goal, v_max: float = DEFAULT_MAX_SPEED) -> None:
    if not np.all(np.isfinite(goal.desired_velocity)):
        raise ValueError("goal velocity must be finite")
    if goal.speed > v_max + 1e-9:
        raise ValueError(f"goal speed {goal.speed:.3f} m/s exceeds the limit {v_max} m/s")


def validate_frame(frame: CharacterFrame, where: str = "frame") -> None:
    for name in ("root_pos", "root_rot", "root_linvel", "root_angvel", "endpoints", "endpoint_vels"):
        if not np.all(np.isfinite(getattr(frame, name))):
            raise ClipValidationError(f"{where}: non-finite values in {name}")
    norm = float(np.linalg.norm(frame.root_rot))
    if abs(norm - 1.0) > 1e-6:
        raise ClipValidationError(f"{where}: root_rot norm {norm:.6f} is not 1 within 1e-6")
    z = frame.root_pos[2]
    if not (0.0 < z < 3.0):
        raise ClipValidationError(f"{where}: root_pos.z {z:.3f} outside (0, 3) m")


def _validate_clip_arrays(
    clip_id: int,
    dt: float,
    pos: np.ndarray,
    rot: np.ndarray,
    vel: np.ndarray,
    angvel: np.ndarray,
    ee: np.ndarray,
    eev: np.ndarray,
    displacement_tol: float = 0.1,
) -> None:
    where = f"clip {clip_id}"
    if pos.shape[0] < 2:
        raise ClipValidationError(f"{where}: needs at least 2 frames, has {pos.shape[0]}")
    for name, block in (("root_pos", pos), ("root_linvel", vel), ("root_angvel", angvel),
                        ("endpoints", ee), ("endpoint_vels", eev)):
        if not np.all(np.isfinite(block)):
            raise ClipValidationError(f"{where}: non-finite values in {name}")
    if not np.all(np.isfinite(rot)):
        raise ClipValidationError(f"{where}: non-finite values in root_rot")
    norms = np.linalg.norm(rot, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > 1e-6)[0]
    if bad.size:
        raise ClipValidationError(
            f"{where}: root_rot norm {norms[bad[0]]:.6f} at frame {bad[0]} is not 1 within 1e-6"
        )
    if np.any(pos[:, 2] <= 0.0) or np.any(pos[:, 2] >= 3.0):
        raise ClipValidationError(f"{where}: root_pos.z outside (0, 3) m")
    # Root displacement must agree with the stored velocities.
    drift = pos[1:] - pos[:-1] - vel[:-1] * dt
    worst = float(np.max(np.linalg.norm(drift, axis=1)))
    if worst > displacement_tol:
        raise ClipValidationError(
            f"{where}: root displacement disagrees with root_linvel by {worst:.3f} m (> {displacement_tol})"
        )


def validate_clip(clip: MotionClip, displacement_tol: float = 0.1) -> None:
    if len(clip.frames) < 2:
        raise ClipValidationError(
            f"clip {clip.clip_id}: needs at least 2 frames, has {len(clip.frames)}"
        )
    _validate_clip_arrays(
        clip.clip_id,
        clip.dt,
        np.stack([f.root_pos for f in clip.frames]),
        np.stack([f.root_rot for f in clip.frames]),
        np.stack([f.root_linvel for f in clip.frames]),
        np.stack([f.root_angvel for f in clip.frames]),
        np.stack([f.endpoints for f in clip.frames]),
        np.stack([f.endpoint_vels for f in clip.frames]),
        displacement_tol,
    )


def save_clips(clips: Sequence[MotionClip], path) -> None:
    """Write clips as a clip file; floats keep full round-trip precision."""
    clips = list(clips)
    fps = clips[0].fps if clips else DEFAULT_FPS
    for clip in clips:
        if clip.fps != fps:
            raise ValueError("all clips in a file must share one fps")
    doc = {"version": CLIP_FILE_VERSION, "fps": fps, "clips": [c.to_dict() for c in clips]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ClipFormatError(f"{where}: missing required key '{key}'")
    return d[key]


def _frames_from_dicts(frame_dicts, return_blocks: bool = False):
    """Build a clip's frames from parsed JSON through shared frozen blocks."""
    blocks = []
    for key, shape in (("p", (3,)), ("q", (4,)), ("v", (3,)), ("w", (3,)), ("ee", (-1, 3)), ("eev", (-1, 3))):
        block = np.array([fd[key] for fd in frame_dicts], dtype=float)
        block = block.reshape((len(frame_dicts),) + shape)
        block.setflags(write=False)
        blocks.append(block)
    frames = tuple(
        CharacterFrame._from_trusted_arrays(*(block[i] for block in blocks))
        for i in range(len(frame_dicts))
    )
    if return_blocks:
        return frames, blocks
    return frames


def load_clips(path) -> list[MotionClip]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ClipFormatError(
                f"{path}: malformed clip file at line {exc.lineno}, column {exc.colno} (offset {exc.pos}): {exc.msg}"
            ) from exc
    if not isinstance(doc, dict):
        raise ClipFormatError(f"{path}: top level must be an object")
    version = _require(doc, "version", str(path))
    if version != CLIP_FILE_VERSION:
        raise ClipFormatError(f"{path}: unsupported clip file version {version!r}")
    fps = _require(doc, "fps", str(path))
    clips = []
    seen_ids: set[int] = set()
    for i, cd in enumerate(_require(doc, "clips", str(path))):
        where = f"{path}: clips[{i}]"
        clip_id = _require(cd, "id", where)
        style = _require(cd, "style", where)
        frame_dicts = _require(cd, "frames", where)
        if not frame_dicts:
            raise ClipValidationError(f"clip {clip_id}: needs at least 2 frames, has 0")
        try:
            frames, blocks = _frames_from_dicts(frame_dicts, return_blocks=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise ClipFormatError(f"{where}: bad frame data: {exc}") from exc
        clip = MotionClip(frames=frames, fps=fps, clip_id=clip_id, style_tag=style)
        _validate_clip_arrays(clip_id, clip.dt, *blocks)
        if clip_id in seen_ids:
            raise ClipValidationError(f"clip {clip_id}: duplicate clip id")
        seen_ids.add(clip_id)
        clips.append(clip)
    return clips


def transform_frame_planar(frame: CharacterFrame, yaw: float, txy: np.ndarray) -> CharacterFrame:
    """Apply the planar rigid transform (rotate by yaw about z, then translate by txy)."""
    pos = geom.rotate_xy(frame.root_pos, yaw)
    pos = pos + np.array([txy[0], txy[1], 0.0])
    rot = geom.quat_mul(geom.quat_from_yaw(yaw), frame.root_rot)
    vel = geom.rotate_xy(frame.root_linvel, yaw)
    return CharacterFrame(
        root_pos=pos,
        root_rot=rot,
        root_linvel=vel,
        root_angvel=frame.root_angvel,
        endpoints=frame.endpoints,
        endpoint_vels=frame.endpoint_vels,
    )


def rotate_clip(clip: MotionClip, yaw: float) -> MotionClip:
    """World-yaw rotate a whole clip about the origin (test/diagnostic helper)."""
    frames = tuple(transform_frame_planar(f, yaw, np.zeros(2)) for f in clip.frames)
    return replace(clip, frames=frames)


def planar_alignment(from_frame: CharacterFrame, to_pos_xy: np.ndarray, to_yaw: float):
    """Planar transform (yaw, txy) taking from_frame's ground pose onto (to_pos_xy, to_yaw)."""
    yaw = geom.wrap_pi(to_yaw - from_frame.yaw)
    txy = np.asarray(to_pos_xy, dtype=float) - geom.rotate_xy(from_frame.root_pos[:2], yaw)
    return yaw, txy


def step_along_clip(clip: MotionClip, frame_index: int, anchor: CharacterState) -> CharacterState:
    """Advance one frame along a clip that was stitched so frame 0 lands on `anchor`.

    Returns the state at frame_index + 1 under the same planar transform, so
    walking the full clip replays its kinematics rigidly transplanted onto the
    anchor's ground pose.
    """
    if not (0 <= frame_index < len(clip.frames) - 1):
        raise IndexError(
            f"frame_index {frame_index} out of range for a {len(clip.frames)}-frame clip"
        )
    yaw, txy = planar_alignment(clip.frames[0], anchor.frame.root_pos[:2], anchor.frame.yaw)
    nxt = transform_frame_planar(clip.frames[frame_index + 1], yaw, txy)
    return CharacterState(frame=nxt, time_index=anchor.time_index + frame_index + 1)
