import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racon import geom
from racon.gaits import generate_synthetic_clips
from racon.motion import (
    CharacterFrame,
    CharacterState,
    ClipFormatError,
    ClipValidationError,
    MotionClip,
    load_clips,
    rotate_clip,
    save_clips,
    step_along_clip,
    transform_frame_planar,
    validate_clip,
)


def quat_close(a, b, tol=1e-9):
    # sign-insensitive componentwise closeness; acos-based angles blow up
    # floating point noise near identity
    return min(np.max(np.abs(a - b)), np.max(np.abs(a + b))) < tol


def make_frame(x=0.0, y=0.0, z=0.9, yaw=0.0, vx=0.0, vy=0.0):
    return CharacterFrame(
        root_pos=(x, y, z),
        root_rot=geom.quat_from_yaw(yaw),
        root_linvel=(vx, vy, 0.0),
        root_angvel=(0.0, 0.0, 0.0),
        endpoints=np.zeros((4, 3)) + [[0.0, 0.3, -0.2]],
        endpoint_vels=np.zeros((4, 3)),
    )


def test_roundtrip_two_clips(tmp_path):
    clips = generate_synthetic_clips("walk", 2, 3)
    path = tmp_path / "two.clips.json"
    save_clips(clips, path)
    loaded = load_clips(path)
    assert [c.clip_id for c in loaded] == [c.clip_id for c in clips]
    assert len(loaded) == 2


def test_roundtrip_empty(tmp_path):
    path = tmp_path / "empty.clips.json"
    save_clips([], path)
    assert load_clips(path) == []


def test_roundtrip_bit_exact(tmp_path):
    clips = generate_synthetic_clips("run", 5, 11)
    path = tmp_path / "run.clips.json"
    save_clips(clips, path)
    loaded = load_clips(path)
    for a, b in zip(clips, loaded):
        assert a.clip_id == b.clip_id and a.style_tag == b.style_tag and a.fps == b.fps
        for fa, fb in zip(a.frames, b.frames):
            for name in ("root_pos", "root_rot", "root_linvel", "root_angvel", "endpoints", "endpoint_vels"):
                assert np.array_equal(getattr(fa, name), getattr(fb, name)), name


def test_large_roundtrip_parses_quickly(tmp_path):
    clips = generate_synthetic_clips("walk", 5000, 0)
    path = tmp_path / "big.clips.json"
    save_clips(clips, path)
    t0 = time.perf_counter()
    loaded = load_clips(path)
    elapsed = time.perf_counter() - t0
    assert len(loaded) == 5000
    assert elapsed < 5.0, f"load took {elapsed:.2f}s"
    assert np.array_equal(loaded[-1].frames[-1].root_pos, clips[-1].frames[-1].root_pos)


def test_synthetic_walk_file_shape(tmp_path):
    clips = generate_synthetic_clips("walk", 500, 21)
    path = tmp_path / "walk500.clips.json"
    save_clips(clips, path)
    loaded = load_clips(path)
    assert len(loaded) == 500
    assert all(len(c.frames) == 16 and c.fps == 30 for c in loaded)


def test_malformed_file_reports_position(tmp_path):
    path = tmp_path / "bad.clips.json"
    path.write_text('{"version": 1, "fps": 30, "clips": [{]}')
    with pytest.raises(ClipFormatError) as err:
        load_clips(path)
    assert "line" in str(err.value) and "offset" in str(err.value)


def test_missing_key_reports_name(tmp_path):
    path = tmp_path / "bad2.clips.json"
    path.write_text('{"version": 1, "clips": []}')
    with pytest.raises(ClipFormatError) as err:
        load_clips(path)
    assert "fps" in str(err.value)


def test_bad_quaternion_names_clip(tmp_path):
    clip = generate_synthetic_clips("walk", 1, 5)[0]
    doc = {"version": 1, "fps": 30, "clips": [clip.to_dict()]}
    doc["clips"][0]["frames"][3]["q"] = [0.5, 0.0, 0.0, 0.0]
    path = tmp_path / "badq.clips.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ClipValidationError) as err:
        load_clips(path)
    assert "clip 0" in str(err.value) and "root_rot" in str(err.value)


def test_duplicate_ids_rejected(tmp_path):
    clips = generate_synthetic_clips("walk", 2, 5)
    doc = {"version": 1, "fps": 30, "clips": [c.to_dict() for c in clips]}
    doc["clips"][1]["id"] = doc["clips"][0]["id"]
    path = tmp_path / "dup.clips.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ClipValidationError, match="duplicate"):
        load_clips(path)


def test_clip_needs_two_frames():
    with pytest.raises(ClipValidationError, match="2 frames"):
        validate_clip(MotionClip(frames=(make_frame(),), clip_id=9))


def test_displacement_consistency_check():
    frames = (make_frame(0, 0, 0.9, vx=0.0), make_frame(1.0, 0, 0.9, vx=0.0))
    with pytest.raises(ClipValidationError, match="displacement"):
        validate_clip(MotionClip(frames=frames, clip_id=4))


def test_generated_velocity_self_consistency():
    for style in ("walk", "run", "turn", "skip", "zombie"):
        for clip in generate_synthetic_clips(style, 10, 13):
            pos = np.stack([f.root_pos for f in clip.frames])
            vel = np.stack([f.root_linvel for f in clip.frames])
            fd = (pos[1:] - pos[:-1]) * clip.fps
            mid = 0.5 * (vel[1:] + vel[:-1])
            assert np.max(np.linalg.norm(fd - mid, axis=1)) < 0.05


def test_step_identity_stitch_exact():
    clip = generate_synthetic_clips("walk", 1, 2)[0]
    anchor = CharacterState(frame=clip.frames[0], time_index=0)
    out = step_along_clip(clip, 0, anchor)
    for name in ("root_pos", "root_rot", "root_linvel", "root_angvel", "endpoints", "endpoint_vels"):
        assert np.array_equal(getattr(out.frame, name), getattr(clip.frames[1], name)), name
    assert out.time_index == 1


def test_step_rigid_transform_equivariance():
    clip = generate_synthetic_clips("turn", 1, 3)[0]
    yaw, txy = 1.1, np.array([4.0, -2.0])
    anchor_frame = transform_frame_planar(clip.frames[0], yaw, txy)
    anchor = CharacterState(frame=anchor_frame, time_index=0)
    out = step_along_clip(clip, 4, anchor)
    expect = transform_frame_planar(clip.frames[5], yaw, txy)
    np.testing.assert_allclose(out.frame.root_pos, expect.root_pos, atol=1e-9)
    np.testing.assert_allclose(out.frame.root_linvel, expect.root_linvel, atol=1e-9)
    assert quat_close(out.frame.root_rot, expect.root_rot)


def test_yaw_local_endpoints_stitch_invariant():
    clip = generate_synthetic_clips("run", 1, 4)[0]
    rotated = rotate_clip(clip, 0.83)
    for a, b in zip(clip.frames, rotated.frames):
        assert np.array_equal(a.endpoints, b.endpoints)
        assert np.array_equal(a.endpoint_vels, b.endpoint_vels)


def test_step_index_range():
    clip = generate_synthetic_clips("walk", 1, 2)[0]
    anchor = CharacterState(frame=clip.frames[0])
    with pytest.raises(IndexError):
        step_along_clip(clip, len(clip.frames) - 1, anchor)
    with pytest.raises(IndexError):
        step_along_clip(clip, -1, anchor)


@settings(max_examples=25, deadline=None)
@given(
    yaw=st.floats(-math.pi, math.pi),
    tx=st.floats(-10, 10),
    ty=st.floats(-10, 10),
    idx=st.integers(0, 14),
)
def test_stitch_equivariance_property(yaw, tx, ty, idx):
    clip = generate_synthetic_clips("turn", 1, 6)[0]
    txy = np.array([tx, ty])
    anchor = CharacterState(frame=transform_frame_planar(clip.frames[0], yaw, txy))
    stepped = step_along_clip(clip, idx, anchor)
    direct = transform_frame_planar(clip.frames[idx + 1], yaw, txy)
    np.testing.assert_allclose(stepped.frame.root_pos, direct.root_pos, atol=1e-9)
    np.testing.assert_allclose(stepped.frame.root_linvel, direct.root_linvel, atol=1e-9)
    assert quat_close(stepped.frame.root_rot, direct.root_rot)


def test_frames_are_immutable():
    frame = make_frame()
    with pytest.raises(ValueError):
        frame.root_pos[0] = 5.0
