"""Retrieval environment: database build, weighted exact kNN, clip stitching,
and the periodic stitch/step mechanics that produce the reference stream.

Databases are immutable; several can be loaded at once and the active one can
be swapped at a retrieval boundary, which atomically swaps keys, clips and
normalization statistics.
"""
from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .features import NormStats, extract_key, extract_raw_query, fit_norm_stats, STD_FLOOR
from .motion import (
    CharacterState,
    Goal,
    MotionClip,
    _frames_from_dicts,
    planar_alignment,
    step_along_clip,
    transform_frame_planar,
    validate_clip,
)

DB_MAGIC = b"RACD"
DB_VERSION = 1
DEFAULT_RETRIEVAL_PERIOD = 15  # transitions per retrieval, one clip span
WEIGHT_LOW, WEIGHT_HIGH = 0.0, 2.0


@dataclass(frozen=True)
class RetrievalDatabase:
    """Normalized key matrix plus the clip store it indexes."""

    name: str
    keys: np.ndarray          # (N, D) z-scored
    norm_stats: NormStats
    clips: tuple[MotionClip, ...]
    built_at: float

    def __post_init__(self):
        keys = np.array(self.keys, dtype=float)
        keys.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "clips", tuple(self.clips))
        if keys.ndim != 2 or keys.shape[0] != len(self.clips):
            raise ValueError("key matrix rows must correspond 1:1 to clips")
        if len(self.clips) < 1:
            raise ValueError("database needs at least one clip")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def clip_by_id(self, clip_id: int) -> MotionClip:
        idx = self._id_index().get(clip_id)
        if idx is None:
            raise KeyError(f"clip id {clip_id} not in database {self.name!r}")
        return self.clips[idx]

    def _id_index(self) -> dict:
        cached = self.__dict__.get("_ids")
        if cached is None:
            cached = {c.clip_id: i for i, c in enumerate(self.clips)}
            self.__dict__["_ids"] = cached
        return cached

    def clip_ids(self) -> frozenset[int]:
        return frozenset(c.clip_id for c in self.clips)


def build_database(clips, name: str) -> RetrievalDatabase:
    """Extract, fit, and normalize keys for a uniform-length clip collection."""
    clips = tuple(clips)
    if not clips:
        raise ValueError("cannot build a database from zero clips")
    counts = {len(c.frames) for c in clips}
    if len(counts) != 1:
        raise ValueError(f"clips must share one frame count, found {sorted(counts)}")
    raw = np.stack([extract_key(c) for c in clips])
    if len(clips) >= 2:
        stats = fit_norm_stats(raw)
    else:
        stats = NormStats(mean=raw[0], std=np.full(raw.shape[1], STD_FLOOR))
    keys = (raw - stats.mean) / stats.std
    return RetrievalDatabase(
        name=name, keys=keys, norm_stats=stats, clips=clips, built_at=time.time()
    )


def weighted_query(raw: np.ndarray, weights: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize the raw query, then scale per-dimension by the policy weights."""
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < WEIGHT_LOW - 1e-9) or np.any(weights > WEIGHT_HIGH + 1e-9):
        raise ValueError(f"query weights must lie in [{WEIGHT_LOW}, {WEIGHT_HIGH}]")
    return weights * stats.normalize(raw)


def knn_search(
    db: RetrievalDatabase, query: np.ndarray, k: int, weights: np.ndarray | None = None
) -> list[tuple[int, float]]:
    """Exact k nearest keys, ascending distance, ties broken by smaller row index.

    Without weights the metric is plain Euclidean over the normalized keys.
    With weights the per-dimension scaling applies to both sides: the query is
    expected pre-weighted (see weighted_query) and each key row is scaled by
    the same weights, so zero-weight dimensions drop out of the metric.
    """
    query = np.asarray(query, dtype=float)
    if query.shape != (db.dim,):
        raise ValueError(f"query has shape {query.shape}, database dimension is {db.dim}")
    if not (1 <= k <= len(db)):
        raise ValueError(f"k={k} out of range for a database of {len(db)} clips")
    if weights is None:
        d2 = kernels.sq_dists(db.keys, query)
    else:
        d2 = kernels.weighted_sq_dists(db.keys, query, np.asarray(weights, dtype=float))
    if k == 1:
        best = int(np.argmin(d2))  # argmin keeps the first (lowest index) on ties
        order = [best]
    else:
        order = np.argsort(d2, kind="stable")[:k]
    return [(db.clips[i].clip_id, float(np.sqrt(d2[i]))) for i in order]


@dataclass(frozen=True)
class PlanarTransform:
    yaw: float
    tx: float
    ty: float


@dataclass(frozen=True)
class RetrievalState:
    """Progress through the currently stitched clip.

    retr_flag marks ticks where a fresh query is due; between flags the state
    only steps along the stitched clip. A state with no clip yet (before the
    first query) has current_clip < 0.
    """

    active_db: str
    current_clip: int = -1
    frame_cursor: int = 0
    stitch_transform: PlanarTransform = PlanarTransform(0.0, 0.0, 0.0)
    anchor: CharacterState | None = None
    retr_flag: bool = True


def stitch(
    clip: MotionClip, character: CharacterState, db_name: str = ""
) -> tuple[RetrievalState, CharacterState]:
    """Plant the clip's first frame on the character's ground pose.

    The planar transform matches first-frame x, y and yaw to the character;
    height and tilt come from the clip. Returns the post-stitch state with the
    flag consumed plus the stitched frame-0 state as the new anchor.
    """
    yaw, txy = planar_alignment(clip.frames[0], character.frame.root_pos[:2], character.frame.yaw)
    anchor_frame = transform_frame_planar(clip.frames[0], yaw, txy)
    anchor = CharacterState(frame=anchor_frame, time_index=character.time_index)
    state = RetrievalState(
        active_db=db_name,
        current_clip=clip.clip_id,
        frame_cursor=0,
        stitch_transform=PlanarTransform(yaw, float(txy[0]), float(txy[1])),
        anchor=anchor,
        retr_flag=False,
    )
    return state, anchor


class RetrievalEnv:
    """Holds the database set and advances RetrievalStates tick by tick.

    Control always takes the single best match; diagnostics can call
    knn_search with larger k directly.
    """

    def __init__(self, databases, period: int = DEFAULT_RETRIEVAL_PERIOD):
        if isinstance(databases, dict):
            self.databases = dict(databases)
        else:
            self.databases = {db.name: db for db in databases}
        if not self.databases:
            raise ValueError("need at least one database")
        for db in self.databases.values():
            frames = len(db.clips[0].frames)
            if period > frames - 1:
                raise ValueError(
                    f"retrieval period {period} exceeds the {frames - 1} transitions of a clip"
                )
        self.period = period

    def initial_state(self, db_name: str) -> RetrievalState:
        self._database(db_name)
        return RetrievalState(active_db=db_name)

    def _database(self, name: str) -> RetrievalDatabase:
        db = self.databases.get(name)
        if db is None:
            raise KeyError(f"unknown database {name!r}; loaded: {sorted(self.databases)}")
        return db

    def active_clip(self, state: RetrievalState) -> MotionClip:
        if state.current_clip < 0:
            raise ValueError("no clip retrieved yet")
        return self._database(state.active_db).clip_by_id(state.current_clip)

    def step(
        self,
        state: RetrievalState,
        action: np.ndarray | None,
        character: CharacterState,
        goal: Goal,
        db_select: str | None = None,
    ) -> tuple[RetrievalState, CharacterState]:
        """One tick of the retrieval environment.

        On a flag tick the action (query weights) selects and stitches a new
        clip and the stitched frame-1 state is returned; otherwise the state
        steps one frame along the current clip. Database switches are only
        honored on flag ticks.
        """
        if state.retr_flag:
            if action is None:
                raise ValueError("retrieval flag is set: query weights are required")
            name = state.active_db if db_select is None else db_select
            db = self._database(name)
            raw = extract_raw_query(character, goal)
            query = weighted_query(raw, action, db.norm_stats)
            clip_id, _ = knn_search(db, query, 1, weights=action)[0]
            clip = db.clip_by_id(clip_id)
            new_state, anchor = stitch(clip, character, db_name=name)
            nxt = step_along_clip(clip, 0, anchor)
            cursor = 1
            new_state = replace(
                new_state, frame_cursor=cursor, retr_flag=cursor >= self.period
            )
            return new_state, nxt
        if action is not None:
            raise ValueError("query weights supplied while the retrieval flag is down")
        if db_select is not None and db_select != state.active_db:
            raise ValueError("database switches are only applied at a retrieval boundary")
        clip = self.active_clip(state)
        nxt = step_along_clip(clip, state.frame_cursor, state.anchor)
        cursor = state.frame_cursor + 1
        new_state = replace(state, frame_cursor=cursor, retr_flag=cursor >= self.period)
        return new_state, nxt

    def current_state(self, state: RetrievalState) -> CharacterState:
        """The reference state at the cursor (frame_cursor of the stitched clip)."""
        if state.frame_cursor == 0:
            if state.anchor is None:
                raise ValueError("no clip retrieved yet")
            return state.anchor
        clip = self.active_clip(state)
        return step_along_clip(clip, state.frame_cursor - 1, state.anchor)

    def peek_next(self, state: RetrievalState) -> CharacterState:
        """One frame past the cursor, clamped at the clip end (lookahead for
        the motion-prior triplet)."""
        return self.peek_ahead(state, 1)

    def peek_ahead(self, state: RetrievalState, steps: int) -> CharacterState:
        """`steps` frames past the cursor along the stitched clip, clamped at
        the clip end (extended motion-prior windows look further out)."""
        clip = self.active_clip(state)
        last = len(clip.frames) - 1
        idx = min(state.frame_cursor + steps - 1, last - 1)
        return step_along_clip(clip, idx, state.anchor)


# --- database container file -------------------------------------------------


def save_database(db: RetrievalDatabase, path) -> None:
    clip_doc = {
        "version": 1,
        "fps": db.clips[0].fps,
        "clips": [c.to_dict() for c in db.clips],
    }
    blob = json.dumps(clip_doc, separators=(",", ":")).encode("utf-8")
    name_bytes = db.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<I", DB_VERSION))
        fh.write(struct.pack("<I", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<d", db.built_at))
        fh.write(struct.pack("<II", len(db), db.dim))
        fh.write(np.ascontiguousarray(db.norm_stats.mean).tobytes())
        fh.write(np.ascontiguousarray(db.norm_stats.std).tobytes())
        fh.write(np.ascontiguousarray(db.keys).tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_database(path) -> RetrievalDatabase:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != DB_MAGIC:
        raise ValueError(f"{path}: not a retrieval database (magic {magic!r})")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != DB_VERSION:
        raise ValueError(f"{path}: unsupported database version {version}")
    (name_len,) = struct.unpack("<I", buf.read(4))
    name = buf.read(name_len).decode("utf-8")
    (built_at,) = struct.unpack("<d", buf.read(8))
    n, dim = struct.unpack("<II", buf.read(8))
    mean = np.frombuffer(buf.read(8 * dim), dtype=np.float64)
    std = np.frombuffer(buf.read(8 * dim), dtype=np.float64)
    keys = np.frombuffer(buf.read(8 * n * dim), dtype=np.float64).reshape(n, dim)
    (blob_len,) = struct.unpack("<Q", buf.read(8))
    clip_doc = json.loads(buf.read(blob_len).decode("utf-8"))
    clips = []
    for cd in clip_doc["clips"]:
        clip = MotionClip(
            frames=_frames_from_dicts(cd["frames"]),
            fps=clip_doc["fps"],
            clip_id=cd["id"],
            style_tag=cd["style"],
        )
        validate_clip(clip)
        clips.append(clip)
    return RetrievalDatabase(
        name=name,
        keys=keys,
        norm_stats=NormStats(mean=mean, std=std),
        clips=tuple(clips),
        built_at=built_at,
    )
