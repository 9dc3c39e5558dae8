"""Interactive steering service.

Each session owns one character, one retrieval stream, and a 30 Hz
server-authoritative tick loop. Clients steer through a message channel
(set_goal / switch_db / reset) and receive one frame message per tick carrying
the simulated state and the retrieved reference. Database switches wait for
the next retrieval boundary so a stitched clip always finishes playing.
"""
from __future__ import annotations

import asyncio
import itertools
import json
import threading
import time

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect

from .motion import CharacterState, Goal, validate_goal
from .nets import forward, squash_actions
from .retrieval import RetrievalEnv, load_database
from .surrogate import SurrogateEnv
from .training import (
    CheckpointBundle,
    action_to_control,
    ctrl_observation,
    load_checkpoint,
    retr_observation,
)

DEFAULT_PORT = 8090
TICK_DT = 1.0 / 30.0
SUBSCRIBER_QUEUE_LIMIT = 64


def frame_payload(state: CharacterState) -> dict:
    return {"t": state.time_index, **state.frame.to_dict()}


def _warm_kernels(db) -> None:
    """Trigger kernel JIT before the first tick so frame one is not late."""
    from . import kernels

    query = np.zeros(db.dim)
    kernels.sq_dists(db.keys[:8], query)
    kernels.weighted_sq_dists(db.keys[:8], query, np.ones(db.dim))
    kernels.gae_scan(np.zeros(4), np.zeros(5), np.ones(4), 0.97, 0.95)


class Subscriber:
    """Bridge from the tick thread into one client's asyncio queue.

    The queue keeps only the freshest frames (drop-oldest); a gap marker is
    synthesized on delivery whenever consecutive delivered ticks are not
    contiguous, covering exactly the dropped range.
    """

    def __init__(self, loop: asyncio.AbstractEventLoop, limit: int = SUBSCRIBER_QUEUE_LIMIT):
        self.loop = loop
        self.queue: asyncio.Queue = asyncio.Queue()
        self.limit = limit
        self._last_tick: int | None = None
        self._held: dict | None = None

    def offer(self, message: dict) -> None:
        """Called from the tick thread."""

        def push():
            while self.queue.qsize() >= self.limit:
                self.queue.get_nowait()
            self.queue.put_nowait(message)

        try:
            self.loop.call_soon_threadsafe(push)
        except RuntimeError:
            pass  # client loop already closed; the session will drop us on detach

    async def next_message(self) -> dict:
        """Next frame for this client, preceded by a gap marker after drops."""
        if self._held is not None:
            message, self._held = self._held, None
        else:
            message = await self.queue.get()
        tick = message["tick"]
        if self._last_tick is not None and tick > self._last_tick + 1:
            self._held = message
            gap = {"type": "gap", "from": self._last_tick + 1, "to": tick - 1}
            self._last_tick = tick - 1
            return gap
        self._last_tick = tick
        return message


class SteeringSession:
    """One character driven by a loaded checkpoint; safe to tick from one thread
    while inputs arrive from others through the mailbox."""

    def __init__(
        self,
        session_id: str,
        bundle: CheckpointBundle,
        databases: dict,
        initial_db: str | None = None,
        seed: int = 0,
        v_max: float | None = None,
    ):
        self.session_id = session_id
        self.bundle = bundle
        cfg = bundle.config
        self.cfg = cfg
        self.v_max = cfg.v_max if v_max is None else v_max
        self.retr_env = RetrievalEnv(databases, period=cfg.retrieval_period)
        names = sorted(databases)
        self.db_name = initial_db if initial_db is not None else names[0]
        if self.db_name not in databases:
            raise KeyError(f"unknown database {self.db_name!r}; available: {names}")
        self.rng = np.random.default_rng(np.random.SeedSequence([seed]))
        self.env = SurrogateEnv(cfg.env, self.rng)
        self.goal = Goal(desired_velocity=(0.0, 0.0))
        self.tick_index = 0
        self.terminations = 0
        self.pending_db: str | None = None
        self._mailbox: list[dict] = []
        self._lock = threading.Lock()
        self._subscribers: dict[int, Subscriber] = {}
        self._sub_ids = itertools.count()
        self.state = self.env.reset(databases[self.db_name])
        self.retr_state = self.retr_env.initial_state(self.db_name)

    # -- client input ------------------------------------------------------------

    def submit(self, message: dict) -> dict:
        """Queue a client message; validation happens immediately, effects apply
        before the next tick."""
        kind = message.get("type")
        if kind == "set_goal":
            vx = float(message.get("vx", 0.0))
            vy = float(message.get("vy", 0.0))
            facing = message.get("facing")
            goal = Goal(
                desired_velocity=(vx, vy),
                desired_facing=None if facing is None else float(facing),
            )
            validate_goal(goal, self.v_max)
        elif kind == "switch_db":
            name = message.get("name")
            if name not in self.retr_env.databases:
                raise KeyError(
                    f"unknown database {name!r}; available: {sorted(self.retr_env.databases)}"
                )
        elif kind == "reset":
            pass
        else:
            raise ValueError(f"unknown message type {kind!r}")
        with self._lock:
            self._mailbox.append(message)
        return {"type": "ack", "of": kind}

    def _apply_inputs(self) -> None:
        with self._lock:
            inbox, self._mailbox = self._mailbox, []
        for message in inbox:
            kind = message["type"]
            if kind == "set_goal":
                facing = message.get("facing")
                self.goal = Goal(
                    desired_velocity=(float(message["vx"]), float(message["vy"])),
                    desired_facing=None if facing is None else float(facing),
                )
            elif kind == "switch_db":
                name = message["name"]
                self.pending_db = None if name == self.db_name else name
            elif kind == "reset":
                self._reset_character()

    def _reset_character(self) -> None:
        self.state = self.env.reset(self.retr_env.databases[self.db_name])
        self.retr_state = self.retr_env.initial_state(self.db_name)

    # -- tick loop ----------------------------------------------------------------

    def tick(self) -> dict:
        """Advance one 30 Hz step and broadcast the frame message."""
        self._apply_inputs()
        nets = self.bundle.nets
        db_select = None
        if self.retr_state.retr_flag:
            if self.pending_db is not None:
                db_select = self.pending_db
                self.db_name = self.pending_db
                self.pending_db = None
            stats = self.retr_env.databases[self.db_name].norm_stats
            robs = retr_observation(self.state, self.goal, stats)
            rmean, _ = forward(nets.retr_pi.mlp, robs[None, :])
            weights = squash_actions(rmean)[0]
        else:
            weights = None
        self.retr_state, ref = self.retr_env.step(
            self.retr_state, weights, self.state, self.goal, db_select=db_select
        )
        obs = ctrl_observation(self.state, self.goal, ref)
        mean, _ = forward(nets.ctrl_pi.mlp, obs[None, :])
        self.state = self.env.step(self.state, action_to_control(mean[0], self.state.frame.yaw))
        if self.env.termination_check(self.state, self.goal):
            self.terminations += 1
            self._reset_character()
        message = {
            "type": "frame",
            "tick": self.tick_index,
            "state": frame_payload(self.state),
            "ref_state": frame_payload(ref),
            "db": self.db_name,
            "goal": {
                "vx": float(self.goal.desired_velocity[0]),
                "vy": float(self.goal.desired_velocity[1]),
                "facing": self.goal.desired_facing,
            },
        }
        self.tick_index += 1
        for sub in list(self._subscribers.values()):
            sub.offer(message)
        return message

    def subscribe(self, loop: asyncio.AbstractEventLoop) -> tuple[int, Subscriber]:
        sub = Subscriber(loop)
        sub_id = next(self._sub_ids)
        self._subscribers[sub_id] = sub
        return sub_id, sub

    def unsubscribe(self, sub_id: int) -> None:
        self._subscribers.pop(sub_id, None)


class SessionRunner:
    """Drives a session at a fixed 30 Hz wall-clock rate without drift."""

    def __init__(self, session: SteeringSession):
        self.session = session
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=2.0)

    def _run(self) -> None:
        origin = time.monotonic()
        n = 0
        while not self._stop.is_set():
            self.session.tick()
            n += 1
            deadline = origin + n * TICK_DT
            delay = deadline - time.monotonic()
            if delay > 0:
                self._stop.wait(delay)


# --- HTTP + channel app --------------------------------------------------------------


def create_app(checkpoint_path: str, db_paths: list[str], seed: int = 0) -> FastAPI:
    from contextlib import asynccontextmanager

    bundle = load_checkpoint(checkpoint_path)
    databases = {}
    for path in db_paths:
        db = load_database(path)
        databases[db.name] = db
    if not databases:
        raise ValueError("the service needs at least one database")
    _warm_kernels(next(iter(databases.values())))

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for runner in app.state.runners.values():
            runner.stop()

    app = FastAPI(title="racon steering service", lifespan=lifespan)
    app.state.bundle = bundle
    app.state.databases = databases
    app.state.sessions = {}
    app.state.runners = {}
    app.state.next_session = itertools.count(1)
    app.state.seed = seed

    @app.get("/v1/databases")
    def list_databases():
        return {"databases": sorted(databases)}

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: dict | None = None):
        body = body or {}
        initial_db = body.get("db")
        if initial_db is not None and initial_db not in databases:
            raise HTTPException(
                status_code=404,
                detail=f"unknown database {initial_db!r}; available: {sorted(databases)}",
            )
        session_seed = int(body.get("seed", app.state.seed + len(app.state.sessions)))
        session_id = f"s{next(app.state.next_session)}"
        session = SteeringSession(
            session_id, bundle, databases, initial_db=initial_db, seed=session_seed
        )
        runner = SessionRunner(session)
        app.state.sessions[session_id] = session
        app.state.runners[session_id] = runner
        runner.start()
        return {"session_id": session_id, "db": session.db_name}

    @app.delete("/v1/sessions/{session_id}")
    def delete_session(session_id: str):
        session = app.state.sessions.pop(session_id, None)
        runner = app.state.runners.pop(session_id, None)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        if runner is not None:
            runner.stop()
        return {"deleted": session_id}

    @app.websocket("/v1/sessions/{session_id}/channel")
    async def channel(ws: WebSocket, session_id: str):
        session = app.state.sessions.get(session_id)
        if session is None:
            await ws.close(code=4404)
            return
        await ws.accept()
        loop = asyncio.get_running_loop()
        sub_id, sub = session.subscribe(loop)

        async def pump_out():
            while True:
                message = await sub.next_message()
                await ws.send_text(json.dumps(message))

        async def pump_in():
            while True:
                text = await ws.receive_text()
                try:
                    message = json.loads(text)
                    reply = session.submit(message)
                except (ValueError, KeyError) as exc:
                    reply = {"type": "error", "detail": str(exc)}
                await ws.send_text(json.dumps(reply))

        out_task = asyncio.create_task(pump_out())
        in_task = asyncio.create_task(pump_in())
        try:
            done, pending = await asyncio.wait(
                {out_task, in_task}, return_when=asyncio.FIRST_COMPLETED
            )
            for task in pending:
                task.cancel()
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(exc, WebSocketDisconnect):
                    raise exc
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(sub_id)
            for task in (out_task, in_task):
                task.cancel()

    return app


def serve(checkpoint_path: str, db_paths: list[str], host: str = "127.0.0.1", port: int | None = None, seed: int = 0):
    import os

    import uvicorn

    if port is None:
        port = int(os.environ.get("RACON_PORT", DEFAULT_PORT))
    app = create_app(checkpoint_path, db_paths, seed=seed)
    uvicorn.run(app, host=host, port=port, log_level="warning")
