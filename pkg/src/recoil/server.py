"""Local WebSocket service: live simulation, human clutch takeover, dashboards.

One authoritative simulation loop ticks at 30 Hz. Human motion arrives as
relative deltas into a latest-writer-wins mailbox (stale mouse events cannot
backlog); the loop converts them through the clutch geometry to planar
actions. Broadcast is best-effort per client with a bounded queue. Episodes
recorded in interactive mode go through the same phase machine and storage
rules as oracle collection, so the same validators apply to both.
"""

from __future__ import annotations

import asyncio
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import geometry as G
from . import rng
from .data import (
    Dataset,
    DatasetWriter,
    Episode,
    Frame,
    LABEL_CORRECTION,
    LABEL_POLICY,
    LABEL_RECOVERY,
    OUTCOME_AUTON,
    OUTCOME_FAILED,
    OUTCOME_INTERVENED,
    SRC_HUMAN,
    SRC_POLICY,
    append,
    read as read_dataset,
)
from .env import EnvConfig, STATUS_RUNNING, clip_action, observe, reset, step
from .oracle import MODE_RAC, MODE_RULE2ONLY, OracleConfig, VisitationGrid, build_grid, recovery_done
from .policy import NetDims, PolicyParams, executed_per_plan, init_params, load_policy, sample_chunk
from .protocols import InterventionPhase, collect_demo_episode, load_run

TICK_HZ = 30
BROADCAST_QUEUE_DEPTH = 8
PHASE_AUTO = "auto"
# demos used to bootstrap a visitation grid when no run directory is given
BOOTSTRAP_DEMOS = 20


def _load_schema():
    import jsonschema

    path = os.path.join(os.path.dirname(__file__), "..", "..", "schema", "ws_messages.schema.json")
    path = os.path.abspath(path)
    if not os.path.exists(path):
        # installed layout: schema shipped next to the package
        path = os.path.join(os.path.dirname(__file__), "ws_messages.schema.json")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return jsonschema.Draft7Validator(doc["definitions"]["client_to_server"])


@dataclass
class HumanInput:
    """Latest-writer-wins mailbox for one control tick."""

    engaged: bool = False
    dx: float = 0.0
    dy: float = 0.0
    mark_recovery_done: bool = False
    reset_requested: bool = False

    def take_delta(self) -> tuple[float, float]:
        d = (self.dx, self.dy)
        self.dx = 0.0
        self.dy = 0.0
        return d


class ServeSession:
    """Authoritative simulation state for one serve process."""

    def __init__(
        self,
        mode: str,
        env_cfg: EnvConfig,
        params: PolicyParams,
        grid: VisitationGrid | None,
        protocol: str = "rac",
        seed: int = 1,
        out_path=None,
        replay_episodes: list[Episode] | None = None,
    ):
        self.mode = mode
        self.env_cfg = env_cfg
        self.params = params
        self.grid = grid
        self.protocol = protocol
        self.seed = seed
        self.episode_index = 0
        self.input = HumanInput()
        self.controlling_client: int | None = None
        self.dataset = Dataset(env_cfg, created_unix=0)
        self.writer = DatasetWriter(self.dataset, out_path) if out_path else None
        self.replay_episodes = replay_episodes or []
        self._replay_pos = 0
        # clutch bookkeeping: a virtual 3-D controller pose driven by deltas
        self._controller = G.identity()
        self._clutch: G.ClutchSession | None = None
        self._chunk_rows: list[np.ndarray] = []
        self._phase: InterventionPhase | None = None
        self._intervened = False
        self._frames: list[Frame] = []
        self._manual_marks: list[int] = []
        self.state = reset(env_cfg, self._episode_seed())
        self.clients: dict[int, asyncio.Queue] = {}
        self._next_client = 0

    def _episode_seed(self) -> int:
        return rng.derive_seed(self.seed, self.episode_index, rng.EPISODE)

    # ---------------- message handling ----------------

    def handle_message(self, client_id: int, msg: dict) -> dict | None:
        kind = msg.get("type")
        if kind == "clutch":
            if self.controlling_client in (None, client_id):
                engaged = bool(msg["engaged"])
                if engaged:
                    self.controlling_client = client_id
                    self._engage_clutch()
                else:
                    self._release_clutch()
                    self.controlling_client = None
            return None
        if kind == "move":
            if self.controlling_client == client_id and self.input.engaged:
                self.input.dx += float(msg["dx"])
                self.input.dy += float(msg["dy"])
            return None
        if kind == "reset":
            self.input.reset_requested = True
            return None
        if kind == "mark":
            self.input.mark_recovery_done = True
            return None
        if kind == "get_heatmap":
            stage = int(msg["stage"])
            if self.grid is None or not 0 <= stage < self.env_cfg.num_stages:
                return {"type": "error", "msg": f"no heatmap for stage {stage}"}
            return {
                "type": "heatmap",
                "resolution": self.grid.resolution,
                "stage": stage,
                "counts": self.grid.counts[stage].tolist(),
            }
        return {"type": "error", "msg": f"unknown message type {kind!r}"}

    def _engage_clutch(self) -> None:
        self.input.engaged = True
        self._clutch = G.clutch_engage(self._controller)
        if self.mode != "interactive":
            return
        if self.protocol == "hgdagger":
            # every takeover is a fresh correction burst
            self._intervened = True
            self._phase = InterventionPhase(MODE_RULE2ONLY, self.state.stage)
        elif not self._intervened:
            start_mode = MODE_RAC if self.protocol == "rac" else MODE_RULE2ONLY
            self._intervened = True
            self._phase = InterventionPhase(start_mode, self.state.stage)

    def _release_clutch(self) -> None:
        self.input.engaged = False
        self._clutch = None

    def config_message(self) -> dict:
        return {
            "type": "config",
            "env": self.env_cfg.to_json(),
            "mode": self.mode,
            "protocol": self.protocol,
        }

    # ---------------- simulation tick ----------------

    def _human_action(self) -> np.ndarray:
        dx, dy = self.input.take_delta()
        pose = G.Pose(self._controller.p + np.array([dx, dy, 0.0]), self._controller.R)
        self._controller = pose
        delta, self._clutch = G.clutch_step(self._clutch, pose)
        return clip_action(delta.dp[:2], self.env_cfg.action_clip)

    def _policy_action(self) -> np.ndarray:
        if not self._chunk_rows:
            gen = rng.stream(self.state.seed, self.state.steps, rng.CHUNK_NOISE)
            chunk = sample_chunk(self.params, observe(self.state, self.env_cfg), gen)
            self._chunk_rows = [row for row in chunk[: executed_per_plan(self.params.dims.horizon)]]
        row = self._chunk_rows.pop(0)
        return clip_action(row, self.env_cfg.action_clip)

    def _commit_episode(self, discard: bool = False) -> None:
        if self._frames and not discard:
            if self._intervened:
                outcome = OUTCOME_INTERVENED
            elif self.state.status == "success":
                outcome = OUTCOME_AUTON
            else:
                outcome = OUTCOME_FAILED
            ep = Episode(
                id=self.dataset.next_episode_id(),
                round=0,
                protocol=self.protocol,
                seed=self._episode_seed(),
                frames=self._frames,
                outcome=outcome,
                subtasks_completed=self.state.stage,
                full_len=len(self._frames),
            )
            append(self.dataset, ep)
            if self.writer is not None:
                self.writer.commit(self.dataset.episodes[-1])
        self._frames = []
        self._manual_marks = []
        self._intervened = False
        self._phase = None
        self._chunk_rows = []
        self.episode_index += 1
        self.state = reset(self.env_cfg, self._episode_seed())

    def serve_tick(self) -> dict:
        """Advance one 30 Hz control step and return the state broadcast."""
        if self.mode == "replay":
            return self._replay_tick()
        if self.input.reset_requested:
            self.input.reset_requested = False
            self._commit_episode(discard=True)

        phase_name = PHASE_AUTO
        if self.state.status == STATUS_RUNNING:
            engaged = self.input.engaged and self._clutch is not None
            intervention_pending = self._intervened and self._phase is not None and self.mode == "interactive"
            if engaged:
                label = LABEL_POLICY
                if self.mode == "interactive" and self._phase is None:
                    # clutch held across an episode boundary: a new takeover
                    self._intervened = True
                    start = MODE_RAC if self.protocol == "rac" else MODE_RULE2ONLY
                    self._phase = InterventionPhase(start, self.state.stage)
                if self.mode == "interactive" and self._phase is not None:
                    if self.input.mark_recovery_done:
                        self.input.mark_recovery_done = False
                        self._manual_marks.append(self.state.steps)
                    label = self._phase.current_label(self.state, self.grid, self.env_cfg)
                    phase_name = label
                act = self._human_action()
                obs = observe(self.state, self.env_cfg)
                src = SRC_HUMAN
                record_label = label if label in (LABEL_RECOVERY, LABEL_CORRECTION) else LABEL_CORRECTION
                self.state = step(self.state, act, self.env_cfg)
                if self.mode == "interactive":
                    self._frames.append(
                        Frame(t=len(self._frames), obs=obs, act=act, src=src,
                              label=record_label, event=self.state.last_event)
                    )
                    self._phase.note_frame(record_label)
                    if self._phase.complete(self.state) and self.protocol in ("rac", "rule2only"):
                        self._commit_episode()
                        return self._state_message(phase_name)
                    if self._phase.complete(self.state) and self.protocol == "hgdagger":
                        self._phase = InterventionPhase(MODE_RULE2ONLY, self.state.stage)
            elif intervention_pending and self.protocol in ("rac", "rule2only"):
                # Rule 2 integrity: once a takeover began, the policy never
                # resumes; the sim waits for the operator to re-engage.
                pass
            else:
                act = self._policy_action()
                obs = observe(self.state, self.env_cfg)
                self.state = step(self.state, act, self.env_cfg)
                if self.mode == "interactive":
                    self._frames.append(
                        Frame(t=len(self._frames), obs=obs, act=act, src=SRC_POLICY,
                              label=LABEL_POLICY, event=self.state.last_event)
                    )
        msg = self._state_message(phase_name)
        if self.state.status != STATUS_RUNNING:
            self._commit_episode()
        return msg

    def _replay_tick(self) -> dict:
        if not self.replay_episodes:
            return self._state_message(PHASE_AUTO)
        ep = self.replay_episodes[self.episode_index % len(self.replay_episodes)]
        if self._replay_pos >= len(ep.frames):
            self.episode_index += 1
            self._replay_pos = 0
            ep = self.replay_episodes[self.episode_index % len(self.replay_episodes)]
        fr = ep.frames[self._replay_pos]
        self._replay_pos += 1
        m = self.env_cfg.num_stages
        onehot = fr.obs[2 : 2 + m]
        stage = int(np.argmax(onehot)) if float(onehot.sum()) > 0.5 else m
        phase = fr.label if fr.label in (LABEL_RECOVERY, LABEL_CORRECTION) else PHASE_AUTO
        return {
            "type": "state",
            "t": int(fr.t),
            "pos": [float(fr.obs[0]), float(fr.obs[1])],
            "stage": stage,
            "status": "running",
            "event": fr.event,
            "phase": phase,
            "episode": int(ep.id),
        }

    def _state_message(self, phase_name: str) -> dict:
        return {
            "type": "state",
            "t": int(self.state.steps),
            "pos": [float(self.state.pos[0]), float(self.state.pos[1])],
            "stage": int(self.state.stage),
            "status": self.state.status,
            "event": self.state.last_event,
            "phase": phase_name,
            "episode": int(self.episode_index),
        }

    # ---------------- client fan-out ----------------

    def register_client(self) -> tuple[int, asyncio.Queue]:
        cid = self._next_client
        self._next_client += 1
        q: asyncio.Queue = asyncio.Queue(maxsize=BROADCAST_QUEUE_DEPTH)
        self.clients[cid] = q
        return cid, q

    def drop_client(self, cid: int) -> None:
        self.clients.pop(cid, None)
        if self.controlling_client == cid:
            self._release_clutch()
            self.controlling_client = None

    def broadcast(self, msg: dict) -> None:
        for q in self.clients.values():
            if q.full():
                try:
                    q.get_nowait()  # drop-oldest
                except asyncio.QueueEmpty:
                    pass
            q.put_nowait(msg)


def bootstrap_session(args) -> ServeSession:
    """Build a session from a run directory, or self-contained defaults."""
    env_cfg = EnvConfig()
    params = None
    grid = None
    replay = None
    protocol = args.protocol
    if args.run:
        cfg = load_run(args.run)
        env_cfg = cfg.env_cfg
        rounds = sorted(
            int(d.split("_")[1]) for d in os.listdir(args.run) if d.startswith("round_")
        )
        last = rounds[-1]
        params = load_policy(os.path.join(args.run, f"round_{last}", "policy.bin"))
        ds0 = read_dataset(os.path.join(args.run, "round_0", "dataset.jsonl"))
        grid = build_grid(ds0, env_cfg)
        if args.mode == "replay":
            full = read_dataset(os.path.join(args.run, f"round_{last}", "dataset.jsonl"))
            replay = [ep for ep in full.episodes if ep.frames]
    if params is None:
        params = init_params(rng.derive_seed(args.seed, rng.PARAM_INIT),
                             NetDims(obs_dim=env_cfg.obs_dim()))
    if grid is None:
        boot = Dataset(env_cfg)
        ocfg = OracleConfig()
        for i in range(BOOTSTRAP_DEMOS):
            ep = collect_demo_episode(
                env_cfg, ocfg, rng.derive_seed(args.seed, i, rng.GRID_BOOTSTRAP),
                boot.next_episode_id(), 0, "rac",
            )
            append(boot, ep)
        grid = build_grid(boot, env_cfg)
    out_path = None
    if args.mode == "interactive":
        base = args.run if args.run else "."
        out_path = os.path.join(base, "interactive", "dataset.jsonl")
    return ServeSession(
        mode=args.mode,
        env_cfg=env_cfg,
        params=params,
        grid=grid,
        protocol=protocol,
        seed=args.seed,
        out_path=out_path,
        replay_episodes=replay,
    )


def create_app(session: ServeSession, run_dir=None):
    from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse

    app = FastAPI(title="recoil operator console")
    validator = _load_schema()

    @app.on_event("startup")
    async def _start():
        app.state.tick_task = asyncio.create_task(_tick_loop())

    @app.on_event("shutdown")
    async def _stop():
        app.state.tick_task.cancel()
        if session.writer is not None:
            session.writer.close()

    async def _tick_loop():
        period = 1.0 / TICK_HZ
        nxt = time.monotonic()
        while True:
            msg = session.serve_tick()
            session.broadcast(msg)
            nxt += period
            delay = nxt - time.monotonic()
            if delay < 0:
                nxt = time.monotonic()
                delay = 0.0
            await asyncio.sleep(delay)

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        cid, queue = session.register_client()
        await ws.send_text(json.dumps(session.config_message()))

        async def pump_out():
            while True:
                msg = await queue.get()
                await ws.send_text(json.dumps(msg))

        out_task = asyncio.create_task(pump_out())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await ws.send_text(json.dumps({"type": "error", "msg": "bad JSON"}))
                    continue
                errors = sorted(validator.iter_errors(msg), key=str)
                if errors:
                    await ws.send_text(
                        json.dumps({"type": "error", "msg": f"invalid message: {errors[0].message}"})
                    )
                    continue
                reply = session.handle_message(cid, msg)
                if reply is not None:
                    await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass
        finally:
            out_task.cancel()
            session.drop_client(cid)

    @app.get("/config")
    async def get_config():
        return JSONResponse(session.config_message())

    @app.get("/csv/{name}")
    async def get_csv(name: str):
        base = run_dir or "."
        path = os.path.join(base, "analysis", f"{name}.csv")
        if not os.path.exists(path):
            return PlainTextResponse("not found", status_code=404)
        return FileResponse(path, media_type="text/csv")

    @app.get("/report/{round_k}")
    async def get_report(round_k: int):
        base = run_dir or "."
        path = os.path.join(base, f"round_{round_k}", "eval.json")
        if not os.path.exists(path):
            return PlainTextResponse("not found", status_code=404)
        with open(path) as f:
            doc = json.load(f)
        return JSONResponse({"type": "report", **doc})

    frontend = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", "frontend", "dist"))
    if os.path.isdir(frontend):
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=frontend, html=True), name="ui")
    return app


def serve_main(args) -> int:
    import uvicorn

    session = bootstrap_session(args)
    app = create_app(session, run_dir=args.run)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0
