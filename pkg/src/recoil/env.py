"""Seeded planar chain-of-corridors task.

The end effector starts in a broad disc and must traverse a chain of narrow
corridors, finishing each stage by entering its goal disc *slowly*. Entering
fast is a fumble: the effector is thrown back out to an annulus around the
goal, and a fumble attempted from outside the corridor is irrecoverable with
probability hazard_prob. Out-of-corridor motion also sees amplified noise.

This geometry gives the task the structure that matters for the experiments:
a broad set of valid initial states, narrow goals, recoverable mistakes near
the corridor, and genuinely risky shortcuts through out-of-distribution
space. Trajectories are a pure function of (config, seed, action sequence);
per-step noise is drawn from a stream keyed by (seed, step), so replay is
exact regardless of who produced the actions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng

STATUS_RUNNING = "running"
STATUS_SUCCESS = "success"
STATUS_FAILED = "failed"

EV_NONE = "none"
EV_BOUNCE = "bounce"
EV_SUBTASK = "subtask"
EV_HAZARD = "hazard_fail"
EV_OOB = "oob_fail"
EV_TIMEOUT = "timeout"

EVENTS = (EV_NONE, EV_BOUNCE, EV_SUBTASK, EV_HAZARD, EV_OOB, EV_TIMEOUT)

# Consecutive boundary clamps before the rollout is declared stuck.
OOB_LIMIT = 5
# Decay constant (steps) for the bounce-recency observation feature.
BOUNCE_RECENCY_TAU = 20.0

# Canonical corridor chain; stages beyond the default four extend the snake.
# Every corridor is long enough that a demonstration naturally settles inside
# it before reaching the goal disc.
_CHAIN = (
    ((0.20, 0.20), (0.20, 0.80)),
    ((0.25, 0.80), (0.55, 0.80)),
    ((0.60, 0.80), (0.85, 0.80)),
    ((0.85, 0.75), (0.85, 0.20)),
    ((0.80, 0.20), (0.45, 0.20)),
    ((0.40, 0.20), (0.40, 0.55)),
)


class InvalidConfig(ValueError):
    """EnvConfig violates one of its invariants."""


class SteppedTerminal(RuntimeError):
    """step() was called on a terminal state."""


@dataclass(frozen=True)
class EnvConfig:
    num_stages: int = 4
    entries: tuple[tuple[float, float], ...] = tuple(seg[0] for seg in _CHAIN[:4])
    goals: tuple[tuple[float, float], ...] = tuple(seg[1] for seg in _CHAIN[:4])
    corridor_halfwidth: float = 0.05
    goal_radius: float = 0.03
    insert_speed: float = 0.03
    action_clip: float = 0.05
    noise_in: float = 0.005
    noise_out: float = 0.015
    bounce_annulus: tuple[float, float] = (0.08, 0.15)
    hazard_prob: float = 0.18
    # A goal entry is hazardous unless the effector spent this many
    # consecutive steps inside the stage's corridor first: insertions must be
    # approached along the corridor, or they risk being irrecoverable.
    hazard_settle: int = 4
    max_bounces: int = 8
    horizon: int = 600
    start_center: tuple[float, float] = (0.1, 0.1)
    start_radius: float = 0.15

    def __post_init__(self):
        self.validate()

    @staticmethod
    def default(num_stages: int = 4, **overrides) -> "EnvConfig":
        if not 1 <= num_stages <= len(_CHAIN):
            raise InvalidConfig(f"default chain supports 1..{len(_CHAIN)} stages")
        return EnvConfig(
            num_stages=num_stages,
            entries=tuple(seg[0] for seg in _CHAIN[:num_stages]),
            goals=tuple(seg[1] for seg in _CHAIN[:num_stages]),
            **overrides,
        )

    def validate(self) -> None:
        m = self.num_stages
        if m < 1 or len(self.entries) != m or len(self.goals) != m:
            raise InvalidConfig("entries/goals must each have num_stages points")
        if not 0.0 < self.goal_radius < self.corridor_halfwidth:
            raise InvalidConfig("require 0 < goal_radius < corridor_halfwidth")
        if not self.noise_in < self.noise_out:
            raise InvalidConfig("require noise_in < noise_out")
        lo, hi = self.bounce_annulus
        if not 0.0 < lo < hi:
            raise InvalidConfig("bounce annulus must satisfy 0 < lo < hi")
        if self.insert_speed <= 0 or self.action_clip <= 0 or self.horizon < 1:
            raise InvalidConfig("speeds and horizon must be positive")
        w = self.corridor_halfwidth
        pts = list(self.entries) + list(self.goals)
        for x, y in pts:
            if not (w <= x <= 1 - w and w <= y <= 1 - w):
                raise InvalidConfig(f"corridor point ({x}, {y}) too close to boundary")
        for i in range(m - 1):
            gap = math.dist(self.entries[i + 1], self.goals[i])
            if gap > 0.1 + 1e-12:
                raise InvalidConfig(f"entry {i + 1} is {gap:.3f} from goal {i} (max 0.1)")

    def entry(self, stage: int) -> np.ndarray:
        return np.asarray(self.entries[stage], dtype=np.float64)

    def goal(self, stage: int) -> np.ndarray:
        return np.asarray(self.goals[stage], dtype=np.float64)

    def obs_dim(self) -> int:
        return 2 + self.num_stages + 3

    def to_json(self) -> dict:
        return {
            "num_stages": self.num_stages,
            "entries": [list(p) for p in self.entries],
            "goals": [list(p) for p in self.goals],
            "corridor_halfwidth": self.corridor_halfwidth,
            "goal_radius": self.goal_radius,
            "insert_speed": self.insert_speed,
            "action_clip": self.action_clip,
            "noise_in": self.noise_in,
            "noise_out": self.noise_out,
            "bounce_annulus": list(self.bounce_annulus),
            "hazard_prob": self.hazard_prob,
            "hazard_settle": self.hazard_settle,
            "max_bounces": self.max_bounces,
            "horizon": self.horizon,
            "start_center": list(self.start_center),
            "start_radius": self.start_radius,
        }

    @staticmethod
    def from_json(doc: dict) -> "EnvConfig":
        known = {
            "num_stages": int,
            "corridor_halfwidth": float,
            "goal_radius": float,
            "insert_speed": float,
            "action_clip": float,
            "noise_in": float,
            "noise_out": float,
            "hazard_prob": float,
            "hazard_settle": int,
            "max_bounces": int,
            "horizon": int,
            "start_radius": float,
        }
        kwargs = {}
        for name, cast in known.items():
            if name in doc:
                kwargs[name] = cast(doc[name])
        if "entries" in doc:
            kwargs["entries"] = tuple((float(x), float(y)) for x, y in doc["entries"])
        if "goals" in doc:
            kwargs["goals"] = tuple((float(x), float(y)) for x, y in doc["goals"])
        if "bounce_annulus" in doc:
            lo, hi = doc["bounce_annulus"]
            kwargs["bounce_annulus"] = (float(lo), float(hi))
        if "start_center" in doc:
            x, y = doc["start_center"]
            kwargs["start_center"] = (float(x), float(y))
        return EnvConfig(**kwargs)


def load_env_config(path) -> EnvConfig:
    with open(path, "r", encoding="utf-8") as f:
        return EnvConfig.from_json(json.load(f))


@dataclass(frozen=True, eq=False)
class EnvState:
    pos: np.ndarray
    stage: int
    bounces_this_stage: int
    steps: int
    status: str
    last_event: str
    seed: int
    clamped_streak: int = 0
    last_bounce_step: int = -1
    # consecutive steps spent inside the current stage's corridor
    corridor_streak: int = 0

    def __post_init__(self):
        p = np.asarray(self.pos, dtype=np.float64).reshape(2).copy()
        p.flags.writeable = False
        object.__setattr__(self, "pos", p)


def segment_distance(pos: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Distance from a point to the segment a-b."""
    pos = np.asarray(pos, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.linalg.norm(pos - a))
    t = float(np.clip((pos - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(pos - (a + t * ab)))


def in_corridor(cfg: EnvConfig, pos: np.ndarray, stage: int) -> bool:
    """True iff pos is within corridor_halfwidth of the stage's segment (inclusive)."""
    if not 0 <= stage < cfg.num_stages:
        return False
    d = segment_distance(pos, cfg.entry(stage), cfg.goal(stage))
    return d <= cfg.corridor_halfwidth


def clip_action(action: np.ndarray, a_max: float) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(2)
    n = float(np.linalg.norm(a))
    if n > a_max and n > 0.0:
        a = a * (a_max / n)
    return a


def reset(cfg: EnvConfig, seed: int) -> EnvState:
    """Fresh state with pos uniform over the start disc (within the workspace)."""
    cfg.validate()
    g = rng.stream(seed, rng.ENV_RESET)
    cx, cy = cfg.start_center
    while True:
        r = cfg.start_radius * math.sqrt(g.random())
        th = 2.0 * math.pi * g.random()
        pos = np.array([cx + r * math.cos(th), cy + r * math.sin(th)])
        if 0.0 <= pos[0] <= 1.0 and 0.0 <= pos[1] <= 1.0:
            break
    return EnvState(
        pos=pos,
        stage=0,
        bounces_this_stage=0,
        steps=0,
        status=STATUS_RUNNING,
        last_event=EV_NONE,
        seed=seed,
    )


def step(state: EnvState, action: np.ndarray, cfg: EnvConfig) -> EnvState:
    """Advance one tick. Pure: the same (state, action, cfg) gives the same result."""
    if state.status != STATUS_RUNNING:
        raise SteppedTerminal(f"step() on terminal state (status={state.status})")

    a = clip_action(action, cfg.action_clip)
    a_norm = float(np.linalg.norm(a))

    g = rng.stream(state.seed, state.steps, rng.ENV_STEP)
    pre_inside = in_corridor(cfg, state.pos, state.stage)
    sigma = cfg.noise_in if pre_inside else cfg.noise_out
    eps = g.standard_normal(2) * sigma
    corridor_streak = state.corridor_streak + 1 if pre_inside else 0

    raw = state.pos + a + eps
    pos = np.clip(raw, 0.0, 1.0)
    was_clamped = bool(np.any(raw != pos))
    streak = state.clamped_streak + 1 if was_clamped else 0

    t = state.steps + 1
    stage = state.stage
    bounces = state.bounces_this_stage
    status = STATUS_RUNNING
    event = EV_NONE
    last_bounce = state.last_bounce_step

    goal = cfg.goal(stage)
    if float(np.linalg.norm(pos - goal)) <= cfg.goal_radius:
        # Entries without a settled corridor approach are hazardous,
        # whatever their speed: the part can break irrecoverably.
        unsettled = corridor_streak < cfg.hazard_settle
        if unsettled and g.random() < cfg.hazard_prob:
            status = STATUS_FAILED
            event = EV_HAZARD
        elif a_norm <= cfg.insert_speed + 1e-12:
            stage += 1
            bounces = 0
            corridor_streak = 0
            event = EV_SUBTASK
            if stage == cfg.num_stages:
                status = STATUS_SUCCESS
        else:
            # Fumble: thrown back out to the annulus around the goal.
            lo, hi = cfg.bounce_annulus
            while True:
                rr = math.sqrt(lo * lo + g.random() * (hi * hi - lo * lo))
                th = 2.0 * math.pi * g.random()
                cand = goal + rr * np.array([math.cos(th), math.sin(th)])
                if 0.0 <= cand[0] <= 1.0 and 0.0 <= cand[1] <= 1.0:
                    break
            pos = cand
            bounces += 1
            corridor_streak = 0
            event = EV_BOUNCE
            last_bounce = t
            if bounces > cfg.max_bounces:
                status = STATUS_FAILED

    if status == STATUS_RUNNING and streak >= OOB_LIMIT:
        status = STATUS_FAILED
        event = EV_OOB
    if status == STATUS_RUNNING and t >= cfg.horizon:
        status = STATUS_FAILED
        event = EV_TIMEOUT

    return replace(
        state,
        pos=pos,
        stage=stage,
        bounces_this_stage=bounces,
        steps=t,
        status=status,
        last_event=event,
        clamped_streak=streak,
        last_bounce_step=last_bounce,
        corridor_streak=corridor_streak,
    )


def observe(state: EnvState, cfg: EnvConfig) -> np.ndarray:
    """Observation vector: pos(2), stage one-hot(M), goal distance, corridor flag, bounce recency."""
    m = cfg.num_stages
    obs = np.zeros(2 + m + 3, dtype=np.float32)
    obs[0:2] = state.pos
    running = state.status == STATUS_RUNNING
    if running:
        obs[2 + state.stage] = 1.0
        obs[2 + m] = float(np.linalg.norm(state.pos - cfg.goal(state.stage)))
        obs[2 + m + 1] = 1.0 if in_corridor(cfg, state.pos, state.stage) else 0.0
    if state.last_bounce_step >= 0:
        dt = state.steps - state.last_bounce_step
        obs[2 + m + 2] = math.exp(-dt / BOUNCE_RECENCY_TAU)
    return obs
