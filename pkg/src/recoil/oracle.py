"""Scripted stand-in for the human teleoperator.

Three behaviors: full demonstrations, recovery (head back to the visited
region of the current stage), and correction (push the current sub-task to
completion from wherever the system is), plus the trigger deciding when a
human would take over. The visited region comes from a per-stage occupancy
grid built over round-0 demonstrations; it doubles as the in-distribution
oracle for labeling and as the UI heatmap overlay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .env import (
    EV_BOUNCE,
    STATUS_RUNNING,
    EnvConfig,
    EnvState,
    segment_distance,
    in_corridor,
)

MODE_RAC = "rac"
MODE_HGDAGGER = "hgdagger"
MODE_RULE2ONLY = "rule2only"
MODE_NONE = "none"
MODES = (MODE_RAC, MODE_HGDAGGER, MODE_RULE2ONLY, MODE_NONE)

# Approach speed profile: creep at insert_speed inside this many goal radii,
# ramp linearly outside. The profile is a single-valued function of distance
# (no phase structure), so recorded action windows stay predictable from the
# observation, and a fast step always lands outside the goal disc.
_SLOW_ZONE_RADII = 2.5
# A stalled rollout is one whose best goal distance has not improved by at
# least this much within the stall window.
PROGRESS_EPS = 1e-3
# Recovery drives back to the visited region around the sub-task's entry
# (the operator returns to where the stage starts and retries from there).
# Slightly tighter than the analysis entry zone so that imitated recoveries
# land inside it despite execution spread.
ENTRY_REGION_RADIUS = 0.04
# Floor on the recovery speed: creeping proportionally into a target cell
# under amplified out-of-corridor noise would pad recoveries with dithering.
_RECOVERY_SPEED_FLOOR = 0.6


class TerminalState(RuntimeError):
    """An oracle action was requested for a terminal state."""


class EmptyGrid(RuntimeError):
    """No visited cell of the current stage meets the threshold."""


@dataclass(frozen=True)
class OracleConfig:
    gain: float = 0.8
    demo_jitter: float = 0.02
    trigger_dist: float = 0.08
    stall_window: int = 40
    mode: str = MODE_RAC

    def validate(self, env_cfg: EnvConfig) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown oracle mode {self.mode!r}")
        if not self.trigger_dist > env_cfg.corridor_halfwidth:
            raise ValueError("trigger_dist must exceed the corridor halfwidth")

    def to_json(self) -> dict:
        return {
            "gain": self.gain,
            "demo_jitter": self.demo_jitter,
            "trigger_dist": self.trigger_dist,
            "stall_window": self.stall_window,
            "mode": self.mode,
        }

    @staticmethod
    def from_json(doc: dict) -> "OracleConfig":
        return OracleConfig(
            gain=float(doc.get("gain", 0.8)),
            demo_jitter=float(doc.get("demo_jitter", 0.02)),
            trigger_dist=float(doc.get("trigger_dist", 0.08)),
            stall_window=int(doc.get("stall_window", 40)),
            mode=str(doc.get("mode", MODE_RAC)),
        )


@dataclass(eq=False)
class VisitationGrid:
    """Per-stage occupancy counts of end-effector positions over the workspace."""

    resolution: int
    threshold: int
    counts: np.ndarray  # int64 [num_stages, resolution, resolution]

    def cell_of(self, pos: np.ndarray) -> tuple[int, int]:
        """(row, col) = (y index, x index) of the cell containing pos."""
        r = self.resolution
        col = min(int(math.floor(float(pos[0]) * r)), r - 1)
        row = min(int(math.floor(float(pos[1]) * r)), r - 1)
        return max(row, 0), max(col, 0)

    def cell_center(self, row: int, col: int) -> np.ndarray:
        r = self.resolution
        return np.array([(col + 0.5) / r, (row + 0.5) / r])

    def to_json(self) -> dict:
        return {
            "resolution": self.resolution,
            "threshold": self.threshold,
            "counts": self.counts.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "VisitationGrid":
        return VisitationGrid(
            resolution=int(doc["resolution"]),
            threshold=int(doc["threshold"]),
            counts=np.asarray(doc["counts"], dtype=np.int64),
        )


def build_grid(dataset, env_cfg: EnvConfig, resolution: int = 64, threshold: int = 3) -> VisitationGrid:
    """Count round-0 demonstration positions per (stage, cell).

    Positions and stages are read off the stored observations, so the grid is
    reproducible from the dataset file alone and invariant to frame order.
    """
    from .data import EmptyDataset  # local import to avoid a cycle

    m = env_cfg.num_stages
    counts = np.zeros((m, resolution, resolution), dtype=np.int64)
    grid = VisitationGrid(resolution=resolution, threshold=threshold, counts=counts)
    total = 0
    for ep in dataset.episodes:
        if ep.round != 0:
            continue
        for fr in ep.frames:
            onehot = fr.obs[2 : 2 + m]
            if float(onehot.sum()) < 0.5:
                continue  # terminal frame: no stage
            stage = int(np.argmax(onehot))
            row, col = grid.cell_of(fr.obs[0:2])
            counts[stage, row, col] += 1
            total += 1
    if total == 0:
        raise EmptyDataset("no round-0 frames to build the visitation grid from")
    return grid


def _eligible_mask(grid: VisitationGrid, stage: int, env_cfg: EnvConfig) -> np.ndarray:
    """Visited cells that count as the stage's recovery region.

    The region is the visited neighborhood of the stage entry: recovery means
    going back to where the sub-task starts and retrying from there, never to
    the goal mouth. When no visited cell sits inside the entry disc (sparse
    grids), the visited cells nearest the entry stand in, still excluding the
    goal neighborhood.
    """
    res = grid.resolution
    dense = grid.counts[stage] >= grid.threshold
    ys = (np.arange(res) + 0.5) / res
    xs = (np.arange(res) + 0.5) / res
    gx, gy = env_cfg.goal(stage)
    goal_d2 = (xs[None, :] - gx) ** 2 + (ys[:, None] - gy) ** 2
    goal_margin = env_cfg.goal_radius + env_cfg.corridor_halfwidth + math.sqrt(2.0) / res
    dense &= goal_d2 >= goal_margin * goal_margin
    if not dense.any():
        return dense
    ex, ey = env_cfg.entry(stage)
    entry_d2 = (xs[None, :] - ex) ** 2 + (ys[:, None] - ey) ** 2
    near = dense & (entry_d2 <= ENTRY_REGION_RADIUS * ENTRY_REGION_RADIUS)
    if near.any():
        return near
    best = float(entry_d2[dense].min())
    slack = (2.0 / res) ** 2
    return dense & (entry_d2 <= best + slack)


def recovery_done(state: EnvState, grid: VisitationGrid, env_cfg: EnvConfig) -> bool:
    """True iff pos sits in a visited cell of the stage's recovery region."""
    mask = _eligible_mask(grid, state.stage, env_cfg)
    row, col = grid.cell_of(state.pos)
    return bool(mask[row, col])


def _approach_speed(dist: float, cfg: EnvConfig, gain: float, slow: bool) -> float:
    """Commanded speed toward the target at this distance.

    The slow profile creeps at <= insert_speed inside the slow zone and ramps
    linearly outside it; a faster-than-insert step then always lands at least
    one slow-zone gap outside the goal disc, so fumbles only come from noise
    tails.
    """
    if not slow:
        return min(gain * dist, cfg.action_clip)
    zone = _SLOW_ZONE_RADII * cfg.goal_radius
    if dist <= zone:
        return min(gain * dist, cfg.insert_speed)
    return min(cfg.action_clip, cfg.insert_speed + gain * (dist - zone))


def _shaped_approach(pos: np.ndarray, target: np.ndarray, cfg: EnvConfig, gain: float, slow: bool) -> np.ndarray:
    """Proportional step toward target; insertion discipline when slow=True."""
    d = target - pos
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        return np.zeros(2)
    return d * (_approach_speed(dist, cfg, gain, slow) / dist)


def _cap_for(pos: np.ndarray, target: np.ndarray, cfg: EnvConfig, slow: bool) -> float:
    return _approach_speed(float(np.linalg.norm(target - pos)), cfg, gain=1.0, slow=slow)


def demo_action(state: EnvState, ocfg: OracleConfig, env_cfg: EnvConfig, gen: np.random.Generator | None = None) -> np.ndarray:
    """Full-demonstration controller: enter the corridor, then insert slowly.

    Jitter is scaled down with the command so the heading stays within ~27
    degrees of nominal, and the post-jitter norm still respects the insertion
    caps.
    """
    if state.status != STATUS_RUNNING:
        raise TerminalState("demo_action on terminal state")
    inside = in_corridor(env_cfg, state.pos, state.stage)
    target = env_cfg.goal(state.stage) if inside else env_cfg.entry(state.stage)
    a = _shaped_approach(state.pos, target, env_cfg, ocfg.gain, slow=inside)
    if ocfg.demo_jitter > 0.0 and gen is not None:
        nominal = float(np.linalg.norm(a))
        r = min(ocfg.demo_jitter, 0.5 * nominal) * math.sqrt(gen.random())
        th = 2.0 * math.pi * gen.random()
        a = a + r * np.array([math.cos(th), math.sin(th)])
        cap = _cap_for(state.pos, target, env_cfg, slow=inside)
        n = float(np.linalg.norm(a))
        if n > cap and n > 0.0:
            a = a * (cap / n)
    return a


def correction_action(state: EnvState, ocfg: OracleConfig, env_cfg: EnvConfig) -> np.ndarray:
    """Jitter-free drive straight at the current goal, insertion-disciplined."""
    if state.status != STATUS_RUNNING:
        raise TerminalState("correction_action on terminal state")
    return _shaped_approach(state.pos, env_cfg.goal(state.stage), env_cfg, ocfg.gain, slow=True)


def recovery_action(state: EnvState, grid: VisitationGrid, ocfg: OracleConfig, env_cfg: EnvConfig) -> np.ndarray:
    """Head back to the stage's recovery region (visited cells at the entry).

    Targets the nearest region cell (ties on distance break row-major) and
    returns the zero action once inside one (recovery complete). The speed is
    floored so the last stretch does not dither against the amplified
    out-of-corridor noise.
    """
    mask = _eligible_mask(grid, state.stage, env_cfg)
    if not mask.any():
        raise EmptyGrid(f"no visited cell meets threshold for stage {state.stage}")
    row, col = grid.cell_of(state.pos)
    if mask[row, col]:
        return np.zeros(2)
    rows, cols = np.nonzero(mask)
    res = grid.resolution
    centers = np.stack([(cols + 0.5) / res, (rows + 0.5) / res], axis=1)
    d2 = ((centers - state.pos[None, :]) ** 2).sum(axis=1)
    best = int(np.argmin(d2))  # first minimum in row-major order
    target = centers[best]
    d = target - state.pos
    dist = float(np.linalg.norm(d))
    floor = _RECOVERY_SPEED_FLOOR * env_cfg.action_clip
    mag = min(max(ocfg.gain * dist, floor), env_cfg.action_clip)
    return d * (mag / dist)


class RolloutMonitor:
    """Tracks per-rollout signals the intervention trigger needs.

    Feed every post-step state via update(); the trigger consumes the pending
    bounce flag and the stall clock. after_intervention() restarts the clocks
    once control returns to the policy.
    """

    def __init__(self, state: EnvState, env_cfg: EnvConfig):
        self.env_cfg = env_cfg
        self.stage = state.stage
        self.best: float | None = None
        self.last_progress_step = state.steps
        self.bounce_pending = False
        self._observe_distance(state)

    def _observe_distance(self, state: EnvState) -> None:
        if state.status != STATUS_RUNNING:
            return
        d = float(np.linalg.norm(state.pos - self.env_cfg.goal(state.stage)))
        if self.best is None or d < self.best - PROGRESS_EPS:
            self.best = d
            self.last_progress_step = state.steps

    def update(self, state: EnvState) -> None:
        if state.stage != self.stage:
            self.stage = state.stage
            self.best = None
            self.last_progress_step = state.steps
        if state.last_event == EV_BOUNCE:
            self.bounce_pending = True
        self._observe_distance(state)

    def stalled(self, state: EnvState, window: int) -> bool:
        return state.steps - self.last_progress_step >= window

    def after_intervention(self, state: EnvState) -> None:
        self.stage = state.stage
        self.best = None
        self.last_progress_step = state.steps
        self.bounce_pending = False
        self._observe_distance(state)


def deviation_distance(state: EnvState, env_cfg: EnvConfig) -> float:
    """Distance from the in-distribution region: corridor tube, plus the
    start disc while on the first stage (the entry leg is always familiar)."""
    d = segment_distance(state.pos, env_cfg.entry(state.stage), env_cfg.goal(state.stage))
    if state.stage == 0:
        start_d = float(np.linalg.norm(state.pos - np.asarray(env_cfg.start_center)))
        d = min(d, max(0.0, start_d - env_cfg.start_radius))
    return d


def intervention_trigger(state: EnvState, monitor: RolloutMonitor, ocfg: OracleConfig, env_cfg: EnvConfig) -> bool:
    """Would a watching operator take over in this state?"""
    if state.status != STATUS_RUNNING:
        return False
    if monitor.bounce_pending:
        return True
    if deviation_distance(state, env_cfg) > ocfg.trigger_dist:
        return True
    return monitor.stalled(state, ocfg.stall_window)
