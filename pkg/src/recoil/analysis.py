"""Evaluation rollouts and the quantitative analyses.

Seeded autonomous rollouts per policy, scored by binary sub-task completion
(no partial credit within a sub-task, rollouts end at the first irrecoverable
failure), plus the derived studies: Wilson intervals on success, progress
profiles, recovery-event counting with its correlation against success,
rollout-length distributions and data-composition reports. Everything
exports to CSV with stable columns and 6-significant-digit floats.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .data import (
    Dataset,
    Frame,
    LABEL_CORRECTION,
    LABEL_DEMO,
    LABEL_POLICY,
    LABEL_RECOVERY,
    SRC_POLICY,
)
from .env import EV_BOUNCE, EnvConfig, STATUS_RUNNING, STATUS_SUCCESS, clip_action, observe, reset, step
from .oracle import OracleConfig, demo_action
from .policy import PolicyParams, executed_per_plan, sample_chunk

# Recovery-event zones: approach disc around the goal, entry disc around the
# corridor entry. Sized so straight demonstrations register zero events.
APPROACH_ZONE_RADIUS = 0.1
ENTRY_ZONE_RADIUS = 0.05


class DomainError(ValueError):
    """Arguments outside the statistic's domain."""


class DegenerateSeries(ValueError):
    """Correlation requested on a constant series."""


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """95% (by default) Wilson score interval for a binomial proportion.

    Endpoints are algebraically exact at k=0 and k=n; they are pinned so
    floating point cannot blur them.
    """
    if n < 1:
        raise DomainError("need at least one trial")
    if not 0 <= k <= n:
        raise DomainError(f"successes {k} outside [0, {n}]")
    p = k / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2.0 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, center - half)
    hi = 1.0 if k == n else min(1.0, center + half)
    return lo, hi


def _frame_stage(frame: Frame, num_stages: int) -> int | None:
    onehot = frame.obs[2 : 2 + num_stages]
    if float(onehot.sum()) < 0.5:
        return None
    return int(np.argmax(onehot))


def count_recovery_events(frames, env_cfg: EnvConfig) -> int:
    """Recovery maneuvers in an autonomous rollout, from ground-truth zones.

    One event per approach-then-return: while a stage is incomplete, the
    trajectory (a) enters the goal-approach zone or bounces, and later (b)
    re-enters the entry zone of that stage. Matching is greedy left to right
    and non-overlapping.
    """
    count = 0
    cur_stage: int | None = None
    pending = False
    for fr in frames:
        s = _frame_stage(fr, env_cfg.num_stages)
        if s is None:
            continue
        if s != cur_stage:
            cur_stage = s
            pending = False
        pos = np.asarray(fr.obs[0:2], dtype=np.float64)
        if pending and float(np.linalg.norm(pos - env_cfg.entry(s))) <= ENTRY_ZONE_RADIUS:
            count += 1
            pending = False
        if not pending and (
            fr.event == EV_BOUNCE
            or float(np.linalg.norm(pos - env_cfg.goal(s))) <= APPROACH_ZONE_RADIUS
        ):
            pending = True
    return count


@dataclass
class EvalReport:
    n_trials: int
    successes: int
    progress: list[int]
    success_rate: float
    wilson_lo: float
    wilson_hi: float
    progress_mean: float
    progress_lo: float
    progress_hi: float
    lengths: list[int]
    recovery_events: list[int]
    policy_id: str = ""
    round: int = -1

    def to_json(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "successes": self.successes,
            "progress": self.progress,
            "success_rate": self.success_rate,
            "wilson_lo": self.wilson_lo,
            "wilson_hi": self.wilson_hi,
            "progress_mean": self.progress_mean,
            "progress_lo": self.progress_lo,
            "progress_hi": self.progress_hi,
            "lengths": self.lengths,
            "recovery_events": self.recovery_events,
            "policy_id": self.policy_id,
            "round": self.round,
        }

    @staticmethod
    def from_json(doc: dict) -> "EvalReport":
        return EvalReport(
            n_trials=int(doc["n_trials"]),
            successes=int(doc["successes"]),
            progress=[int(x) for x in doc["progress"]],
            success_rate=float(doc["success_rate"]),
            wilson_lo=float(doc["wilson_lo"]),
            wilson_hi=float(doc["wilson_hi"]),
            progress_mean=float(doc["progress_mean"]),
            progress_lo=float(doc["progress_lo"]),
            progress_hi=float(doc["progress_hi"]),
            lengths=[int(x) for x in doc["lengths"]],
            recovery_events=[int(x) for x in doc["recovery_events"]],
            policy_id=str(doc.get("policy_id", "")),
            round=int(doc.get("round", -1)),
        )


class ScriptedDemoPolicy:
    """Oracle demonstrator exposed through the executor's planning interface
    (horizon 1: replan every step, as the scripted controller is reactive)."""

    def __init__(self, ocfg: OracleConfig, jitter: bool = True):
        self.ocfg = ocfg
        self.jitter = jitter
        self.horizon = 1

    def plan(self, state, env_cfg: EnvConfig, gen: np.random.Generator):
        act = demo_action(state, self.ocfg, env_cfg, gen if self.jitter else None)
        return [act]


class FlowPolicy:
    """Receding-horizon planner around trained parameters."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self.horizon = params.dims.horizon

    def plan(self, state, env_cfg: EnvConfig, gen: np.random.Generator):
        chunk = sample_chunk(self.params, observe(state, env_cfg), gen)
        return [row for row in chunk[: executed_per_plan(self.horizon)]]


def run_eval_rollout(policy, env_cfg: EnvConfig, seed: int):
    """One autonomous seeded rollout; returns per-step frames and final state."""
    state = reset(env_cfg, seed)
    frames: list[Frame] = []
    replan = 0
    while state.status == STATUS_RUNNING:
        gen = rng.stream(seed, replan, rng.CHUNK_NOISE)
        actions = policy.plan(state, env_cfg, gen)
        replan += 1
        for row in actions:
            act = clip_action(row, env_cfg.action_clip)
            obs = observe(state, env_cfg)
            state = step(state, act, env_cfg)
            frames.append(
                Frame(
                    t=len(frames),
                    obs=obs,
                    act=act,
                    src=SRC_POLICY,
                    label=LABEL_POLICY,
                    event=state.last_event,
                )
            )
            if state.status != STATUS_RUNNING:
                break
    return frames, state


def evaluate(
    policy,
    env_cfg: EnvConfig,
    n_trials: int,
    seed_base: int,
    policy_id: str = "",
    round_k: int = -1,
) -> EvalReport:
    """n_trials seeded autonomous rollouts with the receding-horizon executor."""
    if n_trials < 1:
        raise DomainError("n_trials must be >= 1")
    if isinstance(policy, PolicyParams):
        policy = FlowPolicy(policy)
    progress: list[int] = []
    lengths: list[int] = []
    events: list[int] = []
    successes = 0
    for i in range(n_trials):
        frames, final = run_eval_rollout(policy, env_cfg, seed_base + i)
        progress.append(final.stage)
        lengths.append(final.steps)
        events.append(count_recovery_events(frames, env_cfg))
        if final.status == STATUS_SUCCESS:
            successes += 1
    rate = successes / n_trials
    lo, hi = wilson_interval(successes, n_trials)
    pmean = float(np.mean(progress))
    se = float(np.std(progress, ddof=1) / math.sqrt(n_trials)) if n_trials > 1 else 0.0
    return EvalReport(
        n_trials=n_trials,
        successes=successes,
        progress=progress,
        success_rate=rate,
        wilson_lo=lo,
        wilson_hi=hi,
        progress_mean=pmean,
        progress_lo=pmean - 1.96 * se,
        progress_hi=pmean + 1.96 * se,
        lengths=lengths,
        recovery_events=events,
        policy_id=policy_id,
        round=round_k,
    )


def mean_recovery_events(report: EvalReport, num_stages: int, successful_only: bool = True) -> float | None:
    """Per-trial mean recovery events; None when the subset is empty."""
    if successful_only:
        vals = [e for e, p in zip(report.recovery_events, report.progress) if p == num_stages]
    else:
        vals = list(report.recovery_events)
    if not vals:
        return None
    return float(np.mean(vals))


def testtime_correlation(
    reports: list[EvalReport], num_stages: int, successful_only: bool = True
) -> tuple[float, list[tuple[int, float, float]]]:
    """Pearson r between per-round mean recovery events and success rate.

    Rounds whose successful subset is empty contribute no pair. Raises
    DegenerateSeries when either series is constant (r undefined).
    """
    pairs: list[tuple[int, float, float]] = []
    for rep in reports:
        m = mean_recovery_events(rep, num_stages, successful_only)
        if m is None:
            continue
        pairs.append((rep.round, m, rep.success_rate))
    if len(pairs) < 3:
        raise DomainError(f"need >= 3 usable rounds, have {len(pairs)}")
    xs = np.array([p[1] for p in pairs])
    ys = np.array([p[2] for p in pairs])
    if float(xs.std()) == 0.0 or float(ys.std()) == 0.0:
        raise DegenerateSeries("constant series: correlation undefined")
    r = float(np.corrcoef(xs, ys)[0, 1])
    return r, pairs


@dataclass
class CompositionReport:
    """Stored-frame counts by label per round, with the recovery:correction ratio."""

    rounds: list[int]
    counts: dict[int, dict[str, int]]
    ratios: dict[int, float | None] = field(default_factory=dict)

    @staticmethod
    def labels() -> tuple[str, ...]:
        return (LABEL_DEMO, LABEL_RECOVERY, LABEL_CORRECTION, LABEL_POLICY)


def composition_report(dataset: Dataset) -> CompositionReport:
    rounds = dataset.rounds()
    counts = {k: dataset.frames_by_label(k) for k in rounds}
    ratios: dict[int, float | None] = {}
    for k in rounds:
        rec = counts[k][LABEL_RECOVERY]
        cor = counts[k][LABEL_CORRECTION]
        ratios[k] = (rec / cor) if cor > 0 else None
    return CompositionReport(rounds=rounds, counts=counts, ratios=ratios)


def progress_profile(reports: list[EvalReport], num_stages: int) -> dict[int, np.ndarray]:
    """Normalized per-round histograms over progress values 0..M."""
    if not reports:
        raise DomainError("no reports")
    out: dict[int, np.ndarray] = {}
    for rep in reports:
        hist = np.zeros(num_stages + 1, dtype=np.float64)
        for p in rep.progress:
            hist[p] += 1.0
        out[rep.round] = hist / hist.sum()
    return out


def quantile_lower(values, q: float) -> float:
    """Quantile with the lower-interpolation convention."""
    arr = np.sort(np.asarray(values))
    if arr.size == 0:
        raise DomainError("quantile of empty data")
    idx = int(math.floor(q * (arr.size - 1)))
    return float(arr[idx])


# ---------------------------------------------------------------------------
# CSV export: stable column order, floats at 6 significant digits.
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else f"{x:.6g}"
    return "" if x is None else str(x)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")


def write_scaling_csv(path, rows: list[dict]) -> None:
    """rows: per (protocol, round) scaling points."""
    header = [
        "protocol",
        "round",
        "frames_charged_cum",
        "success_rate",
        "wilson_lo",
        "wilson_hi",
        "progress_mean",
    ]
    write_csv(
        path,
        header,
        [
            (
                r["protocol"],
                r["round"],
                r["frames_charged_cum"],
                float(r["success_rate"]),
                float(r["wilson_lo"]),
                float(r["wilson_hi"]),
                float(r["progress_mean"]),
            )
            for r in rows
        ],
    )


def write_composition_csv(path, report: CompositionReport) -> None:
    header = ["round", "demo", "recovery", "correction", "policy_stored", "recovery_correction_ratio"]
    rows = []
    for k in report.rounds:
        c = report.counts[k]
        rows.append(
            (
                k,
                c[LABEL_DEMO],
                c[LABEL_RECOVERY],
                c[LABEL_CORRECTION],
                c[LABEL_POLICY],
                report.ratios[k] if report.ratios[k] is not None else None,
            )
        )
    write_csv(path, header, rows)


def write_profile_csv(path, profiles: dict[int, np.ndarray]) -> None:
    header = ["round", "progress", "fraction"]
    rows = []
    for k in sorted(profiles):
        for p, frac in enumerate(profiles[k]):
            rows.append((k, p, float(frac)))
    write_csv(path, header, rows)


def write_testtime_csv(path, pairs: list[tuple[int, float, float]], r: float | None) -> None:
    header = ["round", "mean_recovery_events_successful", "success_rate", "pearson_r"]
    rows = [(k, float(m), float(s), float(r) if r is not None else None) for k, m, s in pairs]
    write_csv(path, header, rows)


def write_lengths_csv(path, reports: list[EvalReport], num_stages: int) -> None:
    header = ["round", "trial", "length", "progress", "success", "recovery_events"]
    rows = []
    for rep in reports:
        for i, (ln, p, ev) in enumerate(zip(rep.lengths, rep.progress, rep.recovery_events)):
            rows.append((rep.round, i, ln, p, int(p == num_stages), ev))
    write_csv(path, header, rows)


def save_report(report: EvalReport, path) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=1, sort_keys=True)


def load_report(path) -> EvalReport:
    with open(os.fspath(path), "r", encoding="utf-8") as f:
        return EvalReport.from_json(json.load(f))
