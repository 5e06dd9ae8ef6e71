"""Data-collection protocols under a shared frame budget.

Four regimes:
  batched    -- expert demonstrations only, gathered as one big batch with a
                policy trained at each budget-prefix checkpoint.
  rac        -- iterative human-in-the-loop with both rules: every takeover is
                recovery until back in distribution, then correction until the
                current sub-task completes, then the episode terminates.
  rule2only  -- takeovers are correction only, episode still terminates after
                the intervention.
  hgdagger   -- correction-only takeovers and the rollout continues afterwards
                (neither rule).

Budget accounting follows the collection loop: intervened episodes charge
their full length, autonomous successes are free, and each round keeps
collecting until the charge meets the round budget.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .data import (
    Dataset,
    DatasetWriter,
    Episode,
    Frame,
    LABEL_CORRECTION,
    LABEL_DEMO,
    LABEL_POLICY,
    LABEL_RECOVERY,
    OUTCOME_AUTON,
    OUTCOME_FAILED,
    OUTCOME_INTERVENED,
    PROTO_BATCHED,
    PROTO_HGDAGGER,
    PROTO_RAC,
    PROTO_RULE2ONLY,
    PROTOCOLS,
    SRC_HUMAN,
    SRC_POLICY,
    append,
    write as write_dataset,
)
from .env import EnvConfig, EnvState, STATUS_RUNNING, STATUS_SUCCESS, clip_action, observe, reset, step
from .oracle import (
    MODE_HGDAGGER,
    MODE_RAC,
    MODE_RULE2ONLY,
    OracleConfig,
    RolloutMonitor,
    VisitationGrid,
    build_grid,
    correction_action,
    demo_action,
    intervention_trigger,
    recovery_action,
    recovery_done,
)
from .policy import (
    NetDims,
    PolicyParams,
    TrainConfig,
    executed_per_plan,
    init_params,
    sample_chunk,
    save_policy,
    train,
)

# Safety rails on a collection round.
MAX_EPISODES_PER_ROUND = 500
MAX_DEMO_EPISODES = 5000
ZERO_STORED_ABORT = 50
# An operator does not begin rescuing an episode this close to the horizon;
# interventions must have room to finish before the timeout.
INTERVENTION_RESERVE = 100
# Demo-episode success fraction required before any experiment proceeds.
ORACLE_SUCCESS_GATE = 0.95

_MODE_TO_PROTOCOL = {
    MODE_RAC: PROTO_RAC,
    MODE_HGDAGGER: PROTO_HGDAGGER,
    MODE_RULE2ONLY: PROTO_RULE2ONLY,
}


class CalibrationError(RuntimeError):
    """The scripted teleoperator failed its success gate."""


class CollectionAborted(RuntimeError):
    """Too many consecutive episodes stored nothing."""


@dataclass(frozen=True)
class ProtocolConfig:
    mode: str = PROTO_RAC
    rounds: int = 4
    budget: int = 5000
    master_seed: int = 1
    env_cfg: EnvConfig = field(default_factory=EnvConfig)
    oracle_cfg: OracleConfig = field(default_factory=OracleConfig)
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    chunk_horizon: int = 8
    # Rounds after the first warm-start from the previous round's weights
    # (with this step budget) instead of retraining from scratch: the
    # aggregates nest, and the continuity keeps round-over-round policy
    # quality from whipsawing. 0 disables warm starting.
    finetune_steps: int = 8000

    def __post_init__(self):
        if self.mode not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.mode!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        self.oracle_cfg.validate(self.env_cfg)

    def dims(self) -> NetDims:
        return NetDims(obs_dim=self.env_cfg.obs_dim(), horizon=self.chunk_horizon, act_dim=2)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "rounds": self.rounds,
            "budget": self.budget,
            "master_seed": self.master_seed,
            "env_config": self.env_cfg.to_json(),
            "oracle_config": self.oracle_cfg.to_json(),
            "train_config": self.train_cfg.to_json(),
            "chunk_horizon": self.chunk_horizon,
            "finetune_steps": self.finetune_steps,
        }

    @staticmethod
    def from_json(doc: dict) -> "ProtocolConfig":
        return ProtocolConfig(
            mode=str(doc["mode"]),
            rounds=int(doc["rounds"]),
            budget=int(doc["budget"]),
            master_seed=int(doc["master_seed"]),
            env_cfg=EnvConfig.from_json(doc["env_config"]),
            oracle_cfg=OracleConfig.from_json(doc["oracle_config"]),
            train_cfg=TrainConfig.from_json(doc["train_config"]),
            chunk_horizon=int(doc.get("chunk_horizon", 8)),
            finetune_steps=int(doc.get("finetune_steps", 8000)),
        )


# ---------------------------------------------------------------------------
# Episode collection
# ---------------------------------------------------------------------------


def collect_demo_episode(
    env_cfg: EnvConfig, ocfg: OracleConfig, seed: int, ep_id: int, round_k: int, protocol: str
) -> Episode:
    """One scripted full demonstration, recorded per env step."""
    state = reset(env_cfg, seed)
    frames: list[Frame] = []
    while state.status == STATUS_RUNNING:
        gen = rng.stream(seed, state.steps, rng.DEMO_JITTER)
        act = demo_action(state, ocfg, env_cfg, gen)
        obs = observe(state, env_cfg)
        state = step(state, act, env_cfg)
        frames.append(
            Frame(t=len(frames), obs=obs, act=act, src=SRC_HUMAN, label=LABEL_DEMO, event=state.last_event)
        )
    outcome = OUTCOME_INTERVENED if state.status == STATUS_SUCCESS else OUTCOME_FAILED
    return Episode(
        id=ep_id,
        round=round_k,
        protocol=protocol,
        seed=seed,
        frames=frames,
        outcome=outcome,
        subtasks_completed=state.stage,
        full_len=len(frames),
    )


class InterventionPhase:
    """Label phase machine for one human takeover.

    rac starts in recovery and switches to correction once the state is back
    in a visited cell (at least one recovery frame is always emitted: the
    takeover itself asserts the state needs recovering). The other modes are
    correction-only. The intervention is complete when the sub-task counter
    advances during correction.
    """

    def __init__(self, mode: str, start_stage: int):
        self.mode = mode
        self.start_stage = start_stage
        self.phase = LABEL_RECOVERY if mode == MODE_RAC else LABEL_CORRECTION
        self.recovery_frames = 0

    def current_label(self, state: EnvState, grid: VisitationGrid | None, env_cfg: EnvConfig) -> str:
        if (
            self.phase == LABEL_RECOVERY
            and self.recovery_frames >= 1
            and recovery_done(state, grid, env_cfg)
        ):
            self.phase = LABEL_CORRECTION
        return self.phase

    def note_frame(self, label: str) -> None:
        if label == LABEL_RECOVERY:
            self.recovery_frames += 1

    def complete(self, state: EnvState) -> bool:
        return self.phase == LABEL_CORRECTION and state.stage > self.start_stage


def _scripted_intervention(
    state: EnvState,
    frames: list[Frame],
    mode: str,
    grid: VisitationGrid | None,
    ocfg: OracleConfig,
    env_cfg: EnvConfig,
    monitor: RolloutMonitor,
) -> EnvState:
    """Drive the oracle through one takeover, appending labeled human frames."""
    phase = InterventionPhase(mode, state.stage)
    while state.status == STATUS_RUNNING:
        label = phase.current_label(state, grid, env_cfg)
        if label == LABEL_RECOVERY:
            act = recovery_action(state, grid, ocfg, env_cfg)
        else:
            act = correction_action(state, ocfg, env_cfg)
        obs = observe(state, env_cfg)
        state = step(state, act, env_cfg)
        frames.append(
            Frame(t=len(frames), obs=obs, act=act, src=SRC_HUMAN, label=label, event=state.last_event)
        )
        phase.note_frame(label)
        monitor.update(state)
        if phase.complete(state):
            break
    return state


def collect_intervention_episode(
    mode: str,
    params: PolicyParams,
    grid: VisitationGrid | None,
    env_cfg: EnvConfig,
    ocfg: OracleConfig,
    seed: int,
    ep_id: int,
    round_k: int,
) -> Episode:
    """One rollout of the previous policy with oracle takeovers per the mode."""
    state = reset(env_cfg, seed)
    monitor = RolloutMonitor(state, env_cfg)
    frames: list[Frame] = []
    intervened = False
    replan = 0
    n_exec = executed_per_plan(params.dims.horizon)

    while state.status == STATUS_RUNNING:
        may_intervene = state.steps <= env_cfg.horizon - INTERVENTION_RESERVE
        if may_intervene and intervention_trigger(state, monitor, ocfg, env_cfg):
            intervened = True
            state = _scripted_intervention(state, frames, mode, grid, ocfg, env_cfg, monitor)
            if mode in (MODE_RAC, MODE_RULE2ONLY):
                break  # terminate after intervention
            if state.status != STATUS_RUNNING:
                break
            monitor.after_intervention(state)
            continue
        gen = rng.stream(seed, replan, rng.CHUNK_NOISE)
        chunk = sample_chunk(params, observe(state, env_cfg), gen)
        replan += 1
        for row in chunk[:n_exec]:
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
            monitor.update(state)
            if state.status != STATUS_RUNNING:
                break

    if intervened:
        outcome = OUTCOME_INTERVENED
    elif state.status == STATUS_SUCCESS:
        outcome = OUTCOME_AUTON
    else:
        outcome = OUTCOME_FAILED
    return Episode(
        id=ep_id,
        round=round_k,
        protocol=_MODE_TO_PROTOCOL[mode],
        seed=seed,
        frames=frames,
        outcome=outcome,
        subtasks_completed=state.stage,
        full_len=len(frames),
    )


# ---------------------------------------------------------------------------
# Round loops
# ---------------------------------------------------------------------------


def collect_demo_round(
    dataset: Dataset,
    budget: int,
    round_k: int,
    protocol: str,
    master_seed: int,
    env_cfg: EnvConfig,
    ocfg: OracleConfig,
    writer: DatasetWriter | None = None,
) -> dict:
    """Demo episodes until the charge meets the budget. Failed takes are
    dropped and re-done, uncharged."""
    dataset.ledger.note_budget(round_k, budget)
    attempts = 0
    successes = 0
    while dataset.ledger.charged_in(round_k) < budget:
        if attempts >= MAX_DEMO_EPISODES:
            raise CollectionAborted(f"demo round {round_k} exceeded {MAX_DEMO_EPISODES} attempts")
        seed = rng.derive_seed(master_seed, round_k, attempts, rng.EPISODE)
        ep = collect_demo_episode(env_cfg, ocfg, seed, dataset.next_episode_id(), round_k, protocol)
        attempts += 1
        if ep.outcome == OUTCOME_INTERVENED:
            successes += 1
        append(dataset, ep)
        if writer is not None:
            writer.commit(dataset.episodes[-1])
    rate = successes / attempts if attempts else 0.0
    if rate < ORACLE_SUCCESS_GATE:
        raise CalibrationError(
            f"scripted demos succeeded in {successes}/{attempts} episodes "
            f"({rate:.1%}), below the {ORACLE_SUCCESS_GATE:.0%} gate"
        )
    return {"attempts": attempts, "successes": successes}


def collect_intervention_round(
    mode: str,
    params: PolicyParams,
    dataset: Dataset,
    budget: int,
    round_k: int,
    master_seed: int,
    env_cfg: EnvConfig,
    ocfg: OracleConfig,
    grid: VisitationGrid | None,
    writer: DatasetWriter | None = None,
) -> dict:
    """Keep rolling out and intervening until the round's charge meets the budget."""
    dataset.ledger.note_budget(round_k, budget)
    episodes = 0
    zero_streak = 0
    ocfg = replace(ocfg, mode=mode)
    # Autonomous successes are stored free of charge, so a strong policy
    # could flood the aggregate with its own rollouts before the round's
    # human budget fills; cap their stored volume at half the budget.
    auton_cap = budget // 2
    while dataset.ledger.charged_in(round_k) < budget and episodes < MAX_EPISODES_PER_ROUND:
        seed = rng.derive_seed(master_seed, round_k, episodes, rng.EPISODE)
        ep = collect_intervention_episode(
            mode, params, grid, env_cfg, ocfg, seed, dataset.next_episode_id(), round_k
        )
        append(dataset, ep, auton_frame_cap=auton_cap)
        if writer is not None:
            writer.commit(dataset.episodes[-1])
        episodes += 1
        if dataset.episodes[-1].frames:
            zero_streak = 0
        else:
            zero_streak += 1
            if zero_streak >= ZERO_STORED_ABORT:
                raise CollectionAborted(
                    f"{ZERO_STORED_ABORT} consecutive episodes stored no frames in round {round_k}"
                )
    return {"episodes": episodes}


# ---------------------------------------------------------------------------
# Full protocol runs
# ---------------------------------------------------------------------------


@dataclass
class RoundArtifact:
    round: int
    dataset_path: str
    policy_path: str
    stats: dict
    params: PolicyParams


@dataclass
class RunArtifacts:
    cfg: ProtocolConfig
    run_dir: str
    rounds: list[RoundArtifact]

    def final(self) -> RoundArtifact:
        return self.rounds[-1]


def _round_stats(dataset: Dataset, round_k: int, cfg: ProtocolConfig, extra: dict) -> dict:
    by_outcome = {}
    for ep in dataset.episodes:
        if ep.round != round_k:
            continue
        by_outcome[ep.outcome] = by_outcome.get(ep.outcome, 0) + 1
    charged_cum = sum(v for k, v in dataset.ledger.charged.items() if k <= round_k)
    return {
        "round": round_k,
        "mode": cfg.mode,
        "frames_by_label": dataset.frames_by_label(round_k),
        "episodes_by_outcome": by_outcome,
        "budget": dataset.ledger.budgets.get(round_k, 0),
        "charged": dataset.ledger.charged_in(round_k),
        "charged_cum": charged_cum,
        **extra,
    }


def _write_round(
    out_dir: str, round_k: int, dataset: Dataset, params: PolicyParams, stats: dict
) -> RoundArtifact:
    rdir = os.path.join(out_dir, f"round_{round_k}")
    os.makedirs(rdir, exist_ok=True)
    dpath = os.path.join(rdir, "dataset.jsonl")
    ppath = os.path.join(rdir, "policy.bin")
    write_dataset(dataset, dpath)
    save_policy(params, ppath)
    with open(os.path.join(rdir, "stats.json"), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=1, sort_keys=True)
    return RoundArtifact(round=round_k, dataset_path=dpath, policy_path=ppath, stats=stats, params=params)


def _train_round(
    cfg: ProtocolConfig, dataset: Dataset, round_k: int, prev: PolicyParams | None = None
) -> PolicyParams:
    """Train on the aggregate, deterministically per round.

    Round 0 (or finetune_steps == 0) trains from scratch with the full
    budget; later rounds warm-start from the previous round's weights.
    """
    dims = cfg.dims()
    tcfg = replace(cfg.train_cfg, seed=rng.derive_seed(cfg.master_seed, round_k, rng.TRAIN))
    if prev is not None and cfg.finetune_steps > 0:
        params = prev
        tcfg = replace(tcfg, step_budget=cfg.finetune_steps)
    else:
        params = init_params(rng.derive_seed(cfg.master_seed, round_k, rng.PARAM_INIT), dims)
    return train(params, dataset, tcfg)


def run_protocol(cfg: ProtocolConfig, out_dir) -> RunArtifacts:
    """Collect, aggregate and retrain per the configured protocol.

    Fully deterministic from cfg.master_seed; artifacts land in out_dir using
    the round_k/{dataset.jsonl,policy.bin,stats.json} layout.
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8") as f:
        json.dump(cfg.to_json(), f, indent=1, sort_keys=True)

    if cfg.mode == PROTO_BATCHED:
        return _run_batched(cfg, out_dir)
    return _run_iterative(cfg, out_dir)


def _run_iterative(cfg: ProtocolConfig, out_dir: str) -> RunArtifacts:
    dataset = Dataset(cfg.env_cfg, created_unix=0)
    demo_stats = collect_demo_round(
        dataset, cfg.budget, 0, cfg.mode, cfg.master_seed, cfg.env_cfg, cfg.oracle_cfg
    )
    params = _train_round(cfg, dataset, 0)
    rounds = [
        _write_round(out_dir, 0, dataset, params, _round_stats(dataset, 0, cfg, {"demo": demo_stats}))
    ]
    grid = build_grid(dataset, cfg.env_cfg)
    for k in range(1, cfg.rounds + 1):
        round_stats = collect_intervention_round(
            cfg.mode,
            params,
            dataset,
            cfg.budget,
            k,
            cfg.master_seed,
            cfg.env_cfg,
            cfg.oracle_cfg,
            grid,
        )
        params = _train_round(cfg, dataset, k, prev=params)
        rounds.append(
            _write_round(out_dir, k, dataset, params, _round_stats(dataset, k, cfg, round_stats))
        )
    return RunArtifacts(cfg=cfg, run_dir=out_dir, rounds=rounds)


def _run_batched(cfg: ProtocolConfig, out_dir: str) -> RunArtifacts:
    """One big demo batch; a policy per budget-prefix checkpoint."""
    total = (cfg.rounds + 1) * cfg.budget
    full = Dataset(cfg.env_cfg, created_unix=0)
    demo_stats = collect_demo_round(
        full, total, 0, PROTO_BATCHED, cfg.master_seed, cfg.env_cfg, cfg.oracle_cfg
    )
    rounds = []
    prev_params = None
    for k in range(cfg.rounds + 1):
        target = (k + 1) * cfg.budget
        prefix = Dataset(cfg.env_cfg, created_unix=0)
        prefix.ledger.note_budget(0, target)
        for ep in full.episodes:
            if prefix.ledger.charged_in(0) >= target:
                break
            if not ep.frames:
                continue  # failed takes stored nothing; nothing to replay
            clone = Episode(
                id=ep.id,
                round=ep.round,
                protocol=ep.protocol,
                seed=ep.seed,
                frames=list(ep.frames),
                outcome=ep.outcome,
                subtasks_completed=ep.subtasks_completed,
                full_len=ep.full_len,
            )
            append(prefix, clone)
        params = _train_round(cfg, prefix, k, prev=prev_params)
        prev_params = params
        stats = _round_stats(prefix, 0, cfg, {"demo": demo_stats, "checkpoint": k})
        stats["round"] = k
        stats["charged_cum"] = prefix.ledger.charged_in(0)
        rounds.append(_write_round(out_dir, k, prefix, params, stats))
    return RunArtifacts(cfg=cfg, run_dir=out_dir, rounds=rounds)


def load_run(run_dir) -> ProtocolConfig:
    with open(os.path.join(os.fspath(run_dir), "run.json"), "r", encoding="utf-8") as f:
        return ProtocolConfig.from_json(json.load(f))
