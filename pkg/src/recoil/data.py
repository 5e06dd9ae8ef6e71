"""Canonical dataset of frames and episodes, with budget accounting.

Storage rules mirror the collection loop's accounting: an episode that ran
autonomously to full success is stored whole and costs nothing; an episode
with any human takeover stores only the human frames but is charged its full
length against the round budget; a failed episode without takeover stores
nothing (a failed teleoperated demo is a retake and is likewise dropped,
uncharged).

On disk a dataset is line-delimited JSON: a meta record, then each episode
record followed contiguously by its stored frames. Readers are tolerant:
unknown fields are ignored, unknown record kinds are an error.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .env import EnvConfig, EVENTS

SCHEMA_VERSION = 1

SRC_POLICY = "policy"
SRC_HUMAN = "human"
SOURCES = (SRC_POLICY, SRC_HUMAN)

LABEL_DEMO = "demo"
LABEL_RECOVERY = "recovery"
LABEL_CORRECTION = "correction"
LABEL_POLICY = "policy"
LABELS = (LABEL_DEMO, LABEL_RECOVERY, LABEL_CORRECTION, LABEL_POLICY)
HUMAN_LABELS = (LABEL_DEMO, LABEL_RECOVERY, LABEL_CORRECTION)

OUTCOME_AUTON = "auton_success"
OUTCOME_INTERVENED = "intervened"
OUTCOME_FAILED = "failed"
OUTCOMES = (OUTCOME_AUTON, OUTCOME_INTERVENED, OUTCOME_FAILED)

PROTO_BATCHED = "batched"
PROTO_RAC = "rac"
PROTO_HGDAGGER = "hgdagger"
PROTO_RULE2ONLY = "rule2only"
PROTOCOLS = (PROTO_BATCHED, PROTO_RAC, PROTO_HGDAGGER, PROTO_RULE2ONLY)


class InvariantViolation(ValueError):
    """An episode or frame breaks a dataset invariant."""


class FormatError(ValueError):
    """Malformed dataset or policy file; message carries the line number."""


class EmptyDataset(ValueError):
    """An operation needed at least one stored frame."""


@dataclass(frozen=True, eq=False)
class Frame:
    t: int
    obs: np.ndarray
    act: np.ndarray
    src: str
    label: str
    event: str

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=np.float32).copy()
        obs.flags.writeable = False
        act = np.asarray(self.act, dtype=np.float32).reshape(2).copy()
        act.flags.writeable = False
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "act", act)
        if self.src not in SOURCES:
            raise InvariantViolation(f"bad src {self.src!r}")
        if self.label not in LABELS:
            raise InvariantViolation(f"bad label {self.label!r}")
        if self.event not in EVENTS:
            raise InvariantViolation(f"bad event {self.event!r}")
        if self.label == LABEL_POLICY and self.src != SRC_POLICY:
            raise InvariantViolation("policy-labeled frame must be policy-sourced")
        if self.label in (LABEL_RECOVERY, LABEL_CORRECTION, LABEL_DEMO) and self.src != SRC_HUMAN:
            raise InvariantViolation(f"{self.label} frame must be human-sourced")


@dataclass(eq=False)
class Episode:
    id: int
    round: int
    protocol: str
    seed: int
    frames: list[Frame]
    outcome: str
    subtasks_completed: int
    full_len: int  # length before storage filtering; what the budget charges

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise InvariantViolation(f"bad protocol {self.protocol!r}")
        if self.outcome not in OUTCOMES:
            raise InvariantViolation(f"bad outcome {self.outcome!r}")
        if not self.frames:
            raise InvariantViolation("episode has no frames")
        if self.full_len < len(self.frames):
            raise InvariantViolation("full_len shorter than stored frames")
        human = [f for f in self.frames if f.src == SRC_HUMAN]
        if self.outcome == OUTCOME_AUTON and human:
            raise InvariantViolation("auton_success episode contains human frames")
        if self.outcome == OUTCOME_INTERVENED and not human:
            raise InvariantViolation("intervened episode has no human frames")
        if (
            self.outcome == OUTCOME_INTERVENED
            and self.protocol in (PROTO_RAC, PROTO_RULE2ONLY)
            and self.frames[-1].src != SRC_HUMAN
        ):
            raise InvariantViolation("rac/rule2only intervened episode must end on a human frame")

    def human_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.src == SRC_HUMAN]


@dataclass
class BudgetLedger:
    """Per-round frame accounting: budget, charged, and stored counts."""

    budgets: dict[int, int] = field(default_factory=dict)
    charged: dict[int, int] = field(default_factory=dict)
    stored_human_frames: dict[int, int] = field(default_factory=dict)
    stored_auton_frames: dict[int, int] = field(default_factory=dict)

    def note_budget(self, round_k: int, budget: int) -> None:
        self.budgets[round_k] = int(budget)

    def _bump(self, table: dict[int, int], round_k: int, n: int) -> None:
        table[round_k] = table.get(round_k, 0) + int(n)

    def charged_in(self, round_k: int) -> int:
        return self.charged.get(round_k, 0)

    def total_charged(self) -> int:
        return sum(self.charged.values())

    def to_json(self) -> dict:
        as_str = lambda d: {str(k): v for k, v in sorted(d.items())}
        return {
            "budgets": as_str(self.budgets),
            "charged": as_str(self.charged),
            "stored_human_frames": as_str(self.stored_human_frames),
            "stored_auton_frames": as_str(self.stored_auton_frames),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, BudgetLedger):
            return NotImplemented
        return self.to_json() == other.to_json()


class Dataset:
    """Append-only collection of episodes plus the ledger."""

    def __init__(self, env_cfg: EnvConfig, created_unix: int = 0):
        self.env_cfg = env_cfg
        self.created_unix = int(created_unix)
        self.episodes: list[Episode] = []
        self.ledger = BudgetLedger()

    def __len__(self) -> int:
        return len(self.episodes)

    def next_episode_id(self) -> int:
        return self.episodes[-1].id + 1 if self.episodes else 0

    def frames_by_label(self, round_k: int | None = None) -> dict[str, int]:
        out = {label: 0 for label in LABELS}
        for ep in self.episodes:
            if round_k is not None and ep.round != round_k:
                continue
            for fr in ep.frames:
                out[fr.label] += 1
        return out

    def rounds(self) -> list[int]:
        return sorted({ep.round for ep in self.episodes})


def _stored_frames(episode: Episode) -> list[Frame]:
    if episode.outcome == OUTCOME_AUTON:
        return list(episode.frames)
    if episode.outcome == OUTCOME_INTERVENED:
        return episode.human_frames()
    return []


def append(dataset: Dataset, episode: Episode, auton_frame_cap: int | None = None) -> Dataset:
    """Apply storage and charging rules, then commit the episode.

    The episode is passed with its complete frame list; storage filtering
    happens here so the ledger can charge the full length. auton_frame_cap
    bounds the free autonomous-success frames stored per round: once the
    round holds that many, further successes are recorded but not stored
    (they cost nothing and would otherwise drown the human data).
    """
    episode.validate()
    if dataset.episodes and episode.id <= dataset.episodes[-1].id:
        raise InvariantViolation(
            f"episode ids must increase ({episode.id} after {dataset.episodes[-1].id})"
        )
    kept = _stored_frames(episode)
    if (
        episode.outcome == OUTCOME_AUTON
        and auton_frame_cap is not None
        and dataset.ledger.stored_auton_frames.get(episode.round, 0) + len(kept) > auton_frame_cap
    ):
        kept = []
    stored = Episode(
        id=episode.id,
        round=episode.round,
        protocol=episode.protocol,
        seed=episode.seed,
        frames=kept,
        outcome=episode.outcome,
        subtasks_completed=episode.subtasks_completed,
        full_len=episode.full_len,
    )
    led = dataset.ledger
    if episode.outcome == OUTCOME_INTERVENED:
        led._bump(led.charged, episode.round, episode.full_len)
        led._bump(led.stored_human_frames, episode.round, len(kept))
    elif episode.outcome == OUTCOME_AUTON:
        led._bump(led.stored_auton_frames, episode.round, len(kept))
    dataset.episodes.append(stored)
    return dataset


def recompute_ledger(dataset: Dataset) -> BudgetLedger:
    """Rebuild charged/stored counts from raw episodes (conservation check)."""
    led = BudgetLedger(budgets=dict(dataset.ledger.budgets))
    for ep in dataset.episodes:
        if ep.outcome == OUTCOME_INTERVENED:
            led._bump(led.charged, ep.round, ep.full_len)
            led._bump(led.stored_human_frames, ep.round, sum(1 for f in ep.frames if f.src == SRC_HUMAN))
        elif ep.outcome == OUTCOME_AUTON:
            led._bump(led.stored_auton_frames, ep.round, len(ep.frames))
    return led


@dataclass(frozen=True)
class TrainingSpan:
    """A contiguous run of stored frames usable as chunk-start material.

    Chunks never cross a span boundary: the tail is padded by repeating the
    final action. Spans break at episode ends and at gaps where non-stored
    (policy) frames were dropped from an intervened episode.
    """

    episode_id: int
    frames: tuple[Frame, ...]


def training_spans(dataset: Dataset) -> list[TrainingSpan]:
    spans: list[TrainingSpan] = []
    for ep in dataset.episodes:
        if not ep.frames:
            continue
        run: list[Frame] = [ep.frames[0]]
        for fr in ep.frames[1:]:
            if fr.t == run[-1].t + 1:
                run.append(fr)
            else:
                spans.append(TrainingSpan(ep.id, tuple(run)))
                run = [fr]
        spans.append(TrainingSpan(ep.id, tuple(run)))
    return spans


def training_view(dataset: Dataset) -> list[tuple[TrainingSpan, int]]:
    """Every (span, index) usable as an action-chunk start.

    All stored frames qualify: full demos and autonomous successes
    contribute every frame, intervened episodes only their human frames
    (the policy frames were never stored).
    """
    return [(span, i) for span in training_spans(dataset) for i in range(len(span.frames))]


def chunk_targets(span: TrainingSpan, start: int, horizon: int) -> np.ndarray:
    """[horizon, 2] float32 action window, tail-padded with the final action."""
    acts = [span.frames[min(start + j, len(span.frames) - 1)].act for j in range(horizon)]
    return np.stack(acts).astype(np.float32)


def _frame_record(ep_id: int, fr: Frame) -> dict:
    return {
        "kind": "frame",
        "ep": ep_id,
        "t": fr.t,
        "obs": [float(x) for x in fr.obs],
        "act": [float(fr.act[0]), float(fr.act[1])],
        "src": fr.src,
        "label": fr.label,
        "event": fr.event,
    }


def episode_lines(episode: Episode) -> list[str]:
    rec = {
        "kind": "episode",
        "id": episode.id,
        "round": episode.round,
        "protocol": episode.protocol,
        "seed": episode.seed,
        "outcome": episode.outcome,
        "subtasks": episode.subtasks_completed,
        "full_len": episode.full_len,
    }
    lines = [json.dumps(rec, separators=(",", ":"))]
    lines += [json.dumps(_frame_record(episode.id, fr), separators=(",", ":")) for fr in episode.frames]
    return lines


def meta_line(dataset: Dataset) -> str:
    rec = {
        "kind": "meta",
        "schema": SCHEMA_VERSION,
        "env_config": dataset.env_cfg.to_json(),
        "created_unix": dataset.created_unix,
        "budgets": {str(k): v for k, v in sorted(dataset.ledger.budgets.items())},
    }
    return json.dumps(rec, separators=(",", ":"))


def write(dataset: Dataset, path) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(meta_line(dataset) + "\n")
        for ep in dataset.episodes:
            f.write("\n".join(episode_lines(ep)) + "\n")


class DatasetWriter:
    """Incremental writer: one flushed write per line, so a crash leaves a
    readable prefix of whole records."""

    def __init__(self, dataset: Dataset, path):
        self.path = os.fspath(path)
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        self._f = open(self.path, "w", encoding="utf-8")
        self._f.write(meta_line(dataset) + "\n")
        self._f.flush()

    def commit(self, episode: Episode) -> None:
        for line in episode_lines(episode):
            self._f.write(line + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def read(path) -> Dataset:
    path = os.fspath(path)
    dataset: Dataset | None = None
    current: Episode | None = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: bad JSON ({e.msg})") from e
            kind = rec.get("kind")
            if kind == "meta":
                if rec.get("schema") != SCHEMA_VERSION:
                    raise FormatError(f"{path}:{lineno}: unsupported schema {rec.get('schema')!r}")
                dataset = Dataset(
                    EnvConfig.from_json(rec["env_config"]),
                    created_unix=int(rec.get("created_unix", 0)),
                )
                for k, v in rec.get("budgets", {}).items():
                    dataset.ledger.note_budget(int(k), int(v))
            elif kind == "episode":
                if dataset is None:
                    raise FormatError(f"{path}:{lineno}: episode before meta record")
                current = Episode(
                    id=int(rec["id"]),
                    round=int(rec["round"]),
                    protocol=str(rec["protocol"]),
                    seed=int(rec["seed"]),
                    frames=[],
                    outcome=str(rec["outcome"]),
                    subtasks_completed=int(rec["subtasks"]),
                    full_len=int(rec["full_len"]),
                )
                dataset.episodes.append(current)
            elif kind == "frame":
                if current is None or int(rec["ep"]) != current.id:
                    raise FormatError(f"{path}:{lineno}: frame outside its episode block")
                try:
                    current.frames.append(
                        Frame(
                            t=int(rec["t"]),
                            obs=np.asarray(rec["obs"], dtype=np.float32),
                            act=np.asarray(rec["act"], dtype=np.float32),
                            src=str(rec["src"]),
                            label=str(rec["label"]),
                            event=str(rec["event"]),
                        )
                    )
                except InvariantViolation as e:
                    raise FormatError(f"{path}:{lineno}: {e}") from e
            else:
                raise FormatError(f"{path}:{lineno}: unknown record kind {kind!r}")
    if dataset is None:
        raise FormatError(f"{path}:1: missing meta record")
    led = recompute_ledger(dataset)
    dataset.ledger = led
    return dataset


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Bit-exact equality, ledger included."""
    if a.env_cfg.to_json() != b.env_cfg.to_json():
        return False
    if a.created_unix != b.created_unix or len(a.episodes) != len(b.episodes):
        return False
    if a.ledger != b.ledger:
        return False
    for ea, eb in zip(a.episodes, b.episodes):
        if (ea.id, ea.round, ea.protocol, ea.seed, ea.outcome, ea.subtasks_completed, ea.full_len) != (
            eb.id,
            eb.round,
            eb.protocol,
            eb.seed,
            eb.outcome,
            eb.subtasks_completed,
            eb.full_len,
        ):
            return False
        if len(ea.frames) != len(eb.frames):
            return False
        for fa, fb in zip(ea.frames, eb.frames):
            if fa.t != fb.t or fa.src != fb.src or fa.label != fb.label or fa.event != fb.event:
                return False
            if not (np.array_equal(fa.obs, fb.obs) and np.array_equal(fa.act, fb.act)):
                return False
    return True
