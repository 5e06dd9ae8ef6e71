"""End-to-end experiment harness: protocol runs plus per-round evaluation.

One "mode run" is run_protocol followed by an evaluation of every round's
policy on a shared seeded trial set (shared across rounds and modes of a
master seed, so comparisons are paired). A "grid" is the cross product of
master seeds and modes; grid cells are independent and can execute in
worker processes.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .analysis import EvalReport, evaluate, load_report, save_report
from .data import PROTO_BATCHED, PROTO_HGDAGGER, PROTO_RAC, PROTO_RULE2ONLY
from .policy import load_policy
from .protocols import ProtocolConfig, RunArtifacts, run_protocol

ALL_MODES = (PROTO_RAC, PROTO_RULE2ONLY, PROTO_HGDAGGER, PROTO_BATCHED)


@dataclass
class ModeResult:
    mode: str
    master_seed: int
    run_dir: str
    reports: list[EvalReport]
    charged_cum: list[int]

    def final_success(self) -> float:
        return self.reports[-1].success_rate


def eval_seed_base(master_seed: int) -> int:
    """Shared across every (mode, round) of a master seed: paired trials."""
    return rng.derive_seed(master_seed, rng.EVAL)


def run_mode(
    cfg: ProtocolConfig,
    out_dir,
    eval_trials: int = 100,
    reuse: bool = True,
) -> ModeResult:
    """Run one protocol and evaluate each round's policy.

    With reuse=True, existing artifacts in out_dir are trusted and only the
    missing pieces are computed (runs are deterministic, so a finished
    directory is as good as a fresh run).
    """
    out_dir = os.fspath(out_dir)
    done_marker = os.path.join(out_dir, "run_complete.json")
    if not (reuse and os.path.exists(done_marker)):
        artifacts = run_protocol(cfg, out_dir)
        with open(done_marker, "w", encoding="utf-8") as f:
            json.dump({"rounds": len(artifacts.rounds)}, f)
    seed_base = eval_seed_base(cfg.master_seed)
    reports: list[EvalReport] = []
    charged: list[int] = []
    for k in range(cfg.rounds + 1):
        rdir = os.path.join(out_dir, f"round_{k}")
        epath = os.path.join(rdir, "eval.json")
        if reuse and os.path.exists(epath):
            rep = load_report(epath)
            if rep.n_trials != eval_trials:
                rep = None
        else:
            rep = None
        if rep is None:
            params = load_policy(os.path.join(rdir, "policy.bin"))
            rep = evaluate(
                params,
                cfg.env_cfg,
                n_trials=eval_trials,
                seed_base=seed_base,
                policy_id=f"{cfg.mode}-seed{cfg.master_seed}-round{k}",
                round_k=k,
            )
            save_report(rep, epath)
        with open(os.path.join(rdir, "stats.json"), "r", encoding="utf-8") as f:
            charged.append(int(json.load(f)["charged_cum"]))
        reports.append(rep)
    return ModeResult(
        mode=cfg.mode,
        master_seed=cfg.master_seed,
        run_dir=out_dir,
        reports=reports,
        charged_cum=charged,
    )


def grid_cell_dir(root, master_seed: int, mode: str) -> str:
    return os.path.join(os.fspath(root), f"seed_{master_seed}", mode)


def _run_cell(args) -> tuple[int, str, str]:
    cfg_doc, out_dir, eval_trials = args
    cfg = ProtocolConfig.from_json(cfg_doc)
    run_mode(cfg, out_dir, eval_trials=eval_trials)
    return cfg.master_seed, cfg.mode, out_dir


def run_grid(
    root,
    master_seeds,
    base_cfg: ProtocolConfig,
    modes=ALL_MODES,
    eval_trials: int = 100,
    workers: int | None = None,
) -> dict[tuple[int, str], ModeResult]:
    """Run every (seed, mode) cell, in worker processes when available.

    Each cell is independently deterministic, so parallelism cannot change
    results; cells found complete on disk are reused.
    """
    root = os.fspath(root)
    jobs = []
    for seed in master_seeds:
        for mode in modes:
            cfg = replace(base_cfg, mode=mode, master_seed=seed)
            jobs.append((cfg.to_json(), grid_cell_dir(root, seed, mode), eval_trials))
    pending = [j for j in jobs if not os.path.exists(os.path.join(j[1], "run_complete.json"))]
    if workers is None:
        workers = max(1, min(len(pending), os.cpu_count() or 1))
    if pending and workers > 1:
        # Workers must not oversubscribe BLAS threads on top of each other.
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        ctx = concurrent.futures.ProcessPoolExecutor(
            max_workers=workers,
            mp_context=__import__("multiprocessing").get_context("spawn"),
        )
        with ctx as pool:
            list(pool.map(_run_cell, pending))
    else:
        for job in pending:
            _run_cell(job)
    results: dict[tuple[int, str], ModeResult] = {}
    for cfg_doc, out_dir, trials in jobs:
        cfg = ProtocolConfig.from_json(cfg_doc)
        results[(cfg.master_seed, cfg.mode)] = run_mode(cfg, out_dir, eval_trials=trials)
    return results
