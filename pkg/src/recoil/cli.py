"""Command-line entry points: collect, train, eval, analyze, serve.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import rng
from .analysis import (
    composition_report,
    evaluate,
    load_report,
    mean_recovery_events,
    progress_profile,
    save_report,
    testtime_correlation,
    write_composition_csv,
    write_lengths_csv,
    write_profile_csv,
    write_scaling_csv,
    write_testtime_csv,
    DegenerateSeries,
    DomainError,
)
from .data import PROTOCOLS, read as read_dataset
from .env import EnvConfig, load_env_config
from .policy import TrainConfig, init_params, load_policy, save_policy, train
from .protocols import ProtocolConfig, load_run, run_protocol

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="recoil", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", help="run a data-collection protocol end to end")
    c.add_argument("--protocol", required=True, choices=list(PROTOCOLS))
    c.add_argument("--rounds", type=int, default=4)
    c.add_argument("--budget", type=int, default=5000)
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--out", required=True)
    c.add_argument("--env-config", default=None, help="JSON file overriding EnvConfig")
    c.add_argument("--train-steps", type=int, default=None, help="optimizer steps per retraining")

    t = sub.add_parser("train", help="train a policy on a dataset file or run directory")
    t.add_argument("--data", required=True, help="dataset.jsonl or a run round directory")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="optimizer step budget")
    t.add_argument("--epochs", type=int, default=None, help="epochs (overrides steps)")
    t.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a policy file")
    e.add_argument("--policy", required=True)
    e.add_argument("--trials", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None, help="report JSON path")
    e.add_argument("--env-config", default=None)

    a = sub.add_parser("analyze", help="produce the CSV analyses for a run directory")
    a.add_argument("--run", required=True)
    a.add_argument("--csv-dir", required=True)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--all-rollouts", action="store_true",
                   help="include unsuccessful rollouts in the recovery-event means")

    s = sub.add_parser("serve", help="local WebSocket service for the operator console")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--mode", choices=["interactive", "replay", "dashboard"], default="interactive")
    s.add_argument("--run", default=None, help="run directory (policy, grid, analyses)")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--protocol", choices=["rac", "hgdagger", "rule2only"], default="rac")
    s.add_argument("--host", default="127.0.0.1")

    return p


def _load_env(path) -> EnvConfig:
    if path is None:
        return EnvConfig()
    return load_env_config(path)


def cmd_collect(args) -> int:
    tcfg = TrainConfig()
    if args.train_steps is not None:
        tcfg = TrainConfig(step_budget=args.train_steps)
    cfg = ProtocolConfig(
        mode=args.protocol,
        rounds=args.rounds,
        budget=args.budget,
        master_seed=args.seed,
        env_cfg=_load_env(args.env_config),
        train_cfg=tcfg,
    )
    arts = run_protocol(cfg, args.out)
    print(f"collected {len(arts.rounds)} rounds into {args.out}")
    return 0


def cmd_train(args) -> int:
    data_path = args.data
    if os.path.isdir(data_path):
        data_path = os.path.join(data_path, "dataset.jsonl")
    ds = read_dataset(data_path)
    from .policy import NetDims

    dims = NetDims(obs_dim=ds.env_cfg.obs_dim())
    tcfg = TrainConfig(seed=args.seed)
    if args.steps is not None:
        tcfg = TrainConfig(seed=args.seed, step_budget=args.steps)
    if args.epochs is not None:
        tcfg = TrainConfig(seed=args.seed, step_budget=0, epochs=args.epochs)
    params = init_params(rng.derive_seed(args.seed, rng.PARAM_INIT), dims)
    trained = train(params, ds, tcfg)
    save_policy(trained, args.out)
    print(f"trained {trained.train_steps} steps -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    params = load_policy(args.policy)
    env_cfg = _load_env(args.env_config)
    rep = evaluate(params, env_cfg, n_trials=args.trials, seed_base=args.seed,
                   policy_id=os.path.basename(args.policy))
    if args.out:
        save_report(rep, args.out)
    print(json.dumps({
        "success_rate": rep.success_rate,
        "wilson_lo": rep.wilson_lo,
        "wilson_hi": rep.wilson_hi,
        "progress_mean": rep.progress_mean,
        "n_trials": rep.n_trials,
    }, indent=1))
    return 0


def cmd_analyze(args) -> int:
    run_dir = args.run
    cfg = load_run(run_dir)
    out = args.csv_dir
    os.makedirs(out, exist_ok=True)
    seed_base = rng.derive_seed(cfg.master_seed, rng.EVAL)
    reports = []
    scaling_rows = []
    for k in range(cfg.rounds + 1):
        rdir = os.path.join(run_dir, f"round_{k}")
        epath = os.path.join(rdir, "eval.json")
        if os.path.exists(epath):
            rep = load_report(epath)
        else:
            params = load_policy(os.path.join(rdir, "policy.bin"))
            rep = evaluate(params, cfg.env_cfg, n_trials=args.trials, seed_base=seed_base,
                           policy_id=f"{cfg.mode}-round{k}", round_k=k)
            save_report(rep, epath)
        reports.append(rep)
        with open(os.path.join(rdir, "stats.json")) as f:
            charged_cum = json.load(f)["charged_cum"]
        scaling_rows.append({
            "protocol": cfg.mode,
            "round": k,
            "frames_charged_cum": charged_cum,
            "success_rate": rep.success_rate,
            "wilson_lo": rep.wilson_lo,
            "wilson_hi": rep.wilson_hi,
            "progress_mean": rep.progress_mean,
        })
    m = cfg.env_cfg.num_stages
    write_scaling_csv(os.path.join(out, "scaling.csv"), scaling_rows)
    ds = read_dataset(os.path.join(run_dir, f"round_{cfg.rounds}", "dataset.jsonl"))
    write_composition_csv(os.path.join(out, "composition.csv"), composition_report(ds))
    write_profile_csv(os.path.join(out, "profile.csv"), progress_profile(reports, m))
    write_lengths_csv(os.path.join(out, "lengths.csv"), reports, m)
    summary: dict = {"mode": cfg.mode, "master_seed": cfg.master_seed}
    try:
        r, pairs = testtime_correlation(reports, m, successful_only=not args.all_rollouts)
        write_testtime_csv(os.path.join(out, "testtime.csv"), pairs, r)
        summary["pearson_r"] = r
    except (DegenerateSeries, DomainError) as e:
        pairs = []
        for rep in reports:
            mre = mean_recovery_events(rep, m, successful_only=not args.all_rollouts)
            if mre is not None:
                pairs.append((rep.round, mre, rep.success_rate))
        write_testtime_csv(os.path.join(out, "testtime.csv"), pairs, None)
        summary["pearson_r"] = None
        summary["pearson_note"] = str(e)
    summary["final_success_rate"] = reports[-1].success_rate
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    print(f"analyses written to {out}")
    return 0


def cmd_serve(args) -> int:
    from .server import serve_main

    return serve_main(args)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "collect": cmd_collect,
        "train": cmd_train,
        "eval": cmd_eval,
        "analyze": cmd_analyze,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except KeyboardInterrupt:
        return RUNTIME_ERROR
    except Exception as e:  # surfaced uniformly as runtime errors
        print(f"recoil {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
