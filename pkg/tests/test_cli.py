import json
import os

import pytest

from recoil import cli
from recoil import data as D
from recoil import policy as P
from recoil.env import EnvConfig


def run_cli(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "rac"
    code = run_cli(
        "collect", "--protocol", "rac", "--rounds", "1", "--budget", "500",
        "--seed", "3", "--out", str(out), "--train-steps", "300",
    )
    assert code == 0
    return out


def test_unknown_flag_exits_1_and_names_it(capsys):
    code = run_cli("collect", "--protocol", "rac", "--out", "/tmp/x", "--warp-speed")
    captured = capsys.readouterr()
    assert code == 1
    assert "--warp-speed" in captured.err


def test_missing_subcommand_exits_1():
    assert run_cli() == 1


def test_collect_layout(small_run):
    assert (small_run / "run.json").exists()
    for k in (0, 1):
        assert (small_run / f"round_{k}" / "dataset.jsonl").exists()
        assert (small_run / f"round_{k}" / "policy.bin").exists()
        assert (small_run / f"round_{k}" / "stats.json").exists()
    with open(small_run / "round_1" / "stats.json") as f:
        stats = json.load(f)
    assert stats["charged"] >= 500


def test_eval_runs_and_writes_report(small_run, tmp_path):
    report = tmp_path / "report.json"
    code = run_cli(
        "eval", "--policy", str(small_run / "round_1" / "policy.bin"),
        "--trials", "5", "--seed", "9", "--out", str(report),
    )
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["n_trials"] == 5
    assert 0.0 <= doc["success_rate"] <= 1.0


def test_eval_truncated_policy_exits_2(small_run, tmp_path, capsys):
    blob = (small_run / "round_1" / "policy.bin").read_bytes()
    bad = tmp_path / "trunc.bin"
    bad.write_bytes(blob[:-64])
    code = run_cli("eval", "--policy", str(bad), "--trials", "1", "--seed", "0")
    captured = capsys.readouterr()
    assert code == 2
    assert "FormatError" in captured.err


def test_train_on_dataset(small_run, tmp_path):
    out = tmp_path / "pol.bin"
    code = run_cli(
        "train", "--data", str(small_run / "round_0"), "--out", str(out),
        "--steps", "50", "--seed", "4",
    )
    assert code == 0
    params = P.load_policy(out)
    assert params.train_steps == 50


def test_analyze_writes_all_csvs(small_run, tmp_path):
    csv_dir = tmp_path / "csv"
    code = run_cli("analyze", "--run", str(small_run), "--csv-dir", str(csv_dir), "--trials", "5")
    assert code == 0
    for name in ("scaling.csv", "composition.csv", "profile.csv", "lengths.csv", "testtime.csv", "summary.json"):
        assert (csv_dir / name).exists(), name
    header = (csv_dir / "scaling.csv").read_text().splitlines()[0]
    assert header == "protocol,round,frames_charged_cum,success_rate,wilson_lo,wilson_hi,progress_mean"
    # evaluations are cached back into the run directory
    assert (small_run / "round_0" / "eval.json").exists()


def test_env_config_override(tmp_path):
    cfg_path = tmp_path / "env.json"
    doc = EnvConfig.default(2).to_json()
    cfg_path.write_text(json.dumps(doc))
    out = tmp_path / "mini"
    code = run_cli(
        "collect", "--protocol", "batched", "--rounds", "1", "--budget", "200",
        "--seed", "5", "--out", str(out), "--env-config", str(cfg_path),
        "--train-steps", "50",
    )
    assert code == 0
    ds = D.read(out / "round_1" / "dataset.jsonl")
    assert ds.env_cfg.num_stages == 2
