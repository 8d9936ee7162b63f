import csv
import json

import pytest

from affordplan.cli import EXIT_CONFIG, EXIT_OK, EXIT_PLAN, main


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for fam, n in (("push", 40), ("grasp", 30)):
        assert main(["gen-data", "--family", fam, "--count", str(n), "--seed", "7", "--out", str(root / f"{fam}.jsonl")]) == 0
        assert main(["train", "--dataset", str(root / f"{fam}.jsonl"), "--iterations", "30", "--check-every", "10",
                     "--lr", "1e-3", "--out", str(root / f"run-{fam}")]) == 0
    return root


def test_gen_data_lines_and_repeat(work, tmp_path):
    lines = (work / "push.jsonl").read_text().splitlines()
    assert len(lines) == 41  # header + one line per trajectory
    main(["gen-data", "--family", "push", "--count", "40", "--seed", "7", "--out", str(tmp_path / "again.jsonl")])
    assert (tmp_path / "again.jsonl").read_bytes() == (work / "push.jsonl").read_bytes()
    manifest = json.loads((work / "push.jsonl.manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["config_hash"]) == 12


def test_gen_data_count_zero_is_usage_error(tmp_path):
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG


def test_bad_flags_are_config_errors(tmp_path):
    assert main(["gen-data", "--family", "lever"]) == EXIT_CONFIG
    assert main(["train", "--dataset", str(tmp_path / "missing.jsonl")]) == EXIT_CONFIG


def test_train_run_directory(work):
    run = work / "run-push"
    for name in ("config.json", "model.afrd", "curves.csv", "report.json", "split.json", "loss_curves.png"):
        assert (run / name).is_file()
    report = json.loads((run / "report.json").read_text())
    assert report["seed"] == 0 and report["config_hash"] == json.loads((run / "config.json").read_text())["config_hash"]
    assert [r[0] for r in read_csv(run / "curves.csv")] == ["iteration", "10", "20", "30"]


def test_train_resume_continues_adam(work):
    out = work / "resumed"
    assert main(["train", "--dataset", str(work / "push.jsonl"), "--iterations", "40", "--check-every", "10",
                 "--lr", "1e-3", "--resume", str(work / "run-push" / "model.afrd"), "--no-figures",
                 "--out", str(out)]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["resumed_from_iteration"] > 0
    assert [r[0] for r in read_csv(out / "curves.csv")][-1] == "40"


def test_eval_tables(work):
    out = work / "eval"
    assert main(["eval", "--checkpoint", str(work / "run-push" / "model.afrd"), "--dataset", str(work / "push.jsonl"),
                 "--planners", "--goals", "2", "--out", str(out)]) == 0
    rows = read_csv(out / "planners.csv")
    assert [r[0] for r in rows[1:]] == ["single_full", "single_partial", "multi_partial"]
    assert rows[0][1:] == [f"{c}_{s}" for c in ("astar", "continuous-100", "continuous-300") for s in ("mean_m", "std_m")]
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["seed"] == 0 and "config_hash" in metrics
    assert (out / "planners.png").is_file() and (out / "nstep.png").is_file()


def test_eval_grasp_table(work):
    out = work / "eval-grasp"
    assert main(["eval", "--checkpoint", str(work / "run-grasp" / "model.afrd"), "--dataset",
                 str(work / "grasp.jsonl"), "--no-figures", "--out", str(out)]) == 0
    header = read_csv(out / "grasp.csv")[0]
    for col in ("TP_pct", "TN_pct", "FP_pct", "FN_pct"):
        assert col in header


def test_eval_rerun_is_byte_identical(work):
    args = ["eval", "--checkpoint", str(work / "run-push" / "model.afrd"), "--dataset", str(work / "push.jsonl")]
    assert main([*args, "--out", str(work / "e1")]) == 0
    assert main([*args, "--out", str(work / "e2")]) == 0
    for name in ("metrics.json", "final_position.csv", "nstep.csv", "nstep.png"):
        assert (work / "e1" / name).read_bytes() == (work / "e2" / name).read_bytes()


def test_plan_goal_at_object_is_empty(work):
    out = work / "plan-empty"
    assert main(["plan", "--checkpoint", str(work / "run-push" / "model.afrd"), "--planner", "astar",
                 "--goal", "0.5,0.5", "--out", str(out)]) == EXIT_OK
    plan = json.loads((out / "plan.json").read_text())["plan"]
    assert plan["steps"] == [] and plan["success"]


def test_plan_failure_exit_code(work):
    out = work / "plan-fail"
    assert main(["plan", "--checkpoint", str(work / "run-push" / "model.afrd"), "--planner", "astar",
                 "--mode", "single_full", "--goal", "0.9,0.9", "--out", str(out)]) == EXIT_PLAN
    assert json.loads((out / "plan.json").read_text())["failure"]


def test_plan_bad_object(work):
    assert main(["plan", "--checkpoint", str(work / "run-push" / "model.afrd"), "--goal", "0.5,0.6",
                 "--object", "pyramid:0.05"]) == EXIT_CONFIG
    assert main(["plan", "--checkpoint", str(work / "run-push" / "model.afrd"), "--goal", "0.5"]) == EXIT_CONFIG


def test_plan_trials(work):
    out = work / "trials"
    assert main(["plan", "--checkpoint", str(work / "run-push" / "model.afrd"), "--planner", "continuous",
                 "--mode", "single_partial", "--goals", "3", "--out", str(out)]) == 0
    assert len(read_csv(out / "trials.csv")) == 4
    assert json.loads((out / "summary.json").read_text())["summary"]["n"] == 3


def test_output_root_env(work, tmp_path, monkeypatch):
    monkeypatch.setenv("AFFORDPLAN_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["gen-data", "--count", "10", "--seed", "1"]) == 0
    assert (tmp_path / "root" / "push-10-s1.jsonl").is_file()
