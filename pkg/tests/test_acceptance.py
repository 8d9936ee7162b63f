"""Acceptance checks. Each test prints one PASS/FAIL line in the terminal summary.

Desk-scale models are trained once and cached under ``.cache/desk`` (override
with ``AFFORDPLAN_DESK_CACHE``); a cold cache costs roughly 40 minutes of CPU
per model. Run this module alone with ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import criterion, table
from affordplan import evaluation as ev
from affordplan import planner as pl
from affordplan import runs, sim
from affordplan.cli import main as cli_main
from affordplan.dataset import split
from affordplan.model import ACTION_ONLY, EFFECT_ONLY, EVEN, AffordanceModel, ModelConfig, shape_trace
from affordplan.trainer import evaluate_final_position, evaluate_grasp, evaluate_nstep
from gradcheck import composed_trial, input_gradient_trial, primitive_cases, small_model
from oracles import brute_force_objective
from test_model import EXPECTED_TRACE

CACHE = Path(os.environ.get("AFFORDPLAN_DESK_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "desk"))

TRIALS = 100
PRIM_TOL, COMPOSED_TOL = 1e-4, 1e-3
FINAL_POS_LIMIT = 0.01
GRASP_ACCURACY = 0.95
MICRO_INSTANCES = 24
DIRECTION_TOL, DIRECTION_RATE, DIRECTION_GOALS = 0.05, 0.95, 100
REPLAN_TRIALS, REPLAN_RATE = 50, 0.90
NSTEP_RATIO = 2.0
EVAL_SEED = 0

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def push_runs():
    return [runs.desk_model(CACHE, "push", s) for s in runs.DESK_SEEDS]


@pytest.fixture(scope="module")
def push_model():
    return runs.desk_model(CACHE, "push", runs.DESK_SEEDS[0])[0]


@pytest.fixture(scope="module")
def planner_table(push_model):
    return ev.compare_planners(push_model, EVAL_SEED)


def _test_split(run):
    _, ds, sp, _ = run
    return [ds[i] for i in sp.test]


# 1 -------------------------------------------------------------------------------

@criterion(1, "gradient correctness")
def test_gradients():
    t0 = time.perf_counter()
    worst = {}
    for name, trial in primitive_cases().items():
        worst[name] = max(trial(np.random.default_rng([1, i])) for i in range(TRIALS))
    model = small_model(0)
    comp = max(composed_trial(model, np.random.default_rng([2, i])) for i in range(TRIALS))
    inp = max(input_gradient_trial(model, np.random.default_rng([3, i])) for i in range(TRIALS))
    elapsed = time.perf_counter() - t0
    prim = max(worst.values())
    ok = prim <= PRIM_TOL and comp <= COMPOSED_TOL and inp <= COMPOSED_TOL and elapsed < 60
    return ok, (f"worst primitive rel-err {prim:.1e} ({max(worst, key=worst.get)}), composed {comp:.1e}, "
                f"effect-input {inp:.1e}, {TRIALS} trials each, {elapsed:.0f} s")


# 2 -------------------------------------------------------------------------------

@criterion(2, "architecture fidelity")
def test_architecture():
    trace = shape_trace(AffordanceModel.create(ModelConfig()))
    mismatch = [(a, b) for a, b in zip(trace, EXPECTED_TRACE) if a != b]
    ok = trace == EXPECTED_TRACE
    return ok, f"{len(trace)} layers traced, {len(mismatch)} mismatches; 48x48x2 -> 16, 3 -> 128, 145 -> 1024, decoders -> 4"


# 3 -------------------------------------------------------------------------------

@criterion(3, "exact invariants")
def test_invariants():
    rng = np.random.default_rng(3)
    model = AffordanceModel.create(ModelConfig(), seed=3)
    checks = {"permutation": 0, "zero_weight": 0, "prefix": 0, "split": 0}
    fails = dict.fromkeys(checks, 0)
    ts = np.linspace(0, 1, 25)
    for _ in range(20):
        depth = sim.render_depth(sim.Scene(sim.random_object(rng)))
        obs = [(float(rng.uniform()), rng.uniform(-0.2, 0.2, 2), rng.uniform(-0.05, 0.05, 2))
               for _ in range(int(rng.integers(2, 6)))]
        perm = [obs[i] for i in rng.permutation(len(obs))]
        a = model.predict_trajectory(depth, obs, EVEN, ts)
        b = model.predict_trajectory(depth, perm, EVEN, ts)
        checks["permutation"] += 1
        fails["permutation"] += not (np.array_equal(a.effect.mean, b.effect.mean)
                                     and np.array_equal(a.action.std, b.action.std))
        # a channel with zero weight must not influence anything downstream
        for w, scramble in ((ACTION_ONLY, "effect"), (EFFECT_ONLY, "action")):
            noisy = [(t, rng.uniform(-9, 9, 2) if scramble == "action" else a_,
                      rng.uniform(-9, 9, 2) if scramble == "effect" else e_) for t, a_, e_ in obs]
            x = model.predict_trajectory(depth, obs, w, ts)
            y = model.predict_trajectory(depth, noisy, w, ts)
            checks["zero_weight"] += 1
            fails["zero_weight"] += not (np.array_equal(x.effect.mean, y.effect.mean)
                                         and np.array_equal(x.action.mean, y.action.mean))
    for shape in sim.SHAPES:
        for variant in ("push_plain", "push_rollable"):
            scene = sim.Scene(sim.ObjectSpec(shape, 0.05, 0.3))
            full = sim.exec_push(scene, 1.3, 1.0, variant).trajectory
            for f in np.linspace(0.01, 1.0, 100):
                part = sim.exec_push(scene, 1.3, float(f), variant).trajectory
                n = sim.kept_samples(float(f), 25)
                checks["prefix"] += 1
                fails["prefix"] += not (len(part) == n and np.array_equal(part.effects, full.effects[:n])
                                        and np.array_equal(part.actions, full.actions[:n]))
    for n in (10, 50, 100, 500, 1000):
        for seed in range(5):
            sp = split(n, seed)
            parts = [set(sp.train), set(sp.validation), set(sp.test)]
            checks["split"] += 1
            fails["split"] += not (sum(map(len, parts)) == n and set().union(*parts) == set(range(n))
                                   and (len(sp.train), len(sp.validation), len(sp.test)) == (8 * n // 10, n // 10, n // 10))
    ok = not any(fails.values())
    return ok, ", ".join(f"{k} {checks[k] - fails[k]}/{checks[k]}" for k in checks)


# 4 -------------------------------------------------------------------------------

@criterion(4, "learning at desk scale")
def test_desk_learning(push_runs):
    errs = [evaluate_final_position(r[0], _test_split(r))["mean"] for r in push_runs]
    best_its = [r[3]["training"]["best_iteration"] for r in push_runs]
    ok = all(e < FINAL_POS_LIMIT for e in errs)
    per_seed = ", ".join(f"{e:.4f}" for e in errs)
    return ok, (f"held-out final-position error {np.mean(errs):.4f} +- {np.std(errs):.4f} m over seeds "
                f"{list(runs.DESK_SEEDS)} ({per_seed}; best iterations {best_its}), limit {FINAL_POS_LIMIT} m")


# 5 -------------------------------------------------------------------------------

@criterion(5, "grasp classification")
def test_grasp():
    model, ds, sp, _ = runs.desk_model(CACHE, "grasp", 0)
    res = evaluate_grasp(model, [ds[i] for i in sp.test])
    lines = ["grasp confusion (test split, 0.1 m height rule)",
             f"{'object':<14}{'n':>4}{'error (m)':>20}{'TP%':>8}{'TN%':>8}{'FP%':>8}{'FN%':>8}"]
    for group in ("rollable", "non_rollable", "all"):
        g = res[group]
        if g:
            lines.append(f"{group:<14}{g['n']:>4}{g['error_mean']:>11.4f} +- {g['error_std']:.4f}"
                         f"{g['tp_pct']:>8.2f}{g['tn_pct']:>8.2f}{g['fp_pct']:>8.2f}{g['fn_pct']:>8.2f}")
    table("\n".join(lines))
    acc = res["all"]["accuracy"]
    return acc >= GRASP_ACCURACY, f"accuracy {acc:.3f} on {res['all']['n']} test grasps (limit {GRASP_ACCURACY})"


# 6 -------------------------------------------------------------------------------

@criterion(6, "A* optimality oracle")
def test_astar_oracle(push_model):
    rng = np.random.default_rng(6)
    agree = solved = 0
    for i in range(MICRO_INSTANCES):
        obj = sim.random_object(rng)
        scene = sim.Scene(obj, tuple(np.asarray(sim.TABLE_CENTER) + rng.uniform(-0.1, 0.1, 2)))
        depth = sim.observe(scene)
        table_ = pl.DisplacementTable.build(push_model, depth)
        reach = np.linalg.norm(table_.displacements, axis=2).max()
        ang = rng.uniform(0, 2 * np.pi)
        goal = np.asarray(scene.position) + rng.uniform(0.3, 1.8) * reach * np.array([np.cos(ang), np.sin(ang)])
        want = brute_force_objective(table_, scene.position, goal, obj.contact_offset,
                                     pl.push_variant(depth) == "push_rollable", max_depth=2)
        try:
            plan = pl.astar_plan(push_model, scene, goal, "multi_partial", max_depth=2,
                                 closed_resolution=None, table=table_)
            got = plan.info["objective"]
            solved += 1
        except pl.PlanningFailure:
            got = np.inf
        agree += got == want
    return agree == MICRO_INSTANCES, (f"{agree}/{MICRO_INSTANCES} instances match brute force exactly "
                                      f"(depth <= 2, 36x5 grid, {solved} solvable)")


# 7, 8 ------------------------------------------------------------------------------

def _planner_table_text(t) -> str:
    cols = ev.PLANNER_COLUMNS
    lines = ["planner comparison: mean +- std execution error (m)",
             f"{'mode':<16}" + "".join(f"{c:>24}" for c in cols)]
    for mode in t:
        lines.append(f"{mode:<16}" + "".join(
            f"{t[mode][c]['mean']:>13.4f} +- {t[mode][c]['std']:.4f}" for c in cols))
    return "\n".join(lines)


def _beats(a, b):
    """a < b by more than one standard error of the difference."""
    se = math.hypot(a["se"], b["se"])
    return b["mean"] - a["mean"] > se, b["mean"] - a["mean"], se


@criterion(7, "A* mode ordering")
def test_astar_ordering(planner_table):
    table(_planner_table_text(planner_table))
    t = {m: planner_table[m]["astar"] for m in planner_table}
    ok1, d1, se1 = _beats(t["single_partial"], t["single_full"])
    ok2, d2, se2 = _beats(t["multi_partial"], t["single_full"])
    return ok1 and ok2, (f"single_full {t['single_full']['mean']:.4f}, single_partial {t['single_partial']['mean']:.4f} "
                         f"(gap {d1:.4f} vs SE {se1:.4f}), multi_partial {t['multi_partial']['mean']:.4f} "
                         f"(gap {d2:.4f} vs SE {se2:.4f})")


@criterion(8, "continuous planner ordering")
def test_continuous_ordering(planner_table):
    row = planner_table["multi_partial"]
    a, c1, c3 = row["astar"], row["continuous-100"], row["continuous-300"]
    ok = c1["mean"] < a["mean"] and c3["mean"] < c1["mean"]
    gain = np.subtract(c1["errors"], c3["errors"])
    se = float(gain.std(ddof=1) / math.sqrt(len(gain)))
    return ok, (f"multi_partial over {a['n']} paired goals: astar {a['mean']:.5f} +- {a['std']:.5f}, "
                f"continuous-100 {c1['mean']:.5f} +- {c1['std']:.5f}, continuous-300 {c3['mean']:.5f} +- {c3['std']:.5f} m; "
                f"paired 100->300 gain {gain.mean() * 1e3:.4f} mm (SE {se * 1e3:.4f} mm)")


# 9 ---------------------------------------------------------------------------------

@criterion(9, "direction recovery")
def test_direction_recovery(push_model):
    res = ev.direction_recovery(push_model, DIRECTION_GOALS, EVAL_SEED)
    errs = np.array([r["angle_error"] for r in res])
    rate = float(np.mean(errs <= DIRECTION_TOL))
    return rate >= DIRECTION_RATE, (f"{rate:.0%} of {len(errs)} goals within {DIRECTION_TOL} rad "
                                    f"(median {np.median(errs):.4f}, max {errs.max():.3f} rad)")


# 10 --------------------------------------------------------------------------------

@criterion(10, "replanning contract")
def test_replanning(push_model):
    parts, ok = [], True
    for kind, reason in (("goal_change", "goal_changed"), ("rollability_flip", "rollability_changed")):
        res = ev.replan_trials(push_model, kind, REPLAN_TRIALS, EVAL_SEED)
        triggered = sum(r["replans"] >= 1 and reason in r["reasons"][0] for r in res)
        good = sum(r["replans"] == 1 and r["success"] for r in res)
        ok &= triggered == len(res) and good / len(res) >= REPLAN_RATE
        parts.append(f"{kind}: event replanned in {triggered}/{len(res)}, exactly one replan and success in "
                     f"{good}/{len(res)}")
    return ok, "; ".join(parts)


# 11 --------------------------------------------------------------------------------

@criterion(11, "n-step degradation")
def test_nstep(push_runs):
    ratios, rows = [], []
    for seed, r in zip(runs.DESK_SEEDS, push_runs):
        trajs = _test_split(r)
        e1, e5 = evaluate_nstep(r[0], trajs, 1), evaluate_nstep(r[0], trajs, 5)
        ratios.append(e5["mean"] / e1["mean"])
        rows.append(f"seed {seed}: {e1['mean'] * 100:.3f} -> {e5['mean'] * 100:.3f} cm")
    ok = max(ratios) <= NSTEP_RATIO
    return ok, f"n=5 / n=1 error ratio max {max(ratios):.2f} (limit {NSTEP_RATIO}); " + ", ".join(rows)


# 12 --------------------------------------------------------------------------------

@criterion(12, "byte-identical reruns")
def test_reproducible(tmp_path, monkeypatch):
    # each copy runs from its own directory with relative paths, since reports record the paths they were given
    def run_all(root: Path):
        root.mkdir()
        monkeypatch.chdir(root)
        assert cli_main(["gen-data", "--count", "30", "--seed", "3", "--out", "push.jsonl"]) == 0
        assert cli_main(["train", "--dataset", "push.jsonl", "--iterations", "200", "--check-every", "50",
                         "--out", "run"]) == 0
        ckpt = "run/model.afrd"
        assert cli_main(["eval", "--checkpoint", ckpt, "--dataset", "push.jsonl", "--planners", "--goals", "2",
                         "--out", "eval"]) == 0
        assert cli_main(["plan", "--checkpoint", ckpt, "--goal", "0.55,0.47", "--execute", "--out", "plan"]) in (0, 3)
        assert cli_main(["plan", "--checkpoint", ckpt, "--planner", "astar", "--goals", "3", "--out", "trials"]) == 0
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    a, b = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    differ = sorted(str(k) for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differ
    return ok, f"{len(a)} output files from gen-data/train/eval/plan compared, {len(differ)} differ {differ[:3]}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", *sys.argv[1:]]))
