"""Seeded planning trials: planner comparison, direction recovery, replanning scenarios.

Every trial draws its object and any randomness from ``(seed, stream, index)``
so results do not depend on execution order or worker count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from .model import AffordanceModel
from .planner import (
    MODES,
    PlanningFailure,
    astar_plan,
    continuous_plan,
    execute_plan,
    execute_with_replan,
    find_direction,
    plan_or_best,
)
from .sim import TABLE_CENTER, ObjectSpec, Scene, observe, random_object

GOAL_RADII = (0.02, 0.13)
REPLAN_RADII = (0.06, 0.12)
# single-step modes draw goals within one push (plus tolerance) of the object
MODE_GOAL_RADII = {"single_full": (0.02, 0.07), "single_partial": (0.02, 0.07), "multi_partial": GOAL_RADII}
DEFAULT_GOAL_COUNTS = {"single_full": 50, "single_partial": 100, "multi_partial": 80}
PLANNER_COLUMNS = ("astar", "continuous-100", "continuous-300")

_GOALS, _OBJECTS, _PLANNER, _DIRECTION, _REPLAN = range(5)


def _rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(index)]))


def sample_goals(n: int, seed: int, center=TABLE_CENTER, radii=GOAL_RADII) -> np.ndarray:
    """``n`` goals uniform over the annulus area around ``center``."""
    rng = _rng(seed, _GOALS)
    r = np.sqrt(rng.uniform(radii[0] ** 2, radii[1] ** 2, size=n))
    a = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.asarray(center) + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def trial_object(seed: int, index: int) -> ObjectSpec:
    return random_object(_rng(seed, _OBJECTS, index))


@dataclass
class TrialResult:
    index: int
    goal: list
    shape: str
    error: float  # executed final position vs goal
    predicted_error: float
    planned_success: bool
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def make_plan(model, scene: Scene, goal, planner: str, mode: str, seed: int = 0):
    if planner == "astar":
        return astar_plan(model, scene, goal, mode)
    if planner.startswith("continuous"):
        size = int(planner.split("-")[1]) if "-" in planner else 100
        return continuous_plan(model, scene, goal, mode, sample_size=size, seed=seed)
    raise ValueError(f"unknown planner {planner!r}")


def run_trial(model, planner: str, mode: str, seed: int, index: int, goal) -> TrialResult:
    obj = trial_object(seed, index)
    scene = Scene(obj, TABLE_CENTER)
    goal = np.asarray(goal, dtype=np.float64)
    try:
        plan = plan_or_best(lambda: make_plan(model, scene, goal, planner, mode, int(_rng(seed, _PLANNER, index).integers(2**31))))
        planned = plan.success
    except PlanningFailure:
        plan, planned = None, False
    if plan is None:
        final, steps, pred_err = scene, 0, float(np.linalg.norm(goal - scene.position))
    else:
        final, records = execute_plan(scene, plan)
        steps, pred_err = len(records), plan.predicted_final_error
    return TrialResult(index, goal.tolist(), obj.shape, float(np.linalg.norm(np.asarray(final.position) - goal)),
                       pred_err, planned, steps)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_star, [(fn, it) for it in items]))


def _star(args):
    fn, it = args
    return fn(*it)


def planner_trials(model, planner: str, mode: str, n_goals: int, seed: int, workers: int = 1,
                   radii=None) -> list[TrialResult]:
    goals = sample_goals(n_goals, seed, radii=MODE_GOAL_RADII[mode] if radii is None else radii)
    fn = partial(run_trial, model, planner, mode, seed)
    return _map(fn, [(i, g) for i, g in enumerate(goals)], workers)


def summarize(errors) -> dict:
    e = np.asarray(errors, dtype=np.float64)
    n = len(e)
    std = float(e.std(ddof=1)) if n > 1 else 0.0
    return {"mean": float(e.mean()), "std": std, "se": std / math.sqrt(n) if n else float("nan"), "n": n}


def compare_planners(model, seed: int, counts=None, columns=PLANNER_COLUMNS, workers: int = 1,
                     radii=None) -> dict:
    """Mean execution error per (mode, planner) on seeded goal sets shared across planners."""
    counts = dict(DEFAULT_GOAL_COUNTS if counts is None else counts)
    table = {}
    for mode in MODES:
        table[mode] = {}
        for col in columns:
            res = planner_trials(model, col, mode, counts[mode], seed, workers, radii)
            s = summarize([r.error for r in res])
            s["planned_success_rate"] = float(np.mean([r.planned_success for r in res]))
            s["errors"] = [r.error for r in res]
            table[mode][col] = s
    return table


# -- direction recovery ----------------------------------------------------------

def direction_recovery(model: AffordanceModel, n_goals: int, seed: int, radii=GOAL_RADII) -> list[dict]:
    """Angle between the recovered direction and the goal direction for random objects and goals."""
    out = []
    goals = sample_goals(n_goals, seed, center=(0.0, 0.0), radii=radii)
    for i, disp in enumerate(goals):
        obj = trial_object(seed, i)
        depth = observe(Scene(obj, TABLE_CENTER))
        res = find_direction(model, depth, disp, _rng(seed, _DIRECTION, i))
        want = math.atan2(disp[1], disp[0])
        err = abs((res.phi - want + math.pi) % (2 * math.pi) - math.pi)
        out.append({"index": i, "shape": obj.shape, "angle_error": err, "iterations": res.iterations,
                    "restarts": res.restarts})
    return out


# -- replanning scenarios ----------------------------------------------------------

def _offset(rng, radii) -> np.ndarray:
    r = rng.uniform(*radii)
    a = rng.uniform(0.0, 2 * np.pi)
    return np.array([r * math.cos(a), r * math.sin(a)])


def replan_trial(model, kind: str, seed: int, index: int, sample_size: int = 100) -> dict:
    """One scripted perturbation after the first executed step.

    ``goal_change`` moves the goal to a fresh point 0.06-0.12 m from the
    object; ``rollability_flip`` swaps an upright cylinder for a lying one.
    """
    rng = _rng(seed, _REPLAN, index)
    if kind == "goal_change":
        obj = trial_object(seed, index)
    elif kind == "rollability_flip":
        obj = ObjectSpec("cylinder_upright", float(rng.uniform(0.03, 0.06)), float(rng.uniform(0, 2 * np.pi)))
    else:
        raise ValueError(f"unknown scenario {kind!r}")
    scene = Scene(obj, TABLE_CENTER)
    goal = np.asarray(TABLE_CENTER) + _offset(rng, REPLAN_RADII)
    new_offset = _offset(rng, REPLAN_RADII)
    plan_seed = int(rng.integers(2**31))

    def planner(sc, g):
        return continuous_plan(model, sc, g, "multi_partial", sample_size=sample_size, seed=plan_seed)

    goal_provider = scene_hook = None
    if kind == "goal_change":
        def goal_provider(done, g, sc):
            return np.asarray(sc.position) + new_offset if done == 1 else g
    else:
        def scene_hook(done, sc):
            if done == 1:
                return Scene(ObjectSpec("cylinder_lying", sc.object.size, sc.object.yaw), sc.position, sc.height)
            return sc

    try:
        plan = plan_or_best(lambda: planner(scene, goal))
        _, report = execute_with_replan(scene, plan, lambda sc, g: plan_or_best(lambda: planner(sc, g)),
                                        goal_provider=goal_provider, scene_hook=scene_hook)
    except PlanningFailure as exc:
        return {"index": index, "kind": kind, "replans": -1, "success": False, "final_error": float("nan"),
                "failure": str(exc)}
    return {"index": index, "kind": kind, "replans": len(report.replans), "success": report.success,
            "final_error": report.final_error, "reasons": [r["reasons"] for r in report.replans]}


def replan_trials(model, kind: str, n_trials: int, seed: int, workers: int = 1) -> list[dict]:
    fn = partial(replan_trial, model, kind, seed)
    return _map(fn, [(i,) for i in range(n_trials)], workers)
