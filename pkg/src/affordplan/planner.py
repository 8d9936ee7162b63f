"""Planners over learned push effects.

Two planners share the same plan types:

* :func:`astar_plan`, best-first search over a discrete set of push
  directions and partial-execution fractions;
* :func:`continuous_plan`, which finds a push direction by gradient descent
  on the effect-channel input and then cuts the push at the phase whose
  predicted displacement lands closest to the goal.

:func:`execute_with_replan` runs a plan in the simulator and replans when the
object drifts from its predicted position, the goal moves or the object's
perceived rollability flips.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ACTION_ONLY, EFFECT_ONLY, AffordanceModel
from .sim import (
    PUSH_DISTANCE,
    PUSH_RADIUS,
    ActionCommand,
    Scene,
    execute,
    looks_rollable,
    observe,
    push_reachable,
)

FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
N_DIRECTIONS = 36
SUCCESS_TOLERANCE = 0.02
RESIDUAL_WEIGHT = 2.0
CONTINUOUS_TOLERANCE = 0.005
CLOSED_RESOLUTION = 0.01
NODE_BUDGET = 50_000
DEVIATION_THRESHOLD = 0.01
MAX_CHAIN = 10


@dataclass(frozen=True)
class Mode:
    name: str
    fractions: tuple
    max_depth: int
    partial: bool


MODES = {
    "single_full": Mode("single_full", (1.0,), 1, False),
    "single_partial": Mode("single_partial", FRACTIONS, 1, True),
    "multi_partial": Mode("multi_partial", FRACTIONS, 3, True),
}


def get_mode(name: str) -> Mode:
    try:
        return MODES[name]
    except KeyError:
        raise ValueError(f"unknown planning mode {name!r}; expected one of {sorted(MODES)}") from None


class PlanningFailure(RuntimeError):
    """No plan met the goal; ``best_plan`` is the closest one found."""

    def __init__(self, message: str, best_plan: "Plan | None" = None):
        super().__init__(message)
        self.best_plan = best_plan


@dataclass
class PlanStep:
    command: ActionCommand
    start: np.ndarray
    phases: np.ndarray  # predicted trajectory phases, up to the cut
    effects: np.ndarray  # predicted displacement from ``start`` at each phase

    def __post_init__(self):
        if len(self.phases) == 0:
            raise ValueError("plan step needs a non-empty predicted trajectory")
        if not 0.0 < self.command.fraction <= 1.0:
            raise ValueError(f"fraction {self.command.fraction} outside (0, 1]")

    @property
    def displacement(self) -> np.ndarray:
        return self.effects[-1, :2]

    @property
    def end(self) -> np.ndarray:
        return self.start + self.displacement

    def to_dict(self) -> dict:
        return {
            "command": self.command.to_dict(),
            "start": self.start.tolist(),
            "predicted_end": self.end.tolist(),
            "predicted_trajectory": [[float(t), *map(float, e)] for t, e in zip(self.phases, self.effects)],
        }


@dataclass
class Plan:
    steps: list[PlanStep]
    start: np.ndarray
    goal: np.ndarray
    planner: str
    mode: str
    success: bool = True
    nodes_expanded: int = 0
    info: dict = field(default_factory=dict)

    @property
    def predicted_end(self) -> np.ndarray:
        return self.steps[-1].end if self.steps else self.start

    @property
    def predicted_final_error(self) -> float:
        return float(np.linalg.norm(self.predicted_end - self.goal))

    @property
    def cost(self) -> float:
        c = 0.0
        for s in self.steps:
            c += float(np.linalg.norm(s.displacement))
        return c

    def to_dict(self) -> dict:
        return {
            "planner": self.planner,
            "mode": self.mode,
            "success": self.success,
            "start": self.start.tolist(),
            "goal": self.goal.tolist(),
            "predicted_final_error": self.predicted_final_error,
            "cost": self.cost,
            "nodes_expanded": self.nodes_expanded,
            "info": self.info,
            "steps": [s.to_dict() for s in self.steps],
        }


def push_variant(depth) -> str:
    """Pick the push primitive from what the depth image shows."""
    return "push_rollable" if looks_rollable(depth) else "push_plain"


def push_start_action(theta: float, action_dim: int) -> np.ndarray:
    """Gripper offset at phase 0 of a push along ``theta``."""
    a = np.zeros(action_dim)
    a[:2] = PUSH_RADIUS * math.cos(theta), PUSH_RADIUS * math.sin(theta)
    return a


# -- discrete search --------------------------------------------------------

@dataclass
class DisplacementTable:
    """Predicted displacement for every (direction, fraction) pair of one object.

    The object-centred image does not change under translation, so one table
    serves every node of a search.
    """

    thetas: np.ndarray  # [D]
    fractions: np.ndarray  # [F]
    phases: np.ndarray  # [T], union of a uniform grid and the fractions
    trajectories: np.ndarray  # [D, T, 2]
    end_index: np.ndarray  # [F] index into phases

    @classmethod
    def build(cls, model: AffordanceModel, depth, fractions=FRACTIONS, n_directions: int = N_DIRECTIONS,
              grid: int = 25) -> "DisplacementTable":
        thetas = 2 * np.pi * np.arange(n_directions) / n_directions
        fractions = np.asarray(fractions, dtype=np.float64)
        phases = np.union1d(np.linspace(0.0, 1.0, grid), fractions)
        zero_e = np.zeros(model.config.effect_dim)
        obs_sets = []
        for th in thetas:
            obs_sets.append([(0.0, push_start_action(float(th), model.config.action_dim), zero_e)])
        traj = model.predict_effects_batch(depth, obs_sets, ACTION_ONLY, phases)[:, :, :2]
        end_index = np.searchsorted(phases, fractions)
        return cls(thetas, fractions, phases, traj, end_index)

    @property
    def displacements(self) -> np.ndarray:
        """[D, F, 2]"""
        return self.trajectories[:, self.end_index]

    def step(self, i: int, j: int, start, variant: str) -> PlanStep:
        k = int(self.end_index[j])
        cmd = ActionCommand(variant, theta=float(self.thetas[i]), fraction=float(self.fractions[j]))
        return PlanStep(cmd, np.asarray(start, dtype=np.float64), self.phases[: k + 1], self.trajectories[i, : k + 1])


@dataclass
class SearchNode:
    position: np.ndarray
    g_cost: float
    depth: int
    parent: "SearchNode | None" = None
    action: tuple | None = None  # (direction index, fraction index)


def expand(node: SearchNode, table: DisplacementTable, scene: Scene, variant: str):
    """Reachable (direction, fraction) branches from ``node`` with predicted end positions.

    Returns (indices [B, 2], end positions [B, 2], costs [B]).
    """
    ok = push_reachable(node.position, table.thetas, table.fractions, scene.object.contact_offset,
                        variant == "push_rollable")
    disp = table.displacements
    idx = np.argwhere(ok)
    d = disp[idx[:, 0], idx[:, 1]]
    return idx, node.position[None, :] + d, np.linalg.norm(d, axis=1)


def _reconstruct(node: SearchNode, table: DisplacementTable, variant: str) -> list[PlanStep]:
    chain = []
    while node.parent is not None:
        chain.append(node)
        node = node.parent
    return [table.step(*n.action, n.parent.position, variant) for n in reversed(chain)]


def astar_plan(model: AffordanceModel, scene: Scene, goal, mode: str = "multi_partial", *,
               tolerance: float = SUCCESS_TOLERANCE, residual_weight: float = RESIDUAL_WEIGHT,
               closed_resolution: float | None = CLOSED_RESOLUTION, node_budget: int = NODE_BUDGET,
               max_depth: int | None = None, n_directions: int = N_DIRECTIONS,
               table: DisplacementTable | None = None) -> Plan:
    """Best-first search over predicted push outcomes.

    g is the predicted displacement length so far and h the Euclidean
    distance to the goal. Any node within ``tolerance`` may stop, which costs
    ``residual_weight`` times its remaining distance; the returned plan
    minimises ``g + residual_weight * residual`` over plans that end within
    tolerance. With ``residual_weight >= 1`` the heuristic stays consistent.
    ``closed_resolution=None`` keys the closed set on exact positions.
    """
    if residual_weight < 1.0:
        raise ValueError("residual_weight must be >= 1 to keep the heuristic consistent")
    m = get_mode(mode)
    depth_limit = m.max_depth if max_depth is None else max_depth
    goal = np.asarray(goal, dtype=np.float64)
    depth = observe(scene)
    variant = push_variant(depth)
    if table is None:
        table = DisplacementTable.build(model, depth, m.fractions, n_directions)
    start = np.asarray(scene.position, dtype=np.float64)

    def dist(p):
        return float(np.hypot(goal[0] - p[0], goal[1] - p[1]))

    def key(p, d):
        if closed_resolution is None:
            return (float(p[0]), float(p[1]), d)
        return (int(math.floor(p[0] / closed_resolution)), int(math.floor(p[1] / closed_resolution)), d)

    root = SearchNode(start, 0.0, 0)
    tie = itertools.count()
    heap = [(dist(start), next(tie), False, root)]
    closed: set = set()
    best, best_dist = root, dist(start)
    expanded = 0
    while heap:
        f, _, terminal, node = heapq.heappop(heap)
        if terminal:
            plan = Plan(_reconstruct(node, table, variant), start, goal, "astar", mode, True, expanded)
            plan.info["objective"] = f
            return plan
        k = key(node.position, node.depth)
        if k in closed:
            continue
        closed.add(k)
        d = dist(node.position)
        if d < best_dist:
            best, best_dist = node, d
        if d <= tolerance:
            heapq.heappush(heap, (node.g_cost + residual_weight * d, next(tie), True, node))
        if node.depth >= depth_limit:
            continue
        if expanded >= node_budget:
            continue
        expanded += 1
        idx, ends, costs = expand(node, table, scene, variant)
        for (i, j), p, c in zip(idx, ends, costs):
            if key(p, node.depth + 1) in closed:
                continue
            child = SearchNode(p, node.g_cost + float(c), node.depth + 1, node, (int(i), int(j)))
            heapq.heappush(heap, (child.g_cost + dist(p), next(tie), False, child))
    best_plan = Plan(_reconstruct(best, table, variant), start, goal, "astar", mode, False, expanded)
    raise PlanningFailure(
        f"no plan within {tolerance} m of the goal (depth {depth_limit}, {expanded} nodes expanded)", best_plan
    )


# -- continuous planner -----------------------------------------------------

@dataclass
class DirectionResult:
    phi: float  # direction of the predicted displacement
    effect_input: np.ndarray  # optimised effect-channel input, meters
    predicted: np.ndarray  # predicted displacement at t=1, meters
    loss: float
    iterations: int
    restarts: int


def find_direction(model: AffordanceModel, depth_or_feat, goal_displacement, rng: np.random.Generator, *,
                   step_size: float = 0.5, max_iters: int = 200, min_improvement: float = 1e-6,
                   divergence_steps: int = 10, max_restarts: int = 5, radius: float = PUSH_DISTANCE,
                   init_angle: float | None = None) -> DirectionResult:
    """Gradient descent on the effect input so the predicted end matches the goal.

    Works in normalised effect units. Starts from a random point on the
    circle of one full push length (or ``init_angle`` for the first attempt).
    """
    feat = model._feat(depth_or_feat)
    ch = model.channels
    goal = np.zeros(model.config.effect_dim)
    goal[:2] = np.asarray(goal_displacement, dtype=np.float64)[:2]
    target = ch.norm_effect(goal)
    total_iters = 0
    for restart in range(max_restarts + 1):
        angle = init_angle if (restart == 0 and init_angle is not None) else float(rng.uniform(0.0, 2 * np.pi))
        e0 = np.zeros(model.config.effect_dim)
        e0[:2] = radius * math.cos(angle), radius * math.sin(angle)
        e = ch.norm_effect(e0)
        loss, grad, pred = model.effect_input_gradient(feat, e, target, normalized=True)
        rising = 0
        diverged = False
        for _ in range(max_iters):
            e_new = e - step_size * grad
            loss_new, grad_new, pred_new = model.effect_input_gradient(feat, e_new, target, normalized=True)
            total_iters += 1
            rising = rising + 1 if loss_new > loss else 0
            improvement = loss - loss_new
            e, loss, grad, pred = e_new, loss_new, grad_new, pred_new
            if rising >= divergence_steps or not math.isfinite(loss):
                diverged = True
                break
            if abs(improvement) < min_improvement:
                break
        if not diverged:
            pred_raw = ch.denorm_effect(pred)
            return DirectionResult(
                phi=float(math.atan2(pred_raw[1], pred_raw[0])),
                effect_input=ch.denorm_effect(e),
                predicted=pred_raw[:2],
                loss=float(loss),
                iterations=total_iters,
                restarts=restart,
            )
    raise PlanningFailure(f"direction search diverged after {max_restarts} restarts")


def sweep_partial(model: AffordanceModel, depth_or_feat, phi: float, goal_displacement, sample_size: int = 100,
                  partial: bool = True, radius: float = PUSH_DISTANCE) -> tuple[float, np.ndarray, np.ndarray]:
    """Query the push along ``phi`` at ``sample_size`` phases and cut at the closest one.

    Returns (fraction, phases up to the cut, predicted displacements up to
    the cut). The full action is kept when the closest phase is the last.
    """
    if sample_size < 2:
        raise ValueError("sample_size must be >= 2")
    e_end = np.zeros(model.config.effect_dim)
    e_end[:2] = radius * math.cos(phi), radius * math.sin(phi)
    obs = [(1.0, np.zeros(model.config.action_dim), e_end)]
    ts = np.linspace(0.0, 1.0, sample_size)
    eff = model.predict_effects_batch(depth_or_feat, [obs], EFFECT_ONLY, ts)[0]
    k = sample_size - 1
    if partial:
        d = np.linalg.norm(eff[:, :2] - np.asarray(goal_displacement)[:2], axis=1)
        k = max(int(np.argmin(d)), 1)
    return float(ts[k]), ts[: k + 1], eff[: k + 1]


def continuous_plan(model: AffordanceModel, scene: Scene, goal, mode: str | None = "multi_partial", *,
                    sample_size: int = 100, seed: int = 0, max_actions: int | None = None,
                    tolerance: float = CONTINUOUS_TOLERANCE, success_tolerance: float = SUCCESS_TOLERANCE,
                    **direction_kw) -> Plan:
    """Chain direction search and partial sweeps from the predicted end of each step."""
    if mode is None:
        partial, cap = True, MAX_CHAIN
    else:
        m = get_mode(mode)
        partial, cap = m.partial, m.max_depth
    if max_actions is not None:
        cap = max_actions
    rng = np.random.default_rng(seed)
    goal = np.asarray(goal, dtype=np.float64)
    depth = observe(scene)
    variant = push_variant(depth)
    feat = model.encode_image(depth)
    start = np.asarray(scene.position, dtype=np.float64)
    plan = Plan([], start, goal, f"continuous-{sample_size}", mode or "chain", True)
    pos = start
    while len(plan.steps) < cap:
        dist = float(np.linalg.norm(goal - pos))
        if dist <= tolerance:
            break
        try:
            dr = find_direction(model, feat, goal - pos, rng, **direction_kw)
        except PlanningFailure as exc:
            plan.success = False
            raise PlanningFailure(str(exc), plan) from None
        fraction, phases, effects = sweep_partial(model, feat, dr.phi, goal - pos, sample_size, partial)
        theta = (dr.phi + math.pi) % (2 * math.pi)
        if not push_reachable(pos, [theta], [fraction], scene.object.contact_offset, variant == "push_rollable")[0, 0]:
            plan.success = False
            raise PlanningFailure(f"push at theta={theta:.3f} from {pos.tolist()} leaves the workspace", plan)
        step = PlanStep(ActionCommand(variant, theta=theta, fraction=fraction), pos, phases, effects)
        if np.linalg.norm(goal - step.end) >= dist:
            break  # no predicted progress
        plan.steps.append(step)
        plan.nodes_expanded += dr.iterations
        pos = step.end
    plan.success = plan.predicted_final_error <= success_tolerance
    if not plan.success:
        raise PlanningFailure(
            f"predicted final error {plan.predicted_final_error:.4f} m after {len(plan.steps)} actions", plan
        )
    return plan


def plan_or_best(fn: Callable[[], Plan]) -> Plan:
    try:
        return fn()
    except PlanningFailure as exc:
        if exc.best_plan is None:
            raise
        return exc.best_plan


# -- execution ----------------------------------------------------------------

@dataclass
class StepRecord:
    index: int
    command: dict
    start: list
    predicted_end: list
    actual_end: list
    deviation: float


@dataclass
class ExecutionReport:
    start: list
    goal: list
    final_position: list
    final_error: float
    success: bool
    steps: list[StepRecord] = field(default_factory=list)
    replans: list[dict] = field(default_factory=list)
    plans: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "goal": self.goal,
            "final_position": self.final_position,
            "final_error": self.final_error,
            "success": self.success,
            "steps": [vars(s) for s in self.steps],
            "replans": self.replans,
            "plans": self.plans,
        }


def execute_plan(scene: Scene, plan: Plan) -> tuple[Scene, list[StepRecord]]:
    """Open-loop execution of every step."""
    records = []
    for i, step in enumerate(plan.steps):
        start = np.asarray(scene.position)
        scene = execute(scene, step.command).final_scene
        actual = np.asarray(scene.position)
        records.append(StepRecord(i, step.command.to_dict(), start.tolist(), step.end.tolist(), actual.tolist(),
                                  float(np.linalg.norm(actual - step.end))))
    return scene, records


def execute_with_replan(scene: Scene, plan: Plan, planner: Callable[[Scene, np.ndarray], Plan], *,
                        goal_provider: Callable[[int, np.ndarray, Scene], np.ndarray] | None = None,
                        scene_hook: Callable[[int, Scene], Scene] | None = None,
                        deviation_threshold: float = DEVIATION_THRESHOLD, tolerance: float = SUCCESS_TOLERANCE,
                        max_replans: int = 10) -> tuple[Scene, ExecutionReport]:
    """Execute step by step; discard the rest of the plan and replan when needed.

    ``goal_provider(steps_done, goal, scene)`` may return a new goal, and
    ``scene_hook(steps_done, scene)`` may alter the world (for scripted
    perturbations). Replan failures propagate as :class:`PlanningFailure`.
    """
    goal = np.asarray(plan.goal, dtype=np.float64)
    report = ExecutionReport(list(map(float, scene.position)), goal.tolist(), [], 0.0, False, plans=[plan.to_dict()])
    rollable = looks_rollable(observe(scene))
    done = 0
    i = 0
    while i < len(plan.steps):
        step = plan.steps[i]
        start = np.asarray(scene.position, dtype=np.float64)
        scene = execute(scene, step.command).final_scene
        actual = np.asarray(scene.position, dtype=np.float64)
        dev = float(np.linalg.norm(actual - step.end))
        report.steps.append(StepRecord(done, step.command.to_dict(), start.tolist(), step.end.tolist(),
                                       actual.tolist(), dev))
        done += 1
        i += 1
        if scene_hook is not None:
            scene = scene_hook(done, scene)
        reasons = []
        if dev > deviation_threshold:
            reasons.append("deviation")
        if goal_provider is not None:
            new_goal = np.asarray(goal_provider(done, goal, scene), dtype=np.float64)
            if not np.array_equal(new_goal, goal):
                reasons.append("goal_changed")
                goal = new_goal
        now_rollable = looks_rollable(observe(scene))
        if now_rollable != rollable:
            reasons.append("rollability_changed")
            rollable = now_rollable
        if not reasons:
            continue
        at_goal = float(np.linalg.norm(np.asarray(scene.position) - goal)) <= tolerance
        if i >= len(plan.steps) and at_goal:
            continue
        if len(report.replans) >= max_replans:
            break
        report.replans.append({"after_step": done, "reasons": reasons, "position": list(map(float, scene.position)),
                               "goal": goal.tolist()})
        plan = planner(scene, goal)
        report.plans.append(plan.to_dict())
        i = 0
    pos = np.asarray(scene.position, dtype=np.float64)
    report.goal = goal.tolist()
    report.final_position = pos.tolist()
    report.final_error = float(np.linalg.norm(pos - goal))
    report.success = report.final_error <= tolerance
    return scene, report
