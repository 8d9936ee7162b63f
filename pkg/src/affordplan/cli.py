"""affordplan command line: gen-data, train, eval, plan.

Exit status: 0 success, 2 configuration error, 3 planning failure.
Outputs land under ``--out`` or, by default, under ``$AFFORDPLAN_OUTPUT_ROOT``
(``./runs`` when unset).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import evaluation, plotting, runs
from .model import AffordanceModel
from .planner import MODES, PlanningFailure, astar_plan, continuous_plan, execute_plan, plan_or_best
from .sim import SHAPES, TABLE_CENTER, ObjectSpec, Scene, gen_dataset
from .trainer import TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_PLAN = 0, 2, 3
OUTPUT_ROOT_ENV = "AFFORDPLAN_OUTPUT_ROOT"


class ConfigError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else output_root() / default_name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _flags(args, skip=("func", "out")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return p


# -- gen-data -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    path = Path(args.out) if args.out else output_root() / f"{args.family}-{args.count}-s{args.seed}.jsonl"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = gen_dataset(args.count, args.family, args.seed, args.samples, args.misuse_rate)
        ds_mod.save(data, path)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    flags = _flags(args)
    manifest = {"seed": args.seed, "config_hash": runs.config_hash(flags), "flags": flags,
                "digest": data.digest(), "count": len(data)}
    runs.dump_json(manifest, path.with_suffix(path.suffix + ".manifest.json"))
    print(f"wrote {len(data)} {args.family} trajectories to {path}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def cmd_train(args) -> int:
    data = ds_mod.load(_existing(args.dataset, "dataset"))
    try:
        cfg = TrainConfig(iterations=args.iterations, learning_rate=args.lr, seed=args.seed,
                          check_every=args.check_every, patience=args.patience)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args, f"train-{data.family}-s{args.seed}")
    sp = ds_mod.split(data, args.split_seed)
    ds_mod.save_split(sp, out / "split.json")
    resume = _existing(args.resume, "checkpoint") if args.resume else None
    _, report = runs.run_training(data, sp, cfg, out, resume_from=resume, figures=not args.no_figures)
    fp = report["test"]["final_position"]
    print(f"best iteration {report['training']['best_iteration']}, "
          f"final-position error {fp['mean']:.4f} +- {fp['std']:.4f} m on {fp['n']} test trajectories")
    print(f"run directory: {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = AffordanceModel.load(_existing(args.checkpoint, "checkpoint"))
    data = ds_mod.load(_existing(args.dataset, "dataset"))
    sp = ds_mod.split(data, args.split_seed)
    test = [data[i] for i in sp.test]
    out = _out_dir(args, "eval")
    flags = _flags(args)
    report = {"seed": args.seed, "config_hash": runs.config_hash(flags), "flags": flags}
    report.update(runs.evaluation_report(model, test))

    fp = report["final_position"]
    _write_rows(out / "final_position.csv", ["mean_m", "std_m", "n"], [[_fmt(fp["mean"]), _fmt(fp["std"]), fp["n"]]])
    _write_rows(out / "nstep.csv", ["n", "mean_m", "std_m", "count", "skipped"],
                [[r["n"], _fmt(r["mean"]), _fmt(r["std"]), r["count"], r["skipped"]] for r in report["nstep"]])
    if "grasp" in report:
        rows = []
        for group in ("rollable", "non_rollable", "all"):
            g = report["grasp"][group]
            if g:
                rows.append([group, g["n"], _fmt(g["error_mean"]), _fmt(g["error_std"]), _fmt(g["tp_pct"]),
                             _fmt(g["tn_pct"]), _fmt(g["fp_pct"]), _fmt(g["fn_pct"]), _fmt(g["accuracy"])])
        _write_rows(out / "grasp.csv", ["object", "n", "error_mean_m", "error_std_m", "TP_pct", "TN_pct", "FP_pct",
                                        "FN_pct", "accuracy"], rows)
    if args.planners and model.meta.get("family", "push") == "push":
        counts = {m: args.goals or evaluation.DEFAULT_GOAL_COUNTS[m] for m in MODES}
        table = evaluation.compare_planners(model, args.seed, counts, workers=args.workers)
        report["planners"] = table
        cols = list(evaluation.PLANNER_COLUMNS)
        _write_rows(out / "planners.csv", ["mode", *[f"{c}_{s}" for c in cols for s in ("mean_m", "std_m")]],
                    [[m, *[_fmt(table[m][c][s]) for c in cols for s in ("mean", "std")]] for m in table])
        if not args.no_figures:
            plotting.error_bars({m: {c: (table[m][c]["mean"], table[m][c]["std"]) for c in cols} for m in table},
                                out / "planners.png")
    if not args.no_figures:
        plotting.nstep_errors(report["nstep"], out / "nstep.png")
    runs.dump_json(report, out / "metrics.json")
    print(f"final-position error {fp['mean']:.4f} +- {fp['std']:.4f} m")
    for r in report["nstep"]:
        print(f"{r['n']}-step error {r['mean']:.4f} +- {r['std']:.4f} m")
    print(f"report: {out / 'metrics.json'}")
    return EXIT_OK


# -- plan ----------------------------------------------------------------------------

def _parse_goal(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--goal must be x,y in meters, got {text!r}") from None
    if len(vals) != 2:
        raise ConfigError(f"--goal must be x,y in meters, got {text!r}")
    return np.array(vals)


def _parse_object(text: str) -> ObjectSpec:
    shape, _, size = text.partition(":")
    if shape not in SHAPES:
        raise ConfigError(f"--object shape must be one of {SHAPES}, got {shape!r}")
    try:
        return ObjectSpec(shape, float(size or 0.05))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_plan(args) -> int:
    model = AffordanceModel.load(_existing(args.checkpoint, "checkpoint"))
    if args.goal is not None:
        goal = _parse_goal(args.goal)
        scene = Scene(_parse_object(args.object), TABLE_CENTER)
    out = _out_dir(args, f"plan-{args.planner}-{args.mode}")
    flags = _flags(args)
    head = {"seed": args.seed, "config_hash": runs.config_hash(flags), "flags": flags}
    planner = args.planner if args.planner == "astar" else f"continuous-{args.sample_size}"

    if args.goal is not None:
        failed = None
        try:
            if args.planner == "astar":
                plan = astar_plan(model, scene, goal, args.mode)
            else:
                plan = continuous_plan(model, scene, goal, args.mode, sample_size=args.sample_size, seed=args.seed)
        except PlanningFailure as exc:
            failed, plan = str(exc), exc.best_plan
        report = {**head, "failure": failed, "plan": plan.to_dict() if plan else None}
        if plan is not None and args.execute:
            final, records = execute_plan(scene, plan)
            report["execution"] = {"steps": [vars(r) for r in records], "final_position": list(final.position),
                                   "final_error": float(np.linalg.norm(np.asarray(final.position) - goal))}
            if not args.no_figures:
                plotting.plan_paths(scene.position, goal, [s.end for s in plan.steps],
                                    [r.actual_end for r in records], out / "paths.png", planner)
        runs.dump_json(report, out / "plan.json")
        if failed:
            print(f"planning failed: {failed}", file=sys.stderr)
            return EXIT_PLAN
        print(f"{len(plan.steps)} step plan, predicted error {plan.predicted_final_error:.4f} m")
        for s in plan.steps:
            print(f"  {s.command.primitive} theta={s.command.theta:.4f} fraction={s.command.fraction:.4f}")
        return EXIT_OK

    results = evaluation.planner_trials(model, planner, args.mode, args.goals, args.seed, args.workers)
    summary = evaluation.summarize([r.error for r in results])
    summary["planned_success_rate"] = float(np.mean([r.planned_success for r in results]))
    _write_rows(out / "trials.csv", ["index", "goal_x", "goal_y", "shape", "error_m", "predicted_error_m",
                                     "planned_success", "steps"],
                [[r.index, _fmt(r.goal[0]), _fmt(r.goal[1]), r.shape, _fmt(r.error), _fmt(r.predicted_error),
                  int(r.planned_success), r.steps] for r in results])
    runs.dump_json({**head, "planner": planner, "mode": args.mode, "summary": summary,
                    "trials": [r.to_dict() for r in results]}, out / "summary.json")
    print(f"{planner} {args.mode}: error {summary['mean']:.4f} +- {summary['std']:.4f} m over {summary['n']} goals")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="affordplan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic interaction dataset")
    g.add_argument("--family", choices=("push", "grasp", "rotate"), default="push")
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--samples", type=int, default=25)
    g.add_argument("--misuse-rate", type=float, default=0.0)
    g.add_argument("--out", help="dataset file path")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes a run directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--iterations", type=int, default=100_000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split-seed", type=int, default=0)
    t.add_argument("--check-every", type=int, default=1000)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    t.add_argument("--no-figures", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--planners", action="store_true", help="add the planner comparison table")
    e.add_argument("--goals", type=int, help="goals per mode (default 50/100/80)")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--no-figures", action="store_true")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plan", help="plan (and optionally execute) pushes to a goal")
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--planner", choices=("astar", "continuous"), default="continuous")
    pl.add_argument("--mode", choices=tuple(MODES), default="multi_partial")
    pl.add_argument("--sample-size", type=int, default=100)
    pl.add_argument("--goal", help="x,y in meters; omit to run seeded goal trials")
    pl.add_argument("--object", default="cube:0.05", help="shape:size for --goal")
    pl.add_argument("--goals", type=int, default=20)
    pl.add_argument("--execute", action="store_true")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--workers", type=int, default=1)
    pl.add_argument("--no-figures", action="store_true")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ds_mod.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
