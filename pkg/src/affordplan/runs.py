"""Run directories: config snapshot, curves, best checkpoint, evaluation report.

Reports are JSON with sorted keys and no timestamps, so identical inputs
produce identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

from . import plotting
from .dataset import Dataset, DatasetSplit, split as make_split
from .model import AffordanceModel, ModelConfig
from .sim import gen_dataset
from .trainer import TrainConfig, evaluate_final_position, evaluate_grasp, evaluate_nstep, train

log = logging.getLogger(__name__)

CHECKPOINT = "model.afrd"
REPORT = "report.json"


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_curves(curve: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "train_loss", "val_loss"])
        for r in curve:
            w.writerow([r["iteration"], repr(r["train_loss"]), repr(r["val_loss"])])


def evaluation_report(model: AffordanceModel, trajs, nsteps=(1, 2, 3, 4, 5)) -> dict:
    fp = evaluate_final_position(model, trajs)
    out = {"final_position": {k: fp[k] for k in ("mean", "std", "n")}}
    out["nstep"] = [evaluate_nstep(model, trajs, n) for n in nsteps]
    if model.config.effect_dim >= 3 and model.meta.get("family") == "grasp":
        out["grasp"] = evaluate_grasp(model, trajs)
    return out


def run_training(dataset: Dataset, sp: DatasetSplit, train_cfg: TrainConfig, out_dir,
                 model_cfg: ModelConfig | None = None, resume_from=None, figures: bool = True) -> tuple[AffordanceModel, dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = adam = None
    start = 0
    if resume_from is not None:
        model, adam, _ = AffordanceModel.load(resume_from, with_adam=True)
        if adam is None:
            raise ValueError(f"{resume_from}: checkpoint has no optimizer state to resume from")
        start = adam.step
        model_cfg = model.config
    if model_cfg is None:
        model_cfg = ModelConfig(action_dim=dataset.action_dim, effect_dim=dataset.effect_dim)
    snapshot = {
        "train": train_cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "dataset": {"family": dataset.family, "count": len(dataset), "digest": dataset.digest()},
        "split": sp.to_dict(),
        "resumed_from_iteration": start,
    }
    chash = config_hash(snapshot)
    dump_json({**snapshot, "config_hash": chash}, out / "config.json")

    model, adam, rep = train(dataset, sp, train_cfg, model_cfg, model=model, adam=adam, start_iteration=start)
    model.save(out / CHECKPOINT, extra_config={"config_hash": chash}, adam=adam)
    write_curves(rep.curve, out / "curves.csv")
    report = {
        "seed": train_cfg.seed,
        "config_hash": chash,
        "training": {
            "best_iteration": rep.best_iteration,
            "best_val_loss": rep.best_val_loss,
            "iterations_run": rep.iterations_run,
            "stopped_early": rep.stopped_early,
        },
        "test": evaluation_report(model, [dataset[i] for i in sp.test]),
    }
    dump_json(report, out / REPORT)
    if figures and rep.curve:
        plotting.loss_curves(rep.curve, out / "loss_curves.png", rep.best_iteration)
    return model, report


def cached_model(cache_root, family: str, count: int, data_seed: int, train_cfg: TrainConfig,
                 split_seed: int = 0) -> tuple[AffordanceModel, Dataset, DatasetSplit, dict]:
    """Train once per configuration; later calls load the stored run."""
    key = config_hash({"family": family, "count": count, "data_seed": data_seed,
                       "split_seed": split_seed, "train": train_cfg.to_dict()})
    run_dir = Path(cache_root) / f"{family}-{key}"
    ds = gen_dataset(count, family, data_seed)
    sp = make_split(ds, split_seed)
    if (run_dir / REPORT).exists() and (run_dir / CHECKPOINT).exists():
        report = json.loads((run_dir / REPORT).read_text(encoding="utf-8"))
        return AffordanceModel.load(run_dir / CHECKPOINT), ds, sp, report
    log.info("training %s into %s", family, run_dir)
    model, report = run_training(ds, sp, train_cfg, run_dir)
    return model, ds, sp, report


# -- desk-scale reference runs ----------------------------------------------

# grasp success hinges on object size near the aperture, which 500 trajectories sample too thinly
DESK_COUNTS = {"push": 500, "grasp": 2000, "rotate": 500}
DESK_DATA_SEED = 7
DESK_SEEDS = (0, 1, 2)


def desk_model(cache_root, family: str = "push", seed: int = 0, iterations: int = 100_000):
    return cached_model(cache_root, family, DESK_COUNTS[family], DESK_DATA_SEED,
                        TrainConfig(iterations=iterations, seed=seed))
