"""Training loop, early stopping and the evaluation protocols."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import AdamState, Tape, adam_step
from .dataset import ChannelConfig, Dataset, sample_observation_indices, sample_target_indices
from .model import ACTION_ONLY, EFFECT_ONLY, AffordanceModel, BlendWeights, ModelConfig, _Params
from .sim import GRASP_SUCCESS_HEIGHT
from .trajectory import InteractionTrajectory

log = logging.getLogger(__name__)

WEIGHT_MODES = ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5))


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 100_000
    learning_rate: float = 1e-4
    obs_max: int = 5
    n_targets: int = 1
    seed: int = 0
    check_every: int = 1000
    patience: int = 10
    weight_modes: tuple = WEIGHT_MODES

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.weight_modes = tuple(tuple(float(x) for x in w) for w in self.weight_modes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_modes"] = [list(w) for w in self.weight_modes]
        return d


@dataclass
class TrainReport:
    curve: list[dict] = field(default_factory=list)  # iteration, train_loss, val_loss
    best_iteration: int = 0
    best_val_loss: float = math.inf
    iterations_run: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Prepared:
    depth: np.ndarray
    phases: np.ndarray
    acts: np.ndarray  # normalised
    effs: np.ndarray  # normalised


def prepare(trajs, channels: ChannelConfig) -> list[_Prepared]:
    return [
        _Prepared(t.depth, t.phases, channels.norm_action(t.actions), channels.norm_effect(t.effects))
        for t in trajs
    ]


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    # per-iteration streams make a resumed run identical to an uninterrupted one
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(iteration)]))


def _loss(model: AffordanceModel, T: Tape, P, traj: _Prepared, obs_idx, tgt_idx, weights: BlendWeights):
    return model.loss_graph(
        T, P, traj.depth,
        traj.phases[obs_idx], traj.acts[obs_idx], traj.effs[obs_idx], weights,
        traj.phases[tgt_idx], traj.acts[tgt_idx], traj.effs[tgt_idx],
    )


def train_step(model: AffordanceModel, traj: _Prepared, rng: np.random.Generator, config: TrainConfig,
               adam: AdamState) -> float:
    """Sample a blend mode, k observations and the targets; one Adam update on the summed NLL."""
    weights = BlendWeights(*config.weight_modes[int(rng.integers(len(config.weight_modes)))])
    n = len(traj.phases)
    obs_idx = sample_observation_indices(n, rng, config.obs_max)
    tgt_idx = sample_target_indices(n, rng, config.n_targets)
    T = Tape()
    P = _Params(T, model.params, trainable=True)
    where = (f"weights={weights.as_tuple()}, observations={obs_idx.tolist()}, "
             f"targets={tgt_idx.tolist()}, adam step={adam.step}")
    with np.errstate(invalid="ignore"):
        try:
            loss = _loss(model, T, P, traj, obs_idx, tgt_idx, weights)
        except ValueError as exc:
            # NaN parameters surface as a non-positive std inside the NLL
            raise TrainingError(f"invalid loss: {exc} ({where})") from exc
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingError(f"invalid loss: non-finite value {value} ({where})")
    T.backward(loss)
    adam_step(adam, model.params, P.grads())
    return value


class Validator:
    """Fixed-draw validation loss: the same blend modes and observations at every check."""

    def __init__(self, model: AffordanceModel, trajs: list[_Prepared], seed: int, config: TrainConfig):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A11D]))
        self.items = []
        for traj in trajs:
            w = BlendWeights(*config.weight_modes[int(rng.integers(len(config.weight_modes)))])
            obs = sample_observation_indices(len(traj.phases), rng, config.obs_max)
            self.items.append((traj, obs, w))
        self.model = model

    def __call__(self) -> float:
        T = Tape(enabled=False)
        P = _Params(T, self.model.params, trainable=False)
        total = 0.0
        for traj, obs, w in self.items:
            tgt = np.arange(len(traj.phases))
            total += float(_loss(self.model, T, P, traj, obs, tgt, w).value) / len(tgt)
        return total / len(self.items)


def train(dataset: Dataset, split, config: TrainConfig, model_config: ModelConfig | None = None,
          model: AffordanceModel | None = None, adam: AdamState | None = None, start_iteration: int = 0,
          progress=None) -> tuple[AffordanceModel, AdamState, TrainReport]:
    """Train on ``split.train``, early-stop on ``split.validation``; returns the best-validation model."""
    if not split.train or not split.validation:
        raise TrainingError("training and validation splits must be non-empty")
    train_trajs = [dataset[i] for i in split.train]
    if model is None:
        channels = ChannelConfig.fit(train_trajs)
        if model_config is None:
            model_config = ModelConfig(action_dim=dataset.action_dim, effect_dim=dataset.effect_dim)
        model = AffordanceModel.create(model_config, channels, seed=config.seed)
        model.meta = {"family": dataset.family, "dataset_digest": dataset.digest()}
    if adam is None:
        adam = AdamState(learning_rate=config.learning_rate)
    train_p = prepare(train_trajs, model.channels)
    val_p = prepare([dataset[i] for i in split.validation], model.channels)
    validate = Validator(model, val_p, config.seed, config)

    report = TrainReport()
    best_params = copy.deepcopy(model.params)
    best_adam = copy.deepcopy(adam)
    bad_checks = 0
    window = []
    it = start_iteration
    for it in range(start_iteration, config.iterations):
        rng = step_rng(config.seed, it)
        traj = train_p[int(rng.integers(len(train_p)))]
        window.append(train_step(model, traj, rng, config, adam))
        done = it + 1
        if done % config.check_every == 0 or done == config.iterations:
            val = validate()
            row = {"iteration": done, "train_loss": float(np.mean(window)), "val_loss": val}
            report.curve.append(row)
            window = []
            if progress:
                progress(row)
            log.info("iter %d train %.4f val %.4f", done, row["train_loss"], val)
            if val < report.best_val_loss:
                report.best_val_loss = val
                report.best_iteration = done
                best_params = copy.deepcopy(model.params)
                best_adam = copy.deepcopy(adam)
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks >= config.patience:
                    report.stopped_early = True
                    report.iterations_run = done
                    break
    else:
        report.iterations_run = config.iterations
    model.params = best_params
    return model, best_adam, report


# -- evaluation -------------------------------------------------------------

def _mean_std(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), float(x.std())


def start_observation(traj: InteractionTrajectory):
    return [(float(traj.phases[0]), traj.actions[0], traj.effects[0])]


def evaluate_final_position(model: AffordanceModel, trajs) -> dict:
    """Condition on the t=0 sample only (action channel), query t=1, compare planar displacement."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("evaluation split is empty")
    errors = []
    for traj in trajs:
        pred = model.predict_trajectory(traj.depth, start_observation(traj), ACTION_ONLY, [1.0])
        errors.append(float(np.linalg.norm(pred.effect.mean[0, :2] - traj.effects[-1, :2])))
    mean, std = _mean_std(errors)
    return {"mean": mean, "std": std, "n": len(errors), "errors": errors}


def evaluate_nstep(model: AffordanceModel, trajs, n: int, window: int = 15) -> dict:
    """Condition on effect samples at the ``window`` phases before anchor i; predict phase i+n-1."""
    errors, skipped = [], 0
    for traj in trajs:
        N = len(traj)
        if N < window + n:
            skipped += 1
            continue
        feat = model.encode_image(traj.depth)
        for i in range(window, N - n + 1):
            obs = [traj.sample(j) for j in range(i - window, i)]
            q = i + n - 1
            pred = model.predict_trajectory(feat, obs, EFFECT_ONLY, [traj.phases[q]])
            errors.append(float(np.linalg.norm(pred.effect.mean[0] - traj.effects[q])))
    if not errors:
        raise ValueError(f"no trajectory is long enough for the {window}+{n} protocol")
    mean, std = _mean_std(errors)
    return {"n": n, "mean": mean, "std": std, "count": len(errors), "skipped": skipped}


def evaluate_grasp(model: AffordanceModel, trajs) -> dict:
    """Grasp success by the 0.1 m height rule; confusion rates per rollability group."""
    trajs = list(trajs)
    if not trajs:
        raise ValueError("evaluation split is empty")
    if model.config.effect_dim < 3:
        raise ValueError("grasp evaluation needs a height channel in the effect")
    rows = {"rollable": [], "non_rollable": []}
    for traj in trajs:
        pred = model.predict_trajectory(traj.depth, start_observation(traj), ACTION_ONLY, [1.0]).effect.mean[0]
        true = traj.effects[-1]
        shape = traj.meta["object"]["shape"]
        group = "rollable" if shape in ("sphere", "cylinder_lying") else "non_rollable"
        rows[group].append((pred[2] > GRASP_SUCCESS_HEIGHT, true[2] > GRASP_SUCCESS_HEIGHT, float(np.linalg.norm(pred - true))))

    def summarize(items):
        if not items:
            return None
        p = np.array([i[0] for i in items])
        a = np.array([i[1] for i in items])
        tp, tn = int(np.sum(p & a)), int(np.sum(~p & ~a))
        fp, fn = int(np.sum(p & ~a)), int(np.sum(~p & a))
        pos, neg = tp + fn, tn + fp
        err_mean, err_std = _mean_std([i[2] for i in items])
        return {
            "n": len(items),
            "error_mean": err_mean,
            "error_std": err_std,
            "tp_pct": 100.0 * tp / pos if pos else float("nan"),
            "tn_pct": 100.0 * tn / neg if neg else float("nan"),
            "fp_pct": 100.0 * fp / neg if neg else float("nan"),
            "fn_pct": 100.0 * fn / pos if pos else float("nan"),
            "tp": tp, "tn": tn, "fp": fp, "fn": fn,
            "accuracy": (tp + tn) / len(items),
        }

    out = {k: summarize(v) for k, v in rows.items()}
    out["all"] = summarize(rows["rollable"] + rows["non_rollable"])
    return out
