"""Interaction datasets: persistence, splits, normalisation and CNP sampling.

File format (JSON lines, UTF-8):

* line 1, header: ``{"format": "affordplan-dataset", "version": 1,
  "family": ..., "count": ..., "action_dim": ..., "effect_dim": ...,
  "samples_fields": [...]}``
* one line per trajectory with fields ``id``, ``family``, ``object``,
  ``command``, ``extra`` (remaining metadata), ``phases``, ``actions``,
  ``effects`` and ``depth`` (48*48*2 = 4608 reals, row-major H, W, C).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .trajectory import InteractionTrajectory

FORMAT_NAME = "affordplan-dataset"
FORMAT_VERSION = 1
DEPTH_SIZE = 48 * 48 * 2
RECORD_FIELDS = ("id", "family", "object", "command", "extra", "phases", "actions", "effects", "depth")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    trajectories: list[InteractionTrajectory]
    family: str

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, i) -> InteractionTrajectory:
        return self.trajectories[i]

    def __iter__(self) -> Iterator[InteractionTrajectory]:
        return iter(self.trajectories)

    @property
    def action_dim(self) -> int:
        return self.trajectories[0].action_dim

    @property
    def effect_dim(self) -> int:
        return self.trajectories[0].effect_dim

    def subset(self, indices) -> "Dataset":
        return Dataset([self.trajectories[i] for i in indices], self.family)

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in _lines(self):
            h.update(line.encode("utf-8"))
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return (
            self.family == other.family
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self, other))
        )


# -- persistence -----------------------------------------------------------

def _header(ds: Dataset) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "family": ds.family,
        "count": len(ds),
        "action_dim": ds.action_dim,
        "effect_dim": ds.effect_dim,
        "record_fields": list(RECORD_FIELDS),
    }


def _record(traj: InteractionTrajectory) -> dict:
    meta = dict(traj.meta)
    return {
        "id": traj.id,
        "family": meta.pop("family", None),
        "object": meta.pop("object", None),
        "command": meta.pop("command", None),
        "extra": meta,
        "phases": traj.phases.tolist(),
        "actions": traj.actions.tolist(),
        "effects": traj.effects.tolist(),
        "depth": traj.depth.astype(np.float64).reshape(-1).tolist(),
    }


def _lines(ds: Dataset):
    yield json.dumps(_header(ds), sort_keys=True)
    for traj in ds:
        yield json.dumps(_record(traj), sort_keys=True)


def save(ds: Dataset, path) -> None:
    if len(ds) == 0:
        raise DatasetError("refusing to save an empty dataset")
    with open(path, "w", encoding="utf-8") as fh:
        for line in _lines(ds):
            fh.write(line + "\n")


def load(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DatasetError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise DatasetError(f"{path}: header must be an object")
    for key in ("format", "version", "family", "count", "action_dim", "effect_dim"):
        if key not in header:
            raise DatasetError(f"{path}: header field {key!r} missing")
    if header["format"] != FORMAT_NAME:
        raise DatasetError(f"{path}: header field 'format' is {header['format']!r}, expected {FORMAT_NAME!r}")
    if header["version"] != FORMAT_VERSION:
        raise DatasetError(f"{path}: header field 'version' is {header['version']!r}, expected {FORMAT_VERSION}")
    count = header["count"]
    if not isinstance(count, int) or count < 1:
        raise DatasetError(f"{path}: header field 'count' must be a positive integer")
    body = lines[1:]
    if len(body) < count or not text.endswith("\n"):
        raise DatasetError(f"{path}: truncated file, header declares {count} trajectories, found {len(body)}")
    if len(body) > count:
        raise DatasetError(f"{path}: {len(body)} trajectories present but header declares {count}")
    trajs = []
    for lineno, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: corrupt record ({exc})") from exc
        missing = [k for k in RECORD_FIELDS if k not in rec]
        if missing:
            raise DatasetError(f"{path}:{lineno}: record missing fields {missing}")
        depth = np.asarray(rec["depth"], dtype=np.float64)
        if depth.size != DEPTH_SIZE:
            raise DatasetError(f"{path}:{lineno}: depth has {depth.size} values, expected {DEPTH_SIZE}")
        meta = {"family": rec["family"], "object": rec["object"], "command": rec["command"], **rec["extra"]}
        traj = InteractionTrajectory(
            phases=rec["phases"],
            actions=np.asarray(rec["actions"], dtype=np.float64).reshape(len(rec["phases"]), header["action_dim"]),
            effects=np.asarray(rec["effects"], dtype=np.float64).reshape(len(rec["phases"]), header["effect_dim"]),
            depth=depth.astype(np.float32).reshape(48, 48, 2),
            meta=meta,
            id=rec["id"],
        )
        trajs.append(traj)
    return Dataset(trajs, header["family"])


# -- splits ----------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]))


def split(n_or_dataset, seed: int) -> DatasetSplit:
    """Seeded 80/10/10 partition of trajectory indices."""
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    if n < 10:
        raise DatasetError(f"need at least 10 trajectories to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n).tolist()
    n_hold = n // 10
    return DatasetSplit(
        train=sorted(perm[2 * n_hold :]),
        validation=sorted(perm[:n_hold]),
        test=sorted(perm[n_hold : 2 * n_hold]),
    )


def save_split(sp: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(sp.to_dict(), sort_keys=True) + "\n", encoding="utf-8")


def load_split(path) -> DatasetSplit:
    return DatasetSplit.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- normalisation ---------------------------------------------------------

@dataclass
class ChannelConfig:
    action_dim: int
    effect_dim: int
    action_mean: np.ndarray = field(default=None)
    action_scale: np.ndarray = field(default=None)
    effect_mean: np.ndarray = field(default=None)
    effect_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.action_dim < 1 or self.effect_dim < 1:
            raise ValueError("channel dims must be >= 1")
        for name, dim, default in (
            ("action_mean", self.action_dim, 0.0),
            ("action_scale", self.action_dim, 1.0),
            ("effect_mean", self.effect_dim, 0.0),
            ("effect_scale", self.effect_dim, 1.0),
        ):
            val = getattr(self, name)
            arr = np.full(dim, default) if val is None else np.asarray(val, dtype=np.float64)
            if arr.shape != (dim,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be {dim} finite values")
            setattr(self, name, arr)

    @classmethod
    def fit(cls, trajectories) -> "ChannelConfig":
        """Per-dimension mean and scale over every sample of the given (training) trajectories."""
        trajectories = list(trajectories)
        acts = np.concatenate([t.actions for t in trajectories])
        effs = np.concatenate([t.effects for t in trajectories])

        def scale(x):
            s = x.std(axis=0)
            return np.where(s > 1e-8, s, 1.0)

        return cls(acts.shape[1], effs.shape[1], acts.mean(axis=0), scale(acts), effs.mean(axis=0), scale(effs))

    def norm_action(self, a):
        return (np.asarray(a) - self.action_mean) / self.action_scale

    def norm_effect(self, e):
        return (np.asarray(e) - self.effect_mean) / self.effect_scale

    def denorm_action(self, a):
        return np.asarray(a) * self.action_scale + self.action_mean

    def denorm_effect(self, e):
        return np.asarray(e) * self.effect_scale + self.effect_mean

    def to_dict(self) -> dict:
        return {
            "action_dim": self.action_dim,
            "effect_dim": self.effect_dim,
            "action_mean": self.action_mean.tolist(),
            "action_scale": self.action_scale.tolist(),
            "effect_mean": self.effect_mean.tolist(),
            "effect_scale": self.effect_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        return cls(**d)


# -- observation / target sampling -----------------------------------------

def sample_observation_indices(n: int, rng: np.random.Generator, obs_max: int) -> np.ndarray:
    if obs_max < 1:
        raise ValueError("obs_max must be >= 1")
    k = int(rng.integers(1, obs_max + 1))
    return rng.choice(n, size=min(k, n), replace=False)


def sample_target_indices(n: int, rng: np.random.Generator, n_targets: int = 1) -> np.ndarray:
    if n_targets < 1:
        raise ValueError("n_targets must be >= 1")
    return rng.integers(0, n, size=n_targets)


def sample_observations(traj: InteractionTrajectory, rng: np.random.Generator, obs_max: int = 5):
    """k ~ U{1..obs_max} samples drawn without replacement, as (t, action, effect) tuples."""
    return [traj.sample(int(i)) for i in sample_observation_indices(len(traj), rng, obs_max)]


def sample_targets(traj: InteractionTrajectory, rng: np.random.Generator, n_targets: int = 1):
    return [traj.sample(int(i)) for i in sample_target_indices(len(traj), rng, n_targets)]
