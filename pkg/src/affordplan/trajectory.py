from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class InteractionTrajectory:
    """One recorded interaction: phase-stamped action/effect samples plus the
    depth image taken before the action started.

    ``effects`` are displacements from the object's own start pose.
    """

    phases: np.ndarray  # [N]
    actions: np.ndarray  # [N, action_dim]
    effects: np.ndarray  # [N, effect_dim]
    depth: np.ndarray  # [48, 48, 2] float32
    meta: dict = field(default_factory=dict)
    id: int = 0

    def __post_init__(self):
        self.phases = np.asarray(self.phases, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.effects = np.asarray(self.effects, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        n = len(self.phases)
        if self.actions.shape[0] != n or self.effects.shape[0] != n:
            raise ValueError(
                f"trajectory {self.id}: {n} phases but {self.actions.shape[0]} actions / {self.effects.shape[0]} effects"
            )
        if n and np.any(np.diff(self.phases) <= 0):
            raise ValueError(f"trajectory {self.id}: phases must be strictly increasing")

    def __len__(self):
        return len(self.phases)

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def effect_dim(self) -> int:
        return self.effects.shape[1]

    def sample(self, i: int) -> tuple[float, np.ndarray, np.ndarray]:
        return float(self.phases[i]), self.actions[i], self.effects[i]

    def equals(self, other: "InteractionTrajectory") -> bool:
        return (
            self.id == other.id
            and self.meta == other.meta
            and np.array_equal(self.phases, other.phases)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.effects, other.effects)
            and np.array_equal(self.depth, other.depth)
        )
