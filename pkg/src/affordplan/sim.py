"""Deterministic 2-D tabletop kinematics for push, grasp and rotate.

Coordinates are meters on a 1 m x 1 m table with the origin at one corner.
Every executor is a pure function of (scene, command, seed) and returns the
recorded trajectory together with the scene after execution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .trajectory import InteractionTrajectory

TABLE_SIZE = 1.0
TABLE_CENTER = (0.5, 0.5)
REACH_MARGIN = 0.05
PUSH_RADIUS = 0.2
PUSH_DISTANCE = 0.05
APPROACH_END = 0.5  # phase at which the gripper reaches the object
ROLL_OFF = 0.5  # extra roll, in units of PUSH_DISTANCE, for push_plain on a rollable object
GRASP_LIFT = 0.30
GRASP_APERTURE = 0.08
SLIP_SIZE = 0.05
GRASP_SUCCESS_HEIGHT = 0.1
GRIPPER_OPEN = 0.10
GRIPPER_HOME_Z = 0.35
FAILED_GRASP_DRIFT = 0.005
STOCHASTIC_SLIP_MAX = 0.05
DEFAULT_SAMPLES = 25
IMAGE_RES = 48
IMAGE_EXTENT = 0.6
MIN_SIZE, MAX_SIZE = 0.02, 0.10

SHAPES = ("cube", "cylinder_upright", "cylinder_lying", "sphere")
ROLLABLE_SHAPES = frozenset({"sphere", "cylinder_lying"})
PRIMITIVES = ("push_plain", "push_rollable", "grasp", "rotate")
FAMILY_DIMS = {"push": (2, 2), "grasp": (2, 3), "rotate": (2, 3)}


class UnreachableError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    size: float  # edge length for cubes, radius otherwise
    yaw: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not (MIN_SIZE - 1e-12 <= self.size <= MAX_SIZE + 1e-12):
            raise ValueError(f"size {self.size} outside [{MIN_SIZE}, {MAX_SIZE}] m")

    @property
    def rollable(self) -> bool:
        return self.shape in ROLLABLE_SHAPES

    @property
    def contact_offset(self) -> float:
        """Distance from the object center to the pushed face."""
        return self.size / 2 if self.shape == "cube" else self.size

    @property
    def height(self) -> float:
        return self.size if self.shape == "cube" else 2 * self.size

    def to_dict(self) -> dict:
        return {"shape": self.shape, "size": self.size, "yaw": self.yaw}


@dataclass(frozen=True)
class Scene:
    object: ObjectSpec
    position: tuple[float, float] = TABLE_CENTER
    height: float = 0.0

    def __post_init__(self):
        x, y = self.position
        object.__setattr__(self, "position", (float(x), float(y)))
        if not (0.0 <= x <= TABLE_SIZE and 0.0 <= y <= TABLE_SIZE):
            raise ValueError(f"object position {self.position} is off the table")
        if self.height < 0:
            raise ValueError("object height must be >= 0")

    def moved(self, dx: float, dy: float, dz: float = 0.0, dyaw: float = 0.0) -> "Scene":
        x = min(max(self.position[0] + dx, 0.0), TABLE_SIZE)
        y = min(max(self.position[1] + dy, 0.0), TABLE_SIZE)
        obj = replace(self.object, yaw=(self.object.yaw + dyaw) % (2 * math.pi)) if dyaw else self.object
        return Scene(obj, (x, y), max(self.height + dz, 0.0))


@dataclass(frozen=True)
class ActionCommand:
    primitive: str
    theta: float = 0.0
    fraction: float = 1.0
    rotate_angle: float = 0.0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"fraction {self.fraction} outside (0, 1]")
        object.__setattr__(self, "theta", float(self.theta) % (2 * math.pi))

    @property
    def is_push(self) -> bool:
        return self.primitive.startswith("push")

    def to_dict(self) -> dict:
        return {
            "primitive": self.primitive,
            "theta": self.theta,
            "fraction": self.fraction,
            "rotate_angle": self.rotate_angle,
        }


@dataclass
class Execution:
    trajectory: InteractionTrajectory
    final_scene: Scene
    extras: dict = field(default_factory=dict)


def sample_phases(samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    return np.linspace(0.0, 1.0, samples)


def kept_samples(fraction: float, samples: int) -> int:
    """Number of leading grid samples recorded for a partial execution."""
    return max(1, math.ceil(fraction * samples - 1e-9))


def _transport_progress(t):
    return np.clip((np.asarray(t, dtype=np.float64) - APPROACH_END) / (1.0 - APPROACH_END), 0.0, 1.0)


def push_object_displacement(theta: float, t, roll_off: bool = False) -> np.ndarray:
    """Object displacement [len(t), 2] for a push along -(cos theta, sin theta)."""
    s = _transport_progress(t)
    dist = PUSH_DISTANCE * s
    if roll_off:
        k = 4.0
        dist = dist + ROLL_OFF * PUSH_DISTANCE * (1.0 - np.exp(-k * s)) / (1.0 - math.exp(-k))
    u = np.array([math.cos(theta), math.sin(theta)])
    return -np.atleast_1d(dist)[:, None] * u[None, :]


def push_gripper_path(theta: float, t, contact: float, rollable_variant: bool) -> np.ndarray:
    """Gripper position relative to the object's initial position, [len(t), 2]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    u = np.array([math.cos(theta), math.sin(theta)])
    near = 0.0 if rollable_variant else contact
    a = np.clip(t / APPROACH_END, 0.0, 1.0)
    s = _transport_progress(t)
    radial = PUSH_RADIUS + (near - PUSH_RADIUS) * a - PUSH_DISTANCE * s
    return radial[:, None] * u[None, :]


def _in_bounds(points: np.ndarray) -> np.ndarray:
    lo, hi = -REACH_MARGIN, TABLE_SIZE + REACH_MARGIN
    return np.all((points >= lo) & (points <= hi), axis=-1)


def push_reachable(position, thetas, fractions, contact: float, rollable_variant: bool) -> np.ndarray:
    """Vectorised reachability for pushes from ``position``; broadcasts thetas x fractions.

    The gripper path is piecewise linear, so containment in the (convex)
    inflated table reduces to containment of its vertices.
    """
    thetas = np.asarray(thetas, dtype=np.float64)[..., None]
    fractions = np.asarray(fractions, dtype=np.float64)
    th, fr = np.broadcast_arrays(thetas, fractions)
    u = np.stack([np.cos(th), np.sin(th)], axis=-1)
    near = 0.0 if rollable_variant else contact
    p = np.asarray(position, dtype=np.float64)
    a_end = np.minimum(fr / APPROACH_END, 1.0)
    r_approach = PUSH_RADIUS + (near - PUSH_RADIUS) * a_end
    r_end = near - PUSH_DISTANCE * _transport_progress(fr)
    r_end = np.where(fr > APPROACH_END, r_end, r_approach)
    ok = _in_bounds(p + PUSH_RADIUS * u)
    ok &= _in_bounds(p + r_approach[..., None] * u)
    ok &= _in_bounds(p + r_end[..., None] * u)
    return ok


def is_reachable(scene: Scene, command: ActionCommand) -> bool:
    if not command.is_push:
        return bool(_in_bounds(np.asarray(scene.position)))
    ok = push_reachable(
        scene.position,
        [command.theta],
        [command.fraction],
        scene.object.contact_offset,
        command.primitive == "push_rollable",
    )
    return bool(ok.reshape(-1)[0])


def graspable(obj: ObjectSpec) -> bool:
    return obj.size <= GRASP_APERTURE and (not obj.rollable or obj.size <= SLIP_SIZE)


def grasp_succeeded(delta_z: float) -> bool:
    return delta_z > GRASP_SUCCESS_HEIGHT


# -- depth rendering --------------------------------------------------------

def _height_field(obj: ObjectSpec, dx: np.ndarray, dy: np.ndarray):
    """Top-surface height and footprint for points relative to the object center."""
    r = obj.size
    if obj.shape in ("sphere", "cylinder_upright"):
        # radially symmetric: skip the rotation so yaw cannot perturb the result
        d2 = dx * dx + dy * dy
        inside = d2 <= r * r
        if obj.shape == "sphere":
            return np.sqrt(np.clip(r * r - d2, 0.0, None)), inside
        return np.where(inside, 2 * r, 0.0), inside
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    if obj.shape == "cube":
        half = obj.size / 2
        inside = (np.abs(lx) <= half) & (np.abs(ly) <= half)
        return np.where(inside, obj.size, 0.0), inside
    # lying cylinder: axis along the local x direction, length 2r
    inside = (np.abs(lx) <= r) & (np.abs(ly) <= r)
    return np.where(inside, np.sqrt(np.clip(r * r - ly * ly, 0.0, None)), 0.0), inside


_SUB = np.array([-0.5, -0.25, 0.0, 0.25, 0.5])


def render_depth(scene: Scene, center=None) -> np.ndarray:
    """Orthographic top-down render, [48, 48, 2] = (height in m, mask).

    The window is IMAGE_EXTENT wide, centered on ``center`` (table center by
    default). Height is the maximum over a 5x5 sub-pixel grid that includes
    pixel borders; the mask tests the pixel center.
    """
    cx, cy = TABLE_CENTER if center is None else center
    px = IMAGE_EXTENT / IMAGE_RES
    idx = (np.arange(IMAGE_RES) - (IMAGE_RES - 1) / 2) * px
    ys = cy + idx[:, None, None, None] + _SUB[None, None, :, None] * px
    xs = cx + idx[None, :, None, None] + _SUB[None, None, None, :] * px
    ox, oy = scene.position
    heights, _ = _height_field(scene.object, xs - ox, ys - oy)
    hmax = heights.max(axis=(2, 3))
    _, mask = _height_field(scene.object, cx + idx[None, :] - ox, cy + idx[:, None] - oy)
    img = np.zeros((IMAGE_RES, IMAGE_RES, 2), dtype=np.float32)
    img[..., 0] = np.where(mask, hmax + scene.height, 0.0)
    img[..., 1] = mask
    return img


def observe(scene: Scene) -> np.ndarray:
    """Object-centred crop used as model input during planning."""
    return render_depth(scene, center=scene.position)


def looks_rollable(depth: np.ndarray, flatness: float = 0.05) -> bool:
    """Curved top surface in the depth image means a rollable object."""
    mask = depth[..., 1] > 0.5
    if not mask.any():
        raise ValueError("depth image has an empty mask")
    h = depth[..., 0][mask]
    top = float(h.max())
    return (top - float(h.min())) > flatness * top


# -- executors --------------------------------------------------------------

def _finish(scene, phases, actions, effects, n_keep, final_effect, meta, dz=0.0, dyaw=0.0, extras=None):
    traj = InteractionTrajectory(
        phases=phases[:n_keep],
        actions=actions[:n_keep],
        effects=effects[:n_keep],
        depth=render_depth(scene),
        meta=meta,
    )
    final = scene.moved(final_effect[0], final_effect[1], dz, dyaw)
    return Execution(traj, final, extras or {})


def exec_push(scene: Scene, theta: float, fraction: float = 1.0, variant: str | None = None,
              samples: int = DEFAULT_SAMPLES) -> Execution:
    """Push from the 0.2 m circle at angle ``theta``; the object moves along -(cos, sin).

    ``variant`` defaults to the one matching the object's rollability. A
    plain push on a rollable object rolls past the contact displacement.
    """
    if variant is None:
        variant = "push_rollable" if scene.object.rollable else "push_plain"
    command = ActionCommand(variant, theta=theta, fraction=fraction)
    if not is_reachable(scene, command):
        raise UnreachableError(f"push theta={command.theta:.4f} from {scene.position} leaves the workspace")
    roll_off = scene.object.rollable and variant == "push_plain"
    phases = sample_phases(samples)
    effects = push_object_displacement(command.theta, phases, roll_off)
    actions = push_gripper_path(command.theta, phases, scene.object.contact_offset, variant == "push_rollable")
    final = push_object_displacement(command.theta, [fraction], roll_off)[0]
    meta = {"family": "push", "object": scene.object.to_dict(), "command": command.to_dict(), "roll_off": roll_off}
    return _finish(scene, phases, actions, effects, kept_samples(fraction, samples), final, meta)


def _gripper_vertical(obj: ObjectSpec, phases: np.ndarray, closes_to: float, lift: float = GRASP_LIFT) -> np.ndarray:
    grasp_z = obj.height / 2
    lower = np.clip(phases / (1 / 3), 0.0, 1.0)
    close = np.clip((phases - 1 / 3) / (APPROACH_END - 1 / 3), 0.0, 1.0)
    z = GRIPPER_HOME_Z + (grasp_z - GRIPPER_HOME_Z) * lower + lift * _transport_progress(phases)
    aperture = GRIPPER_OPEN + (closes_to - GRIPPER_OPEN) * close
    return np.stack([z, aperture], axis=1)


def exec_grasp(scene: Scene, fraction: float = 1.0, samples: int = DEFAULT_SAMPLES,
               rng: np.random.Generator | None = None) -> Execution:
    """Lower, close, lift by 0.30 m.

    Failure leaves the object near its start: a deterministic 5 mm drift,
    or, when ``rng`` is given, a seeded slip of up to 0.05 m.
    """
    command = ActionCommand("grasp", fraction=fraction)
    if not is_reachable(scene, command):
        raise UnreachableError(f"object at {scene.position} is out of reach")
    obj = scene.object
    ok = graspable(obj)
    phases = sample_phases(samples)
    width = obj.size if obj.shape == "cube" else 2 * obj.size
    actions = _gripper_vertical(obj, phases, min(width, GRIPPER_OPEN))
    lift = _transport_progress(phases)
    effects = np.zeros((samples, 3))
    if ok:
        effects[:, 2] = GRASP_LIFT * lift
    else:
        if rng is None:
            drift = FAILED_GRASP_DRIFT * np.array([math.cos(obj.yaw), math.sin(obj.yaw)])
        else:
            ang = rng.uniform(0.0, 2 * math.pi)
            drift = rng.uniform(0.0, STOCHASTIC_SLIP_MAX) * np.array([math.cos(ang), math.sin(ang)])
        effects[:, :2] = lift[:, None] * drift[None, :]
    final = effects[-1] * float(_transport_progress(fraction))
    meta = {"family": "grasp", "object": obj.to_dict(), "command": command.to_dict(), "success": ok}
    return _finish(scene, phases, actions, effects, kept_samples(fraction, samples), final[:2], meta, dz=float(final[2]))


def exec_rotate(scene: Scene, angle: float, fraction: float = 1.0, samples: int = DEFAULT_SAMPLES) -> Execution:
    """Grip and turn by ``angle`` during the second half of the phase; no-op on ungraspable objects."""
    command = ActionCommand("rotate", fraction=fraction, rotate_angle=angle)
    if not is_reachable(scene, command):
        raise UnreachableError(f"object at {scene.position} is out of reach")
    obj = scene.object
    ok = graspable(obj)
    phases = sample_phases(samples)
    turn = _transport_progress(phases)
    vertical = _gripper_vertical(obj, phases, min(obj.size, GRIPPER_OPEN), lift=0.0)
    actions = np.stack([vertical[:, 0], angle * turn], axis=1)
    effects = np.zeros((samples, 3))
    if ok:
        effects[:, 2] = angle * turn
    dyaw = angle * float(_transport_progress(fraction)) if ok else 0.0
    meta = {"family": "rotate", "object": obj.to_dict(), "command": command.to_dict(), "success": ok}
    return _finish(scene, phases, actions, effects, kept_samples(fraction, samples), (0.0, 0.0), meta, dyaw=dyaw)


def execute(scene: Scene, command: ActionCommand, samples: int = DEFAULT_SAMPLES) -> Execution:
    if command.is_push:
        return exec_push(scene, command.theta, command.fraction, command.primitive, samples)
    if command.primitive == "grasp":
        return exec_grasp(scene, command.fraction, samples)
    return exec_rotate(scene, command.rotate_angle, command.fraction, samples)


# -- dataset generation -----------------------------------------------------

def random_object(rng: np.random.Generator, shapes=SHAPES) -> ObjectSpec:
    shape = shapes[int(rng.integers(len(shapes)))]
    return ObjectSpec(shape, float(rng.uniform(MIN_SIZE, MAX_SIZE)), float(rng.uniform(0.0, 2 * math.pi)))


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(index)]))


def gen_trajectory(index: int, family: str, master_seed: int, samples: int = DEFAULT_SAMPLES,
                   misuse_rate: float = 0.0, stochastic_grasp: bool = False) -> InteractionTrajectory:
    rng = trajectory_rng(master_seed, index)
    scene = Scene(random_object(rng), TABLE_CENTER)
    if family == "push":
        theta = float(rng.uniform(0.0, 2 * math.pi))
        variant = "push_rollable" if scene.object.rollable else "push_plain"
        if scene.object.rollable and rng.uniform() < misuse_rate:
            variant = "push_plain"
        ex = exec_push(scene, theta, 1.0, variant, samples)
    elif family == "grasp":
        ex = exec_grasp(scene, 1.0, samples, rng if stochastic_grasp else None)
    elif family == "rotate":
        ex = exec_rotate(scene, float(rng.uniform(-math.pi / 2, math.pi / 2)), 1.0, samples)
    else:
        raise ValueError(f"unknown action family {family!r}")
    ex.trajectory.id = index
    return ex.trajectory


def gen_dataset(count: int, family: str, master_seed: int, samples: int = DEFAULT_SAMPLES,
                misuse_rate: float = 0.0, stochastic_grasp: bool = False) -> Dataset:
    """Objects at the table center with random shape/size/yaw; seeds derive from (master_seed, index)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    trajs = [gen_trajectory(i, family, master_seed, samples, misuse_rate, stochastic_grasp) for i in range(count)]
    return Dataset(trajs, family)
