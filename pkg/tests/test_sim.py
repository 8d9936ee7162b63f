import math

import numpy as np
import pytest

from affordplan import sim
from affordplan.sim import ActionCommand, ObjectSpec, Scene, UnreachableError


def cube(size=0.05, yaw=0.0):
    return Scene(ObjectSpec("cube", size, yaw))


# -- rendering ---------------------------------------------------------------------

def test_sphere_peak_height_at_center():
    img = sim.render_depth(Scene(ObjectSpec("sphere", 0.04)))
    assert img[..., 0].max() == pytest.approx(0.04, abs=1e-6)
    c = sim.IMAGE_RES // 2
    assert img[c - 1 : c + 1, c - 1 : c + 1, 0].max() == pytest.approx(0.04, abs=1e-6)


@pytest.mark.parametrize("yaw", [0.3, 1.7, 4.0])
def test_sphere_yaw_invariant(yaw):
    a = sim.render_depth(Scene(ObjectSpec("sphere", 0.05, 0.0)))
    b = sim.render_depth(Scene(ObjectSpec("sphere", 0.05, yaw)))
    assert np.array_equal(a, b)


def test_cube_mask_area():
    img = sim.render_depth(cube(0.05))
    pixel = (sim.IMAGE_EXTENT / sim.IMAGE_RES) ** 2
    assert abs(img[..., 1].sum() - 0.05**2 / pixel) <= 0.05 * 0.05**2 / pixel


def test_cube_quarter_turn_equivariant():
    a = sim.render_depth(cube(0.07, 0.2))
    b = sim.render_depth(cube(0.07, 0.2 + math.pi / 2))
    # same footprint up to one-pixel boundary effects
    assert np.sum(a[..., 1] != b[..., 1]) <= 4 * 0.07 / (sim.IMAGE_EXTENT / sim.IMAGE_RES) + 4


def test_depth_image_channels():
    for shape in sim.SHAPES:
        img = sim.render_depth(Scene(ObjectSpec(shape, 0.03, 0.5)))
        assert img.shape == (48, 48, 2)
        assert img[..., 1].sum() > 0
        assert set(np.unique(img[..., 1])) <= {0.0, 1.0}
        assert (img[..., 0] >= 0).all()


def test_looks_rollable_matches_shape():
    for shape in sim.SHAPES:
        obj = ObjectSpec(shape, 0.04, 0.3)
        assert sim.looks_rollable(sim.observe(Scene(obj, (0.4, 0.6)))) == obj.rollable


# -- push ------------------------------------------------------------------------------

def test_push_theta_pi_moves_plus_x():
    ex = sim.exec_push(cube(), math.pi, 1.0)
    np.testing.assert_allclose(ex.final_scene.position, (0.55, 0.5), atol=1e-12)


def test_push_fraction_04_is_still_approach():
    ex = sim.exec_push(cube(), 1.1, 0.4)
    np.testing.assert_allclose(ex.final_scene.position, (0.5, 0.5), atol=0)


def test_push_fraction_08_displacement():
    theta = 0.7
    ex = sim.exec_push(cube(), theta, 0.8)
    d = np.subtract(ex.final_scene.position, (0.5, 0.5))
    np.testing.assert_allclose(d, -0.03 * np.array([math.cos(theta), math.sin(theta)]), atol=1e-12)


@pytest.mark.parametrize("fraction", [0.04, 0.2, 0.4, 0.55, 0.6, 0.8, 0.97])
@pytest.mark.parametrize("shape", sim.SHAPES)
def test_prefix_property(shape, fraction):
    scene = Scene(ObjectSpec(shape, 0.05, 0.4))
    full = sim.exec_push(scene, 2.2, 1.0).trajectory
    part = sim.exec_push(scene, 2.2, fraction).trajectory
    n = math.ceil(fraction * 25)
    assert len(part) == n
    for a, b in [(part.phases, full.phases), (part.actions, full.actions), (part.effects, full.effects)]:
        assert np.array_equal(a, b[:n])


def test_full_push_length_and_direction(rng):
    for _ in range(20):
        theta = rng.uniform(0, 2 * math.pi)
        eff = sim.exec_push(cube(), theta).trajectory.effects[-1]
        assert np.linalg.norm(eff) == pytest.approx(sim.PUSH_DISTANCE, abs=1e-12)
        assert np.dot(eff, [math.cos(theta), math.sin(theta)]) < 0


def test_plain_push_on_rollable_rolls_off():
    ball = Scene(ObjectSpec("sphere", 0.03))
    plain = sim.exec_push(ball, 0.0, variant="push_plain")
    proper = sim.exec_push(ball, 0.0)
    assert proper.trajectory.meta["command"]["primitive"] == "push_rollable"
    assert np.linalg.norm(plain.trajectory.effects[-1]) == pytest.approx(1.5 * sim.PUSH_DISTANCE)
    assert not np.array_equal(plain.trajectory.actions, proper.trajectory.actions)


def test_unreachable_push_rejected():
    edge = Scene(ObjectSpec("cube", 0.05), (0.95, 0.5))
    assert not sim.is_reachable(edge, ActionCommand("push_plain", theta=0.0))
    with pytest.raises(UnreachableError):
        sim.exec_push(edge, 0.0)


def test_reachable_at_center_any_theta():
    for theta in np.linspace(0, 2 * math.pi, 37)[:-1]:
        assert sim.is_reachable(cube(), ActionCommand("push_plain", theta=theta))
    assert sim.is_reachable(Scene(ObjectSpec("cube", 0.05), (0.02, 0.98)), ActionCommand("grasp"))


def test_reachability_monotone_in_fraction(rng):
    for _ in range(200):
        scene = Scene(ObjectSpec("cube", 0.05), tuple(rng.uniform(0, 1, 2)))
        theta = rng.uniform(0, 2 * math.pi)
        ok = [sim.is_reachable(scene, ActionCommand("push_plain", theta, f)) for f in (0.2, 0.4, 0.6, 0.8, 1.0)]
        # once unreachable, stays unreachable as the fraction grows
        assert ok == sorted(ok, reverse=True)


# -- grasp / rotate ------------------------------------------------------------------

def test_grasp_cube_succeeds():
    ex = sim.exec_grasp(cube(0.05))
    assert ex.trajectory.effects[-1, 2] == pytest.approx(0.30)
    assert sim.grasp_succeeded(ex.trajectory.effects[-1, 2])


def test_grasp_large_sphere_fails():
    ex = sim.exec_grasp(Scene(ObjectSpec("sphere", 0.06)))
    e = ex.trajectory.effects[-1]
    assert abs(e[2]) < 1e-12 and np.linalg.norm(e[:2]) <= 0.01
    assert not sim.grasp_succeeded(e[2])


def test_grasp_rule_total(rng):
    for _ in range(100):
        obj = sim.random_object(rng)
        dz = sim.exec_grasp(Scene(obj)).trajectory.effects[-1, 2]
        assert dz == pytest.approx(0.30) or abs(dz) < 1e-12
        assert sim.grasp_succeeded(dz) == sim.graspable(obj)


def test_stochastic_grasp_slip_bounded(rng):
    for _ in range(50):
        e = sim.exec_grasp(Scene(ObjectSpec("sphere", 0.08)), rng=rng).trajectory.effects[-1]
        assert np.linalg.norm(e[:2]) <= sim.STOCHASTIC_SLIP_MAX


def test_rotate_examples():
    ident = sim.exec_rotate(cube(), 0.0)
    assert np.all(ident.trajectory.effects == 0)
    turned = sim.exec_rotate(cube(0.05, 0.1), math.pi / 2)
    assert turned.final_scene.object.yaw == pytest.approx(0.1 + math.pi / 2)
    assert turned.final_scene.position == (0.5, 0.5)
    ball = sim.exec_rotate(Scene(ObjectSpec("sphere", 0.09, 0.2)), math.pi / 2)
    assert ball.final_scene.object.yaw == 0.2


# -- generation ------------------------------------------------------------------------

def test_gen_dataset_counts_and_determinism():
    a = sim.gen_dataset(30, "push", 5)
    b = sim.gen_dataset(30, "push", 5)
    assert len(a) == 30 and a.equals(b) and a.digest() == b.digest()
    assert not a.equals(sim.gen_dataset(30, "push", 6))


def test_gen_trajectory_order_independent():
    ds = sim.gen_dataset(12, "push", 3)
    assert sim.gen_trajectory(9, "push", 3).equals(ds[9])


def test_grasp_dataset_has_both_outcomes():
    ds = sim.gen_dataset(100, "grasp", 0)
    ok = [t.meta["success"] for t in ds]
    assert 0 < sum(ok) < len(ok)


def test_object_spec_validation():
    with pytest.raises(ValueError):
        ObjectSpec("cube", 0.2)
    with pytest.raises(ValueError):
        ObjectSpec("pyramid", 0.05)
    with pytest.raises(ValueError):
        ActionCommand("push_plain", fraction=0.0)
