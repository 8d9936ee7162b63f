import json

import numpy as np
import pytest

from affordplan import dataset as D
from affordplan.sim import gen_dataset


@pytest.fixture(scope="module")
def ds():
    return gen_dataset(20, "push", 11)


@pytest.mark.parametrize("n,sizes", [(500, (400, 50, 50)), (10, (8, 1, 1)), (37, (31, 3, 3))])
def test_split_sizes_and_partition(n, sizes):
    sp = D.split(n, seed=4)
    assert (len(sp.train), len(sp.validation), len(sp.test)) == sizes
    allidx = sp.train + sp.validation + sp.test
    assert sorted(allidx) == list(range(n))
    assert D.split(n, seed=4) == sp


def test_split_depends_on_seed():
    assert D.split(100, 0) != D.split(100, 1)


def test_split_too_small():
    with pytest.raises(D.DatasetError):
        D.split(9, 0)


def test_split_manifest_round_trip(tmp_path):
    sp = D.split(50, 3)
    D.save_split(sp, tmp_path / "s.json")
    assert D.load_split(tmp_path / "s.json") == sp


def test_sample_observations_single(ds, rng):
    assert len(D.sample_observations(ds[0], rng, obs_max=1)) == 1


def test_observation_count_frequencies(rng):
    counts = np.bincount([len(D.sample_observation_indices(25, rng, 5)) for _ in range(10000)], minlength=6)[1:]
    np.testing.assert_allclose(counts / 10000, 0.2, atol=0.02)


def test_observations_belong_to_trajectory(ds, rng):
    traj = ds[3]
    for _ in range(50):
        obs = D.sample_observations(traj, rng, 5)
        ts = [o[0] for o in obs]
        assert len(set(ts)) == len(ts)
        for t, a, e in obs:
            i = int(np.flatnonzero(traj.phases == t)[0])
            assert np.array_equal(a, traj.actions[i]) and np.array_equal(e, traj.effects[i])


def test_targets_uniform_over_phases(ds, rng):
    tgt = D.sample_targets(ds[0], rng, 1)
    assert len(tgt) == 1 and 0.0 <= tgt[0][0] <= 1.0
    idx = np.concatenate([D.sample_target_indices(25, rng, 1) for _ in range(10000)])
    hist = np.bincount(idx, minlength=25) / 10000
    # 4 sigma band for a binomial with p = 1/25
    assert np.all(np.abs(hist - 1 / 25) < 4 * np.sqrt(1 / 25 * 24 / 25 / 10000))


def test_save_load_round_trip(ds, tmp_path):
    D.save(ds, tmp_path / "d.jsonl")
    back = D.load(tmp_path / "d.jsonl")
    assert back.equals(ds) and back.digest() == ds.digest()


def test_load_errors(ds, tmp_path):
    p = tmp_path / "d.jsonl"
    D.save(ds, p)
    lines = p.read_text().splitlines(keepends=True)

    (tmp_path / "empty").write_text("")
    with pytest.raises(D.DatasetError, match="empty"):
        D.load(tmp_path / "empty")

    header = json.loads(lines[0])
    header["version"] = 99
    (tmp_path / "ver").write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
    with pytest.raises(D.DatasetError, match="version"):
        D.load(tmp_path / "ver")

    del header["count"]
    (tmp_path / "hdr").write_text(json.dumps(header) + "\n" + "".join(lines[1:]))
    with pytest.raises(D.DatasetError, match="count"):
        D.load(tmp_path / "hdr")

    (tmp_path / "trunc").write_text("".join(lines[:-3]))
    with pytest.raises(D.DatasetError, match="truncated"):
        D.load(tmp_path / "trunc")


def test_normalisation_round_trip(ds):
    sp = D.split(ds, 0)
    ch = D.ChannelConfig.fit([ds[i] for i in sp.train])
    for t in ds:
        np.testing.assert_allclose(ch.denorm_effect(ch.norm_effect(t.effects)), t.effects, atol=1e-6)
        np.testing.assert_allclose(ch.denorm_action(ch.norm_action(t.actions)), t.actions, atol=1e-6)
    assert D.ChannelConfig.from_dict(ch.to_dict()).to_dict() == ch.to_dict()


def test_normalisation_uses_given_trajectories_only(ds):
    sp = D.split(ds, 0)
    a = D.ChannelConfig.fit([ds[i] for i in sp.train])
    b = D.ChannelConfig.fit(list(ds))
    assert not np.array_equal(a.effect_mean, b.effect_mean)


def test_trajectory_invariants(ds):
    for t in ds:
        assert t.phases[0] == 0.0 and t.phases[-1] == 1.0
        assert np.all(np.diff(t.phases) > 0)
        np.testing.assert_array_equal(t.effects[0], 0.0)
