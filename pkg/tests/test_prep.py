import numpy as np
import pytest
from scipy import stats
from scipy.spatial.distance import pdist

from trajconv.data import Sample
from trajconv.ndmath import ContractError
from trajconv.prep import (AugmentConfig, MIRROR_NONE, MIRROR_X, MIRROR_Y, NORM_MODES, NormContext, augment_arrays,
                           denormalize, denormalize_arrays, draw_mirror, jitter_sample, mirror_sample,
                           normalize, normalize_arrays, rotate_sample)


def make_sample(rng=None, last=(8.0, 8.0)):
    rng = rng or np.random.default_rng(0)
    obs = np.cumsum(rng.normal(0.3, 0.1, (8, 2)), axis=0)
    obs += np.asarray(last) - obs[-1]
    fut = obs[-1] + np.cumsum(rng.normal(0.3, 0.1, (12, 2)), axis=0)
    nbs = [obs[t] + rng.normal(0, 2, (3, 2)) for t in range(8)]
    return Sample("s", 1, 0, obs, fut, nbs)


def test_abs_is_identity():
    s = make_sample()
    n, _ = normalize(s, "abs")
    assert np.array_equal(n.obs, s.obs) and np.array_equal(n.future, s.future)


def test_tobs_and_t0_origins():
    s = make_sample()
    n, ctx = normalize(s, "tobs")
    assert np.array_equal(n.obs[7], [0.0, 0.0]) and np.allclose(ctx.anchor[0], [8, 8])
    assert np.allclose(n.neighbors[3], s.neighbors[3] - s.obs[7])
    n0, _ = normalize(s, "t0")
    assert np.array_equal(n0.obs[0], [0.0, 0.0])


def test_rel_displacements():
    obs = np.array([[0, 0], [1, 0], [2, 0]] + [[2.0 + k, 0] for k in range(1, 6)], dtype=float)
    s = Sample("s", 1, 0, obs, np.zeros((12, 2)), [np.zeros((0, 2))] * 8)
    n, _ = normalize(s, "rel")
    assert np.allclose(n.obs[:3], [[0, 0], [1, 0], [1, 0]])
    assert np.allclose(n.neighbors[0].shape, (0, 2))


def test_rel_denormalize_cumsum():
    ctx = NormContext("rel", np.array([[5.0, 5.0]]))
    out = denormalize(np.tile([1.0, 0.0], (12, 1)), ctx)
    assert np.allclose(out, [[6 + k, 5] for k in range(12)])


def test_unknown_mode_is_contract_error():
    with pytest.raises(ContractError):
        denormalize_arrays(np.zeros((1, 12, 2)), NormContext("polar", np.zeros((1, 2))))


@pytest.mark.parametrize("mode", NORM_MODES)
def test_round_trip_all_modes(mode):
    rng = np.random.default_rng(1)
    obs = rng.normal(0, 10, (50, 8, 2))
    fut = rng.normal(0, 10, (50, 12, 2))
    _, target, _, ctx = normalize_arrays(obs, fut, None, mode)
    assert np.max(np.abs(denormalize_arrays(target, ctx) - fut)) <= 1e-5
    s = make_sample(rng)
    n, c = normalize(s, mode)
    assert np.max(np.abs(denormalize(n.future, c) - s.future)) <= 1e-5


def test_rotation_examples():
    s = make_sample()
    assert np.allclose(rotate_sample(s, 0.0).obs, s.obs)
    q = Sample("s", 1, 0, np.tile([1.0, 0.0], (8, 1)), np.zeros((12, 2)), [np.zeros((0, 2))] * 8)
    assert np.allclose(rotate_sample(q, np.pi / 2).obs, np.tile([0.0, 1.0], (8, 1)), atol=1e-12)


def test_rotation_preserves_distances():
    s = make_sample()
    r = rotate_sample(s, 1.234)
    pts = np.concatenate([s.obs, s.future] + s.neighbors)
    rpts = np.concatenate([r.obs, r.future] + r.neighbors)
    assert np.max(np.abs(pdist(pts) - pdist(rpts))) <= 1e-6


def test_mirror_forced_and_involution():
    s = Sample("s", 1, 0, np.tile([1.0, 2.0], (8, 1)), np.tile([1.0, 2.0], (12, 1)), [np.array([[3.0, 4.0]])] * 8)
    mx = mirror_sample(s, axis="x")
    assert np.allclose(mx.obs[0], [1, -2]) and np.allclose(mx.neighbors[0], [[3, -4]])
    assert np.allclose(mirror_sample(mx, axis="x").obs, s.obs)
    assert np.allclose(mirror_sample(s, axis="y").future[0], [-1, 2])


def test_mirror_probabilities_chi_square():
    rng = np.random.default_rng(123)
    draws = np.array([draw_mirror(rng) for _ in range(100_000)])
    counts = [np.sum(draws == c) for c in (MIRROR_X, MIRROR_Y, MIRROR_NONE)]
    _, p = stats.chisquare(counts, [25_000, 25_000, 50_000])
    assert p > 0.01


def test_jitter_zero_sigma_is_identity():
    s = make_sample()
    j = jitter_sample(s, 0.0, np.random.default_rng(0))
    assert np.array_equal(j.obs, s.obs)


def test_jitter_statistics_and_clean_targets():
    base = Sample("s", 1, 0, np.zeros((8, 2)), np.zeros((12, 2)), [np.zeros((1, 2))] * 8)
    rng = np.random.default_rng(5)
    noise = np.concatenate([jitter_sample(base, 0.05, rng).obs.ravel() for _ in range(6250)])
    assert noise.size == 100_000
    assert abs(noise.std() - 0.05) <= 0.02 * 0.05
    assert abs(noise.mean()) <= 3 * 0.05 / np.sqrt(noise.size)
    j = jitter_sample(base, 0.05, rng)
    assert np.array_equal(j.future, base.future) and not np.array_equal(j.neighbors[0], base.neighbors[0])
    with pytest.raises(ValueError):
        jitter_sample(base, -1.0, rng)


def _batch(n=6):
    rng = np.random.default_rng(9)
    obs, tgt = rng.normal(size=(n, 8, 2)), rng.normal(size=(n, 12, 2))
    nb = rng.normal(size=(n, 8, 3, 2))
    nb[:, :, 2] = np.nan
    return obs, tgt, nb, np.full((n, 8), 2)


def test_augment_is_deterministic_and_batch_independent():
    obs, tgt, nb, counts = _batch()
    cfg = AugmentConfig.from_names(["rotate", "mirror", "noise"], 0.05, seed=4)
    a = augment_arrays(obs, tgt, nb, counts, np.arange(6), 3, cfg)
    b = augment_arrays(obs, tgt, nb, counts, np.arange(6), 3, cfg)
    part = augment_arrays(obs[2:4], tgt[2:4], nb[2:4], counts[2:4], np.arange(2, 4), 3, cfg)
    for x, y, z in zip(a, b, part):
        assert np.array_equal(x, y, equal_nan=True)
        assert np.array_equal(x[2:4], z, equal_nan=True)
    c = augment_arrays(obs, tgt, nb, counts, np.arange(6), 4, cfg)
    assert not np.array_equal(a[0], c[0])
    assert np.isnan(a[2][:, :, 2]).all()


def test_augment_rotation_keeps_target_geometry():
    obs, tgt, nb, counts = _batch()
    cfg = AugmentConfig(rotate=True, seed=1)
    _, t2, _ = augment_arrays(obs, tgt, nb, counts, np.arange(6), 0, cfg)
    assert np.allclose(np.linalg.norm(t2, axis=-1), np.linalg.norm(tgt, axis=-1))


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig.from_names(["reverse"])
    with pytest.raises(ValueError):
        AugmentConfig(noise=True, noise_sigma=-0.1)
