import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajconv.social import (OccupancyEncoder, SocialConfig, angular_grid, circular_occupancy, encode_offsets,
                             square_occupancy)

SQ = SocialConfig("square_grid")
CI = SocialConfig("circular_map")
AN = SocialConfig("angular_grid")
EMPTY = np.zeros((0, 2))


def test_sizes():
    assert SQ.size == 100 and CI.size == 48 and AN.size == 45
    assert SQ.l * SQ.cell_side == 5.0


def test_empty_neighbourhoods():
    assert not square_occupancy((0, 0), EMPTY, SQ).any()
    assert circular_occupancy((0, 0), EMPTY, CI).shape == (48,)
    assert np.all(angular_grid((0, 0), EMPTY, AN) == 6.0)


def brute_square(subject, neighbors, cfg):
    out = np.zeros((cfg.l, cfg.l))
    half = cfg.l * cfg.cell_side / 2
    for nx, ny in neighbors:
        dx, dy = nx - subject[0], ny - subject[1]
        for i in range(cfg.l):
            for j in range(cfg.l):
                x0 = -half + i * cfg.cell_side
                y0 = -half + j * cfg.cell_side
                if x0 <= dx < x0 + cfg.cell_side and y0 <= dy < y0 + cfg.cell_side:
                    out[i, j] += 1
    return out.ravel()


def test_square_single_neighbor_matches_scan():
    got = square_occupancy((1.0, 1.0), [[1.1, 1.1]], SQ)
    assert got.sum() == 1
    assert np.array_equal(got, brute_square((1.0, 1.0), [[1.1, 1.1]], SQ))
    assert np.argmax(got) == 5 * 10 + 5


def test_circular_examples():
    got = circular_occupancy((0, 0), [[0.3, 0.0]], CI).reshape(12, 4)
    assert got[0, 0] == 1 and got.sum() == 1
    assert not circular_occupancy((0, 0), [[10.0, 0.0]], CI).any()
    q = circular_occupancy((0, 0), [[0.0, 1.2], [-1.2, -0.01], [0.3, -0.3]], CI).reshape(12, 4)
    assert q[2, 1] == 1 and q[2, 2] == 1 and q[0, 3] == 1


def test_angular_examples():
    got = angular_grid((0, 0), [[2.0, 0.0]], AN)
    assert got[0] == 2.0 and np.all(got[1:] == 6.0)
    got = angular_grid((0, 0), [[0.0, 3.0], [0.0, 1.0], [0.0, 7.0]], AN)
    assert got[int(90 // 8)] == 1.0


def brute_angular(subject, neighbors, cfg):
    n = int(360 / cfg.d)
    out = np.full(n, cfg.angular_range)
    for nx, ny in neighbors:
        dx, dy = nx - subject[0], ny - subject[1]
        r = np.hypot(dx, dy)
        if r == 0 or r >= cfg.angular_range:
            continue
        ang = np.degrees(np.arctan2(dy, dx)) % 360.0
        for k in range(n):
            if k * cfg.d <= ang < (k + 1) * cfg.d or (k == n - 1 and ang >= n * cfg.d):
                out[k] = min(out[k], r)
    return out


def brute_circular(subject, neighbors, cfg):
    out = np.zeros((cfg.c, 4))
    for nx, ny in neighbors:
        dx, dy = nx - subject[0], ny - subject[1]
        r = np.hypot(dx, dy)
        ang = np.degrees(np.arctan2(dy, dx)) % 360.0
        for j in range(cfg.c):
            if j * cfg.ring_spacing <= r < (j + 1) * cfg.ring_spacing:
                out[j, min(int(ang // 90), 3)] += 1
    return out.ravel()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-7, 7), st.floats(-7, 7)), max_size=8),
       st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
def test_encoders_match_brute_force(nbs, subject):
    nbs = np.array(nbs, dtype=float).reshape(-1, 2)
    assert np.array_equal(square_occupancy(subject, nbs, SQ), brute_square(subject, nbs, SQ))
    assert np.array_equal(circular_occupancy(subject, nbs, CI), brute_circular(subject, nbs, CI))
    assert np.allclose(angular_grid(subject, nbs, AN), brute_angular(subject, nbs, AN))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(-12, 12), st.integers(-12, 12)), max_size=6),
       st.tuples(st.integers(-8, 8), st.integers(-8, 8)))
def test_translation_invariance(nbs, shift):
    nbs = np.array(nbs, dtype=float).reshape(-1, 2) * 0.25
    shift = np.array(shift) * 0.25
    for fn, cfg in ((square_occupancy, SQ), (circular_occupancy, CI), (angular_grid, AN)):
        assert np.array_equal(fn((0.0, 0.0), nbs, cfg), fn(shift, nbs + shift, cfg))


def test_counts_and_ranges():
    rng = np.random.default_rng(0)
    nbs = rng.uniform(-4, 4, (30, 2))
    inside = np.sum(np.all(np.abs(nbs) < 2.5, axis=1))
    assert square_occupancy((0, 0), nbs, SQ).sum() == inside
    assert circular_occupancy((0, 0), nbs, CI).sum() == np.sum(np.hypot(*nbs.T) < 6.0)
    a = angular_grid((0, 0), nbs, AN)
    assert np.all((a > 0) & (a <= 6.0))


def test_binary_toggle_and_nan_padding():
    cfg = SocialConfig("square_grid", binary=True)
    offs = np.array([[[0.1, 0.1], [0.2, 0.2], [np.nan, np.nan]]])
    assert encode_offsets(offs, cfg).max() == 1.0
    assert encode_offsets(offs, SQ).max() == 2.0


def test_batched_shapes():
    offs = np.random.default_rng(1).normal(size=(4, 8, 5, 2))
    assert encode_offsets(offs, AN).shape == (4, 8, 45)


def test_config_validation():
    with pytest.raises(ValueError):
        SocialConfig("hexagon")
    with pytest.raises(ValueError):
        SocialConfig("square_grid", l=0)
    with pytest.raises(ValueError):
        SocialConfig("angular_grid", d=400)


def test_encoder_is_sklearn_compatible():
    from sklearn.base import clone
    enc = OccupancyEncoder(kind="circular_map", c=6)
    assert clone(enc).get_params()["c"] == 6
    feats = enc.fit_transform(np.zeros((2, 3, 1, 2)) + 0.3)
    assert feats.shape == (2, 3, 24)
