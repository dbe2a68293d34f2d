import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from beaconloc.environment import (
    BUNDLED_MAPS, Environment, bundled_environments, is_colliding, k_nearest_beacon_distances,
    load_map, parse_map, serialize_map,
)
from beaconloc.errors import MapFormatError, ValidationError

from oracles import brute_nearest


@st.composite
def environments(draw):
    w = draw(st.integers(3, 12))
    h = draw(st.integers(3, 12))
    cells = [(x, y) for y in range(h) for x in range(w)]
    kinds = draw(st.lists(st.sampled_from(".#B"), min_size=len(cells), max_size=len(cells)))
    beacon_cells = [c for c, k in zip(cells, kinds) if k == "B"]
    assume(len(beacon_cells) >= 5)
    obstacles = [c for c, k in zip(cells, kinds) if k == "#"]
    beacons = []
    for x, y in beacon_cells:
        if draw(st.booleans()):
            beacons.append((x + 0.5, y + 0.5))
        else:
            fx = draw(st.floats(0.0, 0.999, allow_nan=False))
            fy = draw(st.floats(0.0, 0.999, allow_nan=False))
            beacons.append((x + fx, y + fy))
    return Environment(w, h, obstacles, beacons)


@given(environments())
def test_serialize_parse_round_trip(env):
    text = serialize_map(env)
    back = parse_map(text)
    assert back == env
    assert np.array_equal(back.beacons, env.beacons)
    assert serialize_map(back) == text


@pytest.mark.parametrize("name", sorted(BUNDLED_MAPS))
def test_bundled_maps_round_trip(name):
    env = load_map(name)
    assert parse_map(serialize_map(env)) == env
    assert env.n_beacons >= 5


def test_bundled_sizes():
    envs = bundled_environments()
    assert (envs["world10"].width, envs["world18"].width, envs["world27"].width) == (10, 18, 27)
    assert envs["labyrinth"].width == 20


def test_ragged_row_reports_line():
    with pytest.raises(MapFormatError) as err:
        parse_map("3 3\n..B\n.#\nBBB\n")
    assert err.value.line == 3
    assert "line 3" in str(err.value)


def test_unknown_character_reports_line():
    with pytest.raises(MapFormatError) as err:
        parse_map("3 2\nBBB\nBBx\n")
    assert err.value.line == 3


def test_missing_rows():
    with pytest.raises(MapFormatError):
        parse_map("3 3\nBBB\nBB.\n")


def test_zero_beacons_rejected():
    with pytest.raises(ValidationError):
        parse_map("3 2\n...\n.#.\n", k_measure=1)


def test_bad_override_line():
    with pytest.raises(MapFormatError) as err:
        parse_map("5 1\nBBBBB\nbeacon 9 1 1\n")
    assert err.value.line == 3


def test_beacon_inside_obstacle_rejected():
    with pytest.raises(ValidationError):
        Environment(3, 3, [(1, 1)], [(1.5, 1.5)], k_measure=1)


def test_too_few_beacons_for_k():
    with pytest.raises(ValidationError):
        Environment(3, 3, [], [(0.5, 0.5)] * 3, k_measure=5)


def test_empty_world_collisions():
    env = Environment(4, 4, [], [(0.5, 0.5)], k_measure=1)
    assert not is_colliding(env, (2.0, 2.0))
    assert is_colliding(env, (-0.01, 2.0))
    assert is_colliding(env, (2.0, 4.01))
    assert is_colliding(env, (3.9, 2.0), radius=0.2)


def test_obstacle_cell_half_open():
    env = Environment(4, 4, [(1, 1)], [(0.5, 0.5)], k_measure=1)
    assert is_colliding(env, (1.5, 1.5))
    assert is_colliding(env, (1.0, 1.0))
    assert not is_colliding(env, (0.99, 1.5))
    assert is_colliding(env, (0.95, 1.5), radius=0.1)


@given(environments(), st.lists(st.tuples(st.floats(-1, 13), st.floats(-1, 13)), min_size=1, max_size=30),
       st.floats(0, 1.5))
def test_vector_mask_matches_pointwise_definition(env, pts, radius):
    pts = np.array(pts)
    mask = env.colliding_mask(pts, radius)
    for p, m in zip(pts, mask):
        out = p[0] - radius < 0 or p[1] - radius < 0 or p[0] + radius > env.width or p[1] + radius > env.height
        near = any(
            math.hypot(max(x - p[0], 0, p[0] - x - 1), max(y - p[1], 0, p[1] - y - 1)) <= radius
            for x, y in env.obstacles
        )
        assert m == (out or near)


@given(environments(), st.floats(0, 12), st.floats(0, 12), st.integers(1, 5))
def test_nearest_distances_match_brute_force(env, x, y, k):
    c = (x, y)
    ref = brute_nearest(env.beacons, c, k)
    assert np.allclose(k_nearest_beacon_distances(env, c, k), ref)
    assert np.allclose(env.nearest_distances_batch(np.array([c]), k)[0], ref)
    idx = env.nearest_beacon_indices(np.array([c]), k)[0]
    assert np.allclose(np.hypot(*(env.beacons[idx] - c).T), ref)


def test_k_nearest_sorted_example():
    env = Environment(10, 10, [], [(0.5, 0.5), (3.5, 0.5), (0.5, 4.5), (9.5, 9.5), (5.5, 5.5)])
    d = env.k_nearest_beacon_distances((0.5, 0.5), 3)
    assert np.allclose(d, [0.0, 3.0, 4.0])


def test_rasterize_channels(world10):
    img = world10.rasterize()
    assert img.shape == (2, 10, 10)
    assert img[0].sum() == len(world10.obstacles)
    assert img[1].sum() == world10.n_beacons


def test_free_samples_never_collide(world10, rng):
    pts = world10.sample_free_positions(500, rng)
    assert not world10.colliding_mask(pts).any()


def test_environment_is_read_only(world10):
    with pytest.raises(ValueError):
        world10.beacons[0, 0] = 3.0
