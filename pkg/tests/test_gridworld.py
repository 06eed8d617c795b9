import itertools

import numpy as np
import pytest

from oodrl import gridworld
from oodrl.gridworld import EnvState, GridSpec

UP, DOWN, LEFT, RIGHT = range(4)


def brute_force_distance(spec, src, dst, limit=40):
    """Shortest action sequence by iterative deepening over raw moves (no BFS)."""
    if src == dst:
        return 0
    frontier = {src}
    for depth in range(1, limit + 1):
        nxt = set()
        for cell in frontier:
            for dx, dy in ((0, -1), (0, 1), (-1, 0), (1, 0)):
                c = (cell[0] + dx, cell[1] + dy)
                if not (0 <= c[0] < spec.width and 0 <= c[1] < spec.height) or c in spec.wall_cells:
                    c = cell
                nxt.add(c)
        if dst in nxt:
            return depth
        frontier = nxt
    raise AssertionError("no path within limit")


def test_default_layout(train_spec):
    assert (train_spec.width, train_spec.height) == (12, 4)
    assert train_spec.wall_cells == {(6, 0), (6, 2), (6, 3)}
    assert all(c[0] < 6 for c in train_spec.start_region)
    assert all(c[0] > 6 for c in train_spec.goal_region)
    assert len(train_spec.start_region) == 24 and len(train_spec.goal_region) == 20
    assert train_spec.obs_dim == 144


def test_mirror_swaps_regions(train_spec, mirror_spec):
    assert set(mirror_spec.start_region) == set(train_spec.goal_region)
    assert set(mirror_spec.goal_region) == set(train_spec.start_region)
    assert mirror_spec.wall_cells == train_spec.wall_cells


def test_wall_plane_sums_to_three(train_spec, mirror_spec):
    assert gridworld.wall_plane(train_spec).sum() == 3
    np.testing.assert_array_equal(gridworld.wall_plane(train_spec), gridworld.wall_plane(mirror_spec))


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        gridworld.make_env("sideways")


def test_overlapping_regions_rejected():
    with pytest.raises(gridworld.LayoutError):
        gridworld.make_env("train", start_region=[(0, 0)], goal_region=[(0, 0)])


def test_disconnected_layout_rejected():
    full_wall = [(6, y) for y in range(4)]
    with pytest.raises(gridworld.LayoutError):
        gridworld.make_env("train", wall_cells=full_wall)


def test_region_on_wall_rejected():
    with pytest.raises(gridworld.LayoutError):
        gridworld.make_env("train", start_region=[(6, 0)])


def test_reset_draws_within_regions_uniformly(train_spec):
    rng = np.random.default_rng(0)
    states = [gridworld.reset(train_spec, rng) for _ in range(24_000)]
    assert all(s.agent_pos in train_spec.start_region for s in states)
    assert all(s.goal_pos in train_spec.goal_region for s in states)
    assert all(s.steps_taken == 0 and s.outcome == "running" for s in states)
    counts = np.bincount([train_spec.start_region.index(s.agent_pos) for s in states], minlength=24)
    assert counts.min() > 850 and counts.max() < 1150


def test_goal_move(train_spec):
    s = EnvState((7, 0), (8, 0))
    s2, r, done = gridworld.step(s, train_spec, RIGHT)
    assert (r, done, s2.outcome, s2.agent_pos) == (100.0, True, "goal", (8, 0))


def test_non_goal_move(train_spec):
    s2, r, done = gridworld.step(EnvState((0, 0), (8, 0)), train_spec, DOWN)
    assert (r, done, s2.agent_pos, s2.steps_taken) == (-1.0, False, (0, 1), 1)


def test_wall_bump_keeps_position(train_spec):
    s2, r, done = gridworld.step(EnvState((5, 0), (8, 0)), train_spec, RIGHT)
    assert (s2.agent_pos, r, done) == ((5, 0), -1.0, False)


def test_boundary_bump_keeps_position(train_spec):
    s2, r, done = gridworld.step(EnvState((0, 0), (8, 0)), train_spec, UP)
    assert (s2.agent_pos, r, done) == ((0, 0), -1.0, False)


def test_timeout():
    spec = gridworld.make_env("train", max_steps=3)
    s = gridworld.EnvState((0, 0), (11, 3))
    for _ in range(3):
        s, r, done = gridworld.step(s, spec, UP)
    assert (s.outcome, done, r, s.steps_taken) == ("timeout", True, -1.0, 3)
    with pytest.raises(gridworld.EpisodeFinished):
        gridworld.step(s, spec, DOWN)


def test_step_after_goal_rejected(train_spec):
    s, _, _ = gridworld.step(EnvState((7, 0), (8, 0)), train_spec, RIGHT)
    with pytest.raises(gridworld.EpisodeFinished):
        gridworld.step(s, train_spec, LEFT)


def test_transition_determinism(train_spec):
    for cell, a in itertools.product(train_spec.free_cells(), range(4)):
        s = EnvState(cell, (11, 3) if cell != (11, 3) else (0, 0))
        assert gridworld.step(s, train_spec, a) == gridworld.step(s, train_spec, a)


def test_encode_planes(train_spec):
    s = EnvState((2, 1), (9, 3))
    obs = gridworld.encode(s, train_spec)
    planes = obs.reshape(3, 4, 12)
    assert planes[0, 1, 2] == 1 and planes[0].sum() == 1
    assert planes[1, 3, 9] == 1 and planes[1].sum() == 1
    np.testing.assert_array_equal(planes[2], gridworld.wall_plane(train_spec))
    assert set(np.unique(obs)) <= {0.0, 1.0}
    np.testing.assert_array_equal(gridworld.Encoder(train_spec)(s), obs)


def test_encode_flatten_order(train_spec):
    obs = gridworld.encode(EnvState((3, 2), (11, 0)), train_spec)
    assert obs[2 * 12 + 3] == 1.0
    assert obs[48 + 11] == 1.0
    assert obs[96 + 6] == 1.0  # wall (6, 0)


def test_shortest_path_small_cases(train_spec):
    assert gridworld.shortest_path_len((1, 1), (1, 1), train_spec) == 0
    assert gridworld.shortest_path_len((1, 1), (2, 1), train_spec) == 1
    # through the gap at (6, 1)
    assert gridworld.shortest_path_len((5, 0), (7, 0), train_spec) == 4


def test_shortest_path_matches_brute_force(train_spec):
    for src in train_spec.start_region:
        for dst in train_spec.goal_region:
            assert gridworld.shortest_path_len(src, dst, train_spec) == brute_force_distance(train_spec, src, dst)


def test_shortest_path_unreachable_and_invalid():
    spec = GridSpec(wall_cells=frozenset((6, y) for y in range(4)), start_region=((0, 0),), goal_region=((11, 0),))
    with pytest.raises(gridworld.Unreachable):
        gridworld.shortest_path_len((0, 0), (11, 0), spec)
    with pytest.raises(ValueError):
        gridworld.shortest_path_len((6, 0), (0, 0), spec)


def bfs_policy_rollout(spec, state):
    ret = 0.0
    while not state.done:
        d = gridworld.shortest_path_len(state.agent_pos, state.goal_pos, spec)
        for a in range(4):
            nxt, _, _ = gridworld.step(state, spec, a)
            if gridworld.shortest_path_len(nxt.agent_pos, state.goal_pos, spec) == d - 1:
                break
        state, r, _ = gridworld.step(state, spec, a)
        ret += r
    return ret, state


@pytest.mark.parametrize("variant", ["train", "mirror"])
def test_optimal_return_matches_bfs(variant):
    spec = gridworld.make_env(variant)
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = gridworld.reset(spec, rng)
        d = gridworld.shortest_path_len(s.agent_pos, s.goal_pos, spec)
        ret, end = bfs_policy_rollout(spec, s)
        assert end.outcome == "goal" and end.steps_taken == d
        assert ret == 100 - (d - 1)


def test_steps_never_exceed_max(train_spec):
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = gridworld.reset(train_spec, rng)
        while not s.done:
            s, _, _ = gridworld.step(s, train_spec, int(rng.integers(4)))
            assert s.steps_taken <= train_spec.max_steps


def test_custom_wall_position():
    spec = gridworld.make_env("train", wall_x=4, gap_y=3)
    assert spec.wall_cells == {(4, 0), (4, 1), (4, 2)}
    assert max(c[0] for c in spec.start_region) == 3
