import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from deskdrive.action_expert import (CandidateEntry, CandidateSet, DecoderError, Generator, SelectionError,
                                     TrajectoryDecoder, candidate_set, decode, feasibility_mask, interpolate_along,
                                     oracle_trajectory, select_index, select_optimal, speed_profile_distances)
from deskdrive.encoder import encode
from deskdrive.meta import ALL_ACTIONS, N_JOINT, MetaAction, Path, Speed
from deskdrive.policy import ActionDistribution
from deskdrive.scenarios import starter_pack, turn_route, spec
from deskdrive.sim import load_scenario, step

from helpers import world_at


def test_stop_from_rest_keeps_speed_waypoints_at_origin(empty_road):
    t = oracle_trajectory(world_at(empty_road), MetaAction(Speed.Stop, Path.Straight))
    assert np.all(t.speed_waypoints == 0.0)


def test_constant_speed_waypoints(empty_road):
    t = oracle_trajectory(world_at(empty_road, speed=5.0), MetaAction(Speed.MaintainModerateSpeed, Path.Straight))
    np.testing.assert_allclose(t.speed_waypoints[:, 0], [2.5, 5.0, 7.5, 10.0, 12.5, 15.0], atol=1e-12)
    np.testing.assert_allclose(t.speed_waypoints[:, 1], 0.0, atol=1e-12)


def test_lane_follow_on_straight_route(empty_road):
    t = oracle_trajectory(world_at(empty_road), MetaAction(Speed.MaintainSlowSpeed, Path.LaneFollow))
    np.testing.assert_allclose(t.path_waypoints[:, 0], np.arange(1.0, 21.0), atol=1e-12)
    np.testing.assert_allclose(t.path_waypoints[:, 1], 0.0, atol=1e-12)


def test_speed_profiles():
    # ramp at 2 m/s^2 from 1 m/s toward 3 m/s, reached after 1 s
    np.testing.assert_allclose(speed_profile_distances(Speed.SpeedUp, 1.0), [0.75, 2.0, 3.5, 5.0, 6.5, 8.0])
    # rapid slowdown from 3 m/s clamps at a standstill after 0.75 s
    np.testing.assert_allclose(speed_profile_distances(Speed.SlowdownRapidly, 3.0), [1.0, 1.125, 1.125, 1.125,
                                                                                      1.125, 1.125])
    np.testing.assert_allclose(speed_profile_distances(Speed.MaintainFastSpeed, 8.0), 8.0 * 0.5 * np.arange(1, 7))


@given(seed=st.integers(0, 5000), scenario=st.integers(0, 19), k=st.integers(0, 41))
def test_oracle_geometry(seed, scenario, k):
    rng = np.random.default_rng(seed)
    w = load_scenario(starter_pack()[scenario], 0)
    for _ in range(int(rng.integers(0, 12))):
        r = step(w, oracle_trajectory(w, MetaAction(Speed.MaintainModerateSpeed, Path.LaneFollow)))
        if r.done:
            break
        w = r.world
    t = oracle_trajectory(w, ALL_ACTIONS[k])
    assert t.path_waypoints.shape == (20, 2) and t.speed_waypoints.shape == (6, 2)
    assert np.max(np.abs(t.spacing() - 1.0)) <= 1e-6
    first = np.hypot(*t.path_waypoints[0])
    assert abs(first - 1.0) <= 1e-6 or ALL_ACTIONS[k].path in (Path.LaneFollow, Path.ChangeLaneLeft,
                                                                Path.ChangeLaneRight)
    assert np.all(np.isfinite(t.flat()))


def test_turn_arcs_have_eight_metre_radius(empty_road):
    w = world_at(empty_road)
    for path, sign in ((Path.TurnLeft, 1.0), (Path.TurnRight, -1.0)):
        pts = oracle_trajectory(w, MetaAction(Speed.Stop, path)).path_waypoints
        np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1] - sign * 8.0), 8.0, atol=1e-9)


def test_lane_change_reaches_adjacent_lane(two_lane_road):
    w = world_at(two_lane_road, x=10.0)
    pts = oracle_trajectory(w, MetaAction(Speed.MaintainModerateSpeed, Path.ChangeLaneLeft)).path_waypoints
    # 20 m of arc covers slightly less than 20 m of route, so the blend is nearly done
    assert abs(pts[-1, 1] - 3.5) < 0.01 and pts[0, 1] < 0.1
    assert np.all(np.diff(pts[:, 1]) >= -1e-12)


def test_repeated_lane_change_continues_smoothly(two_lane_road):
    """Re-issuing a lane change mid-manoeuvre follows the same lateral curve."""
    w = world_at(two_lane_road, x=10.0)
    first = oracle_trajectory(w, MetaAction(Speed.MaintainModerateSpeed, Path.ChangeLaneLeft)).path_waypoints
    mid = first[7]
    heading = np.arctan2(*(first[8] - first[6])[::-1])
    w2 = world_at(two_lane_road, x=10.0 + mid[0], y=mid[1], heading=heading)
    again = oracle_trajectory(w2, MetaAction(Speed.MaintainModerateSpeed, Path.ChangeLaneLeft)).path_waypoints
    c, s = np.cos(heading), np.sin(heading)
    world_again = np.stack([again[:, 0] * c - again[:, 1] * s, again[:, 0] * s + again[:, 1] * c], 1) + mid
    lat_first = np.interp(world_again[:8, 0], first[:, 0], first[:, 1])
    np.testing.assert_allclose(world_again[:8, 1], lat_first, atol=0.02)


def test_single_lane_road_masks_lane_changes(empty_road):
    cands = candidate_set(world_at(empty_road))
    assert len(cands.entries) == 42
    # both lane-change columns are masked for all 7 speed choices: 42 - 2 * 7
    assert cands.mask.sum() == 28
    for e in cands.entries:
        assert e.feasible == (e.action.path not in (Path.ChangeLaneLeft, Path.ChangeLaneRight))
        if e.feasible:
            e.trajectory.check()


def test_candidate_set_from_decoder(two_lane_road):
    w = world_at(two_lane_road, speed=3.0)
    cands = candidate_set(w, TrajectoryDecoder(seed=1))
    assert len(cands.entries) == 42 and cands.mask.sum() == 35
    assert all(e.trajectory.is_finite() for e in cands.entries)
    with pytest.raises(ValueError):
        candidate_set(w, "decoder")


def test_feasibility_on_turn_route():
    s = spec("t", "TrafficSign", turn_route(30.0, 30.0, 1), lanes_right=1)
    m = feasibility_mask(load_scenario(s, 0)).reshape(7, 6)
    assert not m[:, Path.ChangeLaneLeft].any() and m[:, Path.ChangeLaneRight].all()


# -- decoder ------------------------------------------------------------------------


def test_decoder_mean_mode_is_deterministic(empty_road):
    d = TrajectoryDecoder(seed=2)
    emb = encode(world_at(empty_road, speed=4.0))
    meta = MetaAction(Speed.SpeedUp, Path.LaneFollow)
    a = decode(emb, meta, d, deterministic=True)
    b = decode(emb, meta, d, deterministic=True)
    assert a == b
    c = decode(emb, meta, d, np.random.default_rng(0))
    assert c != a and c.is_finite()


def test_fresh_decoder_output_shape(empty_road):
    d = TrajectoryDecoder(seed=5)
    emb = encode(world_at(empty_road))
    for a in ALL_ACTIONS[::5]:
        t = decode(emb, a, d, deterministic=True)
        assert t.path_waypoints.shape == (20, 2) and t.speed_waypoints.shape == (6, 2) and t.is_finite()
        # unit heading steps make the decoded path spacing exact by construction
        assert np.max(np.abs(t.spacing() - 1.0)) < 1e-9


def test_decoder_rejects_non_finite_parameters(empty_road):
    d = TrajectoryDecoder()
    with torch.no_grad():
        d.mu.bias[0] = float("nan")
    with pytest.raises(DecoderError):
        decode(encode(world_at(empty_road)), ALL_ACTIONS[0], d, deterministic=True)


def test_interpolate_along_straight_path():
    path = torch.stack([torch.arange(1.0, 21.0, dtype=torch.float64), torch.zeros(20, dtype=torch.float64)], -1)[None]
    arc = torch.tensor([[0.0, 0.5, 2.25, 19.5, 21.0]], dtype=torch.float64)
    np.testing.assert_allclose(interpolate_along(path, arc)[0, :, 0].numpy(), [0.0, 0.5, 2.25, 19.5, 21.0])


def test_generator_sources(empty_road):
    w = world_at(empty_road, speed=2.0)
    meta = MetaAction(Speed.SlowDown, Path.LaneFollow)
    assert Generator().source == "oracle" and Generator().trajectory(w, meta) == oracle_trajectory(w, meta)
    g = Generator(TrajectoryDecoder())
    assert g.source == "decoder" and g.trajectory(w, meta).is_finite()


# -- selection ------------------------------------------------------------------------


def _cands(mask):
    t = oracle_trajectory(load_scenario(starter_pack()[0], 0), ALL_ACTIONS[0])
    return CandidateSet(tuple(CandidateEntry(a, t, bool(m)) for a, m in zip(ALL_ACTIONS, mask)))


def test_one_hot_distribution_selects_that_action(empty_road):
    cands = candidate_set(world_at(empty_road, speed=3.0))
    sp, pa = np.zeros(7), np.zeros(6)
    sp[Speed.MaintainFastSpeed], pa[Path.TurnRight] = 1.0, 1.0
    action, traj = select_optimal(cands, ActionDistribution(sp, pa))
    assert action == MetaAction(Speed.MaintainFastSpeed, Path.TurnRight)
    assert traj == cands.entries[action.index].trajectory


def test_mass_on_infeasible_action_falls_back():
    mask = np.ones(42, dtype=bool)
    mask[MetaAction(Speed.Stop, Path.ChangeLaneLeft).index] = False
    sp = np.array([0.05, 0.05, 0.05, 0.05, 0.08, 0.12, 0.6])
    pa = np.array([0.05, 0.05, 0.7, 0.05, 0.05, 0.1])
    action, _ = select_optimal(_cands(mask), ActionDistribution(sp, pa))
    # Stop x ChangeLaneLeft (0.42) is masked; MaintainFast x ChangeLaneLeft (0.084) beats Stop x LaneFollow (0.06)
    scores = np.outer(sp, pa).ravel() * mask
    assert action.index == int(np.argmax(scores))
    assert action == MetaAction(Speed.MaintainFastSpeed, Path.ChangeLaneLeft)


def test_ties_go_to_lowest_index():
    dist = ActionDistribution(np.full(7, 1 / 7), np.full(6, 1 / 6))
    mask = np.zeros(42, dtype=bool)
    mask[[17, 9, 30]] = True
    assert select_optimal(_cands(mask), dist)[0].index == 9


def test_no_feasible_candidate_raises():
    with pytest.raises(SelectionError):
        select_optimal(_cands(np.zeros(42, dtype=bool)), ActionDistribution(np.full(7, 1 / 7), np.full(6, 1 / 6)))


@given(st.integers(0, 100_000), st.floats(1e-3, 1e3))
def test_selection_invariant_to_positive_rescaling(seed, scale):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(N_JOINT))
    mask = rng.random(N_JOINT) < 0.7
    mask[rng.integers(N_JOINT)] = True
    assert select_index(p, mask) == select_index(p * scale, mask)
