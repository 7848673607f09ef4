import numpy as np
import pytest

from tbsim.episode import (
    Episode, MAP_TYPE_INDEX, RawPolyline, TL_STATE_INDEX, load_episode,
    load_raw, save_raw,
)
from tbsim.preprocess import (
    PreprocessConfig, filter_agents, filter_map, interpolate_gaps, preprocess,
    resample_polyline, split_polylines,
)
from tbsim.synthetic import SyntheticConfig, generate_synthetic


def _line(length, y=0.0, n=2):
    return np.stack([np.linspace(0, length, n), np.full(n, y)], axis=-1)


# ---------------------------------------------------------------------------
# split_polylines
# ---------------------------------------------------------------------------


def test_split_straight_45m():
    # oracle: 1 m resampling of a 45 m line gives 46 nodes -> chunks 20/20/6
    chunks, warn = split_polylines([RawPolyline(0, _line(45.0))])
    assert warn == 0
    assert [len(c.nodes) for c in chunks] == [20, 20, 6]
    assert all(c.type_index == 0 for c in chunks)
    assert [c.chunk for c in chunks] == [0, 1, 2]
    assert [c.last_chunk for c in chunks] == [False, False, True]


def test_split_3m_single_chunk():
    chunks, _ = split_polylines([RawPolyline(2, _line(3.0))])
    assert len(chunks) == 1
    assert len(chunks[0].nodes) == 4
    np.testing.assert_allclose(chunks[0].nodes[:, 0], [0, 1, 2, 3], atol=1e-9)


def test_split_degenerate_dropped_with_warning():
    degenerate = RawPolyline(0, np.array([[1.0, 1.0], [1.0, 1.0]]))
    chunks, warn = split_polylines([degenerate, RawPolyline(1, _line(2.0))])
    assert warn == 1
    assert len(chunks) == 1 and chunks[0].type_index == 1


def test_split_direction_points_to_next_node():
    chunks, _ = split_polylines([RawPolyline(0, _line(45.0))])
    flat_nodes = np.concatenate([c.nodes for c in chunks])
    flat_dirs = np.concatenate([c.dirs for c in chunks])
    expect = flat_nodes[1:] - flat_nodes[:-1]
    expect = expect / np.linalg.norm(expect, axis=-1, keepdims=True)
    np.testing.assert_allclose(flat_dirs[:-1], expect, atol=1e-9)
    np.testing.assert_allclose(flat_dirs[-1], expect[-1], atol=1e-9)


def test_split_arc_length_conserved():
    # reassembling the chunks of one source recovers the resampled arc length
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = rng.integers(3, 12)
        nodes = np.cumsum(rng.uniform(0.5, 6.0, (n, 2)), axis=0)
        resampled = resample_polyline(nodes, 1.0)
        chunks, _ = split_polylines([RawPolyline(0, nodes)])
        flat = np.concatenate([c.nodes for c in chunks])
        np.testing.assert_allclose(flat, resampled, atol=1e-9)
        arc_out = np.linalg.norm(np.diff(flat, axis=0), axis=-1).sum()
        arc_in = np.linalg.norm(np.diff(resampled, axis=0), axis=-1).sum()
        assert abs(arc_out - arc_in) < 1e-6


def test_split_spacing_is_one_meter():
    chunks, _ = split_polylines([RawPolyline(0, _line(45.0))])
    flat = np.concatenate([c.nodes for c in chunks])
    gaps = np.linalg.norm(np.diff(flat, axis=0), axis=-1)
    np.testing.assert_allclose(gaps, 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# filter_map
# ---------------------------------------------------------------------------


def _chunked(lines):
    chunks, _ = split_polylines(lines)
    return chunks


def test_filter_map_truncates_to_max():
    lines = [RawPolyline(0, _line(5.0, y=float(i))) for i in range(1200)]
    chunks = _chunked(lines)
    agent_points = np.array([[0.0, 0.0]])
    keep, _ = filter_map(chunks, agent_points, n_map_max=1024)
    assert len(keep) == 1024
    # closest (lowest y) polylines survive
    assert keep == sorted(keep)
    assert 0 in keep and 1199 not in keep


def test_filter_map_distance_cutoff():
    lines = [RawPolyline(0, _line(5.0)), RawPolyline(0, _line(5.0, y=10000.0))]
    keep, stats = filter_map(_chunked(lines), np.array([[0.0, 0.0]]),
                             distance_cutoff=2000.0)
    assert keep == [0] and stats["far"] == 1


def test_filter_map_tie_break_low_index():
    # two polylines at the same distance compete for the last slot
    lines = [RawPolyline(0, _line(5.0, y=0.0)),
             RawPolyline(0, _line(5.0, y=2.0)),
             RawPolyline(0, _line(5.0, y=-2.0))]
    keep, _ = filter_map(_chunked(lines), np.array([[0.0, 0.0]]), n_map_max=2)
    assert keep == [0, 1]


def test_filter_map_short_polyline_removed():
    chunks = _chunked([RawPolyline(0, _line(1.0)), RawPolyline(0, _line(30.0))])
    keep, stats = filter_map(chunks, np.array([[0.0, 0.0]]), min_nodes=3)
    assert stats["short"] == 1
    assert all(len(chunks[i].nodes) >= 3 for i in keep)


def test_filter_map_idempotent():
    lines = [RawPolyline(0, _line(40.0, y=float(3 * i))) for i in range(40)]
    chunks = _chunked(lines)
    pts = np.array([[0.0, 0.0], [5.0, 5.0]])
    keep1, _ = filter_map(chunks, pts, n_map_max=50)
    again = [chunks[i] for i in keep1]
    keep2, _ = filter_map(again, pts, n_map_max=50)
    assert keep2 == list(range(len(again)))


# ---------------------------------------------------------------------------
# filter_agents
# ---------------------------------------------------------------------------


def _raw_with_agents(n_agents, t=91, positions=None, yaws=None, valid=None,
                     roles=None, types=None):
    cfg = SyntheticConfig(template="straight-lanes", n_agents=1, n_steps=t)
    base = generate_synthetic(cfg, seed=0)
    pos = np.zeros((t, n_agents, 2))
    yaw = np.zeros((t, n_agents))
    val = np.ones((t, n_agents), dtype=bool)
    if positions is not None:
        pos = positions
    if yaws is not None:
        yaw = yaws
    if valid is not None:
        val = valid
    role = np.zeros((n_agents, 3), dtype=bool)
    role[0, 0] = True
    if roles is not None:
        role = roles
    ty = np.zeros(n_agents, dtype=int) if types is None else types
    base.agent_pos, base.agent_yaw, base.agent_valid = pos, yaw, val
    base.agent_role = role
    base.agent_type = ty
    base.agent_vel = np.zeros((t, n_agents, 2))
    base.agent_size = np.tile([4.5, 2.0, 1.6], (n_agents, 1))
    base.sdc_index = 0
    return base


def test_filter_agents_truncates_to_max():
    t, n = 91, 80
    pos = np.zeros((t, n, 2))
    steps = np.arange(t)
    for j in range(n):
        # moving agents at increasing distance from the sdc
        pos[:, j, 0] = steps * 0.5
        pos[:, j, 1] = 3.0 * j
    raw = _raw_with_agents(n, positions=pos)
    keep, stats = filter_agents(raw, np.zeros((0, 2)), PreprocessConfig())
    assert len(keep) == 64
    assert stats["truncated"] == 16
    assert keep == sorted(keep)
    assert 0 in keep  # sdc kept


def test_filter_agents_parked_far_removed():
    t, n = 91, 2
    pos = np.zeros((t, n, 2))
    pos[:, 0, 0] = np.arange(t) * 0.5
    pos[:, 1] = [500.0, 500.0]  # parked far away
    pos[:, 1, 0] += np.linspace(0, 0.1, t)  # 0.1 m displacement
    raw = _raw_with_agents(n, positions=pos)
    keep, stats = filter_agents(raw, np.zeros((0, 2)), PreprocessConfig())
    assert keep == [0]
    assert stats["parked_far"] == 1


def test_filter_agents_yaw_jump_removed():
    t, n = 91, 2
    pos = np.zeros((t, n, 2))
    pos[:, 0, 0] = np.arange(t) * 0.5
    pos[:, 1] = [10.0, 0.0]
    pos[:, 1, 0] += np.linspace(0, 0.2, t)
    yaw = np.zeros((t, n))
    yaw[45:, 1] = np.radians(170.0)  # tracking error: parked car spins
    raw = _raw_with_agents(n, positions=pos, yaws=yaw)
    keep, stats = filter_agents(raw, np.zeros((0, 2)), PreprocessConfig())
    assert keep == [0]
    assert stats["yaw_jump"] == 1


def test_filter_agents_relevant_violator_kept_and_flagged():
    t, n = 91, 2
    pos = np.zeros((t, n, 2))
    pos[:, 0, 0] = np.arange(t) * 0.5
    valid = np.ones((t, n), dtype=bool)
    valid[3:, 1] = False  # tracked for only 3 steps
    roles = np.zeros((n, 3), dtype=bool)
    roles[0, 0] = True
    roles[1, 2] = True  # marked to-predict: relevant
    raw = _raw_with_agents(n, positions=pos, valid=valid, roles=roles)
    keep, stats = filter_agents(raw, np.zeros((0, 2)), PreprocessConfig())
    assert keep == [0, 1]
    assert stats["flagged_relevant"] == [1]


def test_filter_agents_idempotent():
    cfg = SyntheticConfig(template="straight-lanes", n_agents=6)
    raw = generate_synthetic(cfg, seed=3)
    keep1, _ = filter_agents(raw, np.zeros((0, 2)), PreprocessConfig())
    assert keep1 == list(range(raw.n_agents))


# ---------------------------------------------------------------------------
# interpolation / centering / rotation
# ---------------------------------------------------------------------------


def test_interpolate_gaps_linear_fill():
    t = 5
    valid = np.array([True, True, False, False, True])
    pos = np.zeros((t, 2))
    pos[:, 0] = [0, 1, 0, 0, 4]
    vel = np.zeros((t, 2))
    yaw = np.zeros(t)
    v2, p2, _, _ = interpolate_gaps(valid, pos, vel, yaw)
    assert v2.all()
    np.testing.assert_allclose(p2[:, 0], [0, 1, 2, 3, 4])


def test_interpolate_yaw_shortest_arc():
    valid = np.array([True, False, True])
    yaw = np.array([np.radians(170.0), 0.0, np.radians(-170.0)])
    _, _, _, y2 = interpolate_gaps(valid, np.zeros((3, 2)), np.zeros((3, 2)), yaw)
    assert y2[1] == pytest.approx(np.pi, abs=1e-9)  # through the wrap, not zero


def test_interpolation_leading_trailing_stay_invalid():
    valid = np.array([False, True, True, False])
    v2, _, _, _ = interpolate_gaps(valid, np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(4))
    assert v2.tolist() == [False, True, True, False]


def test_preprocess_centers_sdc():
    cfg = SyntheticConfig(template="straight-lanes", n_agents=3)
    raw = generate_synthetic(cfg, seed=1)
    ep, _ = preprocess(raw, rotation_angle=0.0)
    sdc = ep.sdc_index
    np.testing.assert_allclose(ep.agent_pos[ep.t_history, sdc], [0, 0], atol=1e-9)


def test_preprocess_rotation_quarter_turn():
    cfg = SyntheticConfig(template="straight-lanes", n_agents=3)
    raw = generate_synthetic(cfg, seed=1)
    ep0, _ = preprocess(raw, rotation_angle=0.0)
    ep1, _ = preprocess(raw, rotation_angle=np.pi / 2)
    t0 = ep0.t_history
    # a point at (x, y) relative to the sdc maps to (-y, x)
    for j in range(ep0.n_agents):
        if not ep0.agent_valid[t0, j]:
            continue
        x, y = ep0.agent_pos[t0, j]
        np.testing.assert_allclose(ep1.agent_pos[t0, j], [-y, x], atol=1e-5)
    rot_yaw = ep1.agent_yaw[ep1.agent_valid[:, 0], 0]
    base_yaw = ep0.agent_yaw[ep0.agent_valid[:, 0], 0]
    np.testing.assert_allclose(
        np.cos(rot_yaw - base_yaw - np.pi / 2), 1.0, atol=1e-6)


def test_preprocess_requires_valid_sdc_at_t0():
    cfg = SyntheticConfig(template="straight-lanes", n_agents=2)
    raw = generate_synthetic(cfg, seed=1)
    raw.agent_valid[raw.t_history, raw.sdc_index] = False
    with pytest.raises(ValueError, match="sdc"):
        preprocess(raw)


def test_preprocess_invariants_hold():
    for template in ("straight-lanes", "intersection-with-lights", "crosswalk"):
        cfg = SyntheticConfig(template=template, n_agents=6)
        raw = generate_synthetic(cfg, seed=2)
        ep, _ = preprocess(raw, rotation_angle=0.3)
        ep.validate()


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_synthetic_constant_velocity_readback():
    cfg = SyntheticConfig(template="straight-lanes", n_agents=1,
                          speed_range=(2.0, 2.0))
    raw = generate_synthetic(cfg, seed=0)
    # no speed-change event is guaranteed for agent 0 only if rng skipped it;
    # instead check the generic consistency contract below on all agents
    fd = (raw.agent_pos[1:] - raw.agent_pos[:-1]) / cfg.dt
    np.testing.assert_allclose(fd, raw.agent_vel[:-1], atol=1e-6)


def test_synthetic_deterministic_per_seed():
    cfg = SyntheticConfig(template="intersection-with-lights", n_agents=5)
    a = generate_synthetic(cfg, seed=7)
    b = generate_synthetic(cfg, seed=7)
    np.testing.assert_array_equal(a.agent_pos, b.agent_pos)
    np.testing.assert_array_equal(a.tl_state, b.tl_state)
    c = generate_synthetic(cfg, seed=8)
    assert not np.array_equal(a.agent_pos, c.agent_pos)


def test_synthetic_red_phase_readback():
    cfg = SyntheticConfig(template="intersection-with-lights", n_agents=2,
                          ew_red_interval=(10, 50))
    raw = generate_synthetic(cfg, seed=0)
    stop = TL_STATE_INDEX["stop"]
    go = TL_STATE_INDEX["go"]
    assert np.all(raw.tl_state[10:51, 0] == stop)
    assert np.all(raw.tl_state[:10, 0] == go)
    assert np.all(raw.tl_state[51:, 0] == go)
    ep, _ = preprocess(raw)
    assert np.all(ep.tl_state[10:51, 0, stop] == 1.0)


def test_synthetic_unknown_template():
    with pytest.raises(ValueError, match="unknown template"):
        generate_synthetic(SyntheticConfig(template="roundabout"), seed=0)


def test_synthetic_kinematic_consistency_all_templates():
    for template in ("straight-lanes", "intersection-with-lights", "crosswalk"):
        cfg = SyntheticConfig(template=template, n_agents=6)
        raw = generate_synthetic(cfg, seed=5)
        fd = (raw.agent_pos[1:] - raw.agent_pos[:-1]) / cfg.dt
        both = raw.agent_valid[1:] & raw.agent_valid[:-1]
        np.testing.assert_allclose(fd[both], raw.agent_vel[:-1][both], atol=1e-6)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _sample_episode():
    cfg = SyntheticConfig(template="intersection-with-lights", n_agents=5)
    raw = generate_synthetic(cfg, seed=9)
    ep, _ = preprocess(raw, rotation_angle=0.25)
    return ep


def test_episode_json_roundtrip_bit_exact(tmp_path):
    ep = _sample_episode()
    p = tmp_path / "ep.json"
    ep.save_json(p)
    back = Episode.load_json(p)
    for _, attr in Episode._KEYS:
        np.testing.assert_array_equal(getattr(ep, attr), getattr(back, attr), err_msg=attr)
    assert back.map_successors == ep.map_successors
    assert back.dt == ep.dt and back.t_history == ep.t_history


def test_episode_cache_roundtrip(tmp_path):
    ep = _sample_episode()
    p = tmp_path / "ep.json"
    ep.save_json(p)
    first = load_episode(p)         # builds the cache
    assert (tmp_path / "ep.epb").exists()
    second = load_episode(p)        # served from the cache
    for _, attr in Episode._KEYS:
        np.testing.assert_array_equal(getattr(first, attr), getattr(second, attr))
    # stale cache is refreshed
    ep2 = _sample_episode()
    ep2.agent_pos += 1.0
    ep2.save_json(p)
    third = load_episode(p)
    np.testing.assert_array_equal(third.agent_pos, ep2.agent_pos)


def test_raw_episode_roundtrip(tmp_path):
    cfg = SyntheticConfig(template="crosswalk", n_agents=4)
    raw = generate_synthetic(cfg, seed=4)
    p = tmp_path / "raw.json"
    save_raw(raw, p)
    back = load_raw(p)
    np.testing.assert_array_equal(back.agent_pos, raw.agent_pos)
    np.testing.assert_array_equal(back.agent_valid, raw.agent_valid)
    assert back.sdc_index == raw.sdc_index
    assert [p_.type_index for p_ in back.map_polylines] == \
           [p_.type_index for p_ in raw.map_polylines]


def test_episode_one_hot_and_yaw_invariants():
    ep = _sample_episode()
    yaw = ep.agent_yaw[ep.agent_valid]
    assert np.all(yaw > -np.pi - 1e-9) and np.all(yaw <= np.pi + 1e-9)
    rows = ep.map_type[ep.map_valid.any(axis=1)]
    np.testing.assert_allclose(rows.sum(axis=-1), 1.0)
    dest = ep.agent_dest
    assert dest.min() >= 0 and dest.max() <= ep.n_map


def test_destination_references_valid_polylines():
    ep = _sample_episode()
    for j in range(ep.n_agents):
        if ep.agent_valid[:, j].any():
            d = ep.agent_dest[j]
            assert 1 <= d <= ep.n_map
            assert ep.map_valid[d - 1].any()
