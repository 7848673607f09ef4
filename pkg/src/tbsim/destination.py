"""Ground-truth destination and goal heuristics.

The destination approximates an agent's navigational intent as a map
polyline, picked by extending the recorded trajectory: vehicles on a lane
walk the lane successor graph; everyone else extends their last observed
pose at constant velocity and snaps to the nearest polyline of a
type-appropriate class.
"""
from __future__ import annotations

import numpy as np

from .episode import Episode, LANE_TYPES, MAP_TYPE_INDEX
from .geometry import Pose2, extend_constant_velocity, nearest_polyline


def type_candidates(episode: Episode, names: tuple[str, ...]) -> np.ndarray:
    cols = [MAP_TYPE_INDEX[n] for n in names]
    mask = episode.map_type[:, cols].sum(axis=-1) > 0.5
    return np.flatnonzero(mask)


def last_observed_pose(episode: Episode, agent: int) -> tuple[Pose2, float] | None:
    """Pose and speed at the agent's last valid step of the whole episode."""
    idx = np.flatnonzero(episode.agent_valid[:, agent])
    if idx.size == 0:
        return None
    t = int(idx[-1])
    pose = Pose2(float(episode.agent_pos[t, agent, 0]),
                 float(episode.agent_pos[t, agent, 1]),
                 float(episode.agent_yaw[t, agent, 0]))
    return pose, float(episode.agent_spd[t, agent, 0])


def successor_walk(successors: list[list[int]], start: int, n_hops: int,
                   rng: np.random.Generator) -> int:
    """Repeatedly hop to a uniformly chosen successor; stops early at dead ends."""
    cur = start
    for _ in range(n_hops):
        nxt = successors[cur] if cur < len(successors) else []
        if not nxt:
            break
        cur = int(nxt[int(rng.integers(len(nxt)))])
    return cur


def gt_destination(
    episode: Episode,
    agent: int,
    rng: np.random.Generator,
    n_hops: int = 3,
    extension_seconds: float = 5.0,
    on_lane_max_distance: float = 3.0,
    on_lane_direction_tolerance: float = np.radians(30.0),
) -> tuple[int, bool]:
    """0-based destination polyline index for one agent.

    Returns (index, fell_back); fell_back is True when no polyline of the
    required type exists and the globally nearest polyline was used instead.
    """
    obs = last_observed_pose(episode, agent)
    if obs is None:
        return -1, True
    pose, speed = obs
    type_idx = int(np.argmax(episode.agent_type[agent]))
    m_pos, m_dir, m_valid = episode.map_pos, episode.map_dir, episode.map_valid

    def nearest_of(names: tuple[str, ...], query: Pose2) -> int | None:
        cand = type_candidates(episode, names)
        if cand.size == 0:
            return None
        return nearest_polyline(query, m_pos, m_dir, m_valid, candidates=cand)

    if type_idx == 0:  # vehicle
        lane = nearest_polyline(
            pose, m_pos, m_dir, m_valid,
            candidates=type_candidates(episode, LANE_TYPES),
            direction_tolerance=on_lane_direction_tolerance,
            max_distance=on_lane_max_distance,
        ) if type_candidates(episode, LANE_TYPES).size else None
        if lane is not None:
            return successor_walk(episode.map_successors, lane, n_hops, rng), False
        extended = extend_constant_velocity(pose, speed, extension_seconds)
        hit = nearest_of(("road_edge_boundary",), extended)
        if hit is not None:
            return hit, False
    elif type_idx == 2:  # cyclist
        bike_cand = type_candidates(episode, ("bike_lane",))
        on_bike = nearest_polyline(
            pose, m_pos, m_dir, m_valid, candidates=bike_cand,
            direction_tolerance=on_lane_direction_tolerance,
            max_distance=on_lane_max_distance,
        ) if bike_cand.size else None
        extended = extend_constant_velocity(pose, speed, extension_seconds)
        hit = nearest_of(("bike_lane",) if on_bike is not None else ("road_edge_boundary",),
                         extended)
        if hit is not None:
            return hit, False
    else:  # pedestrian
        extended = extend_constant_velocity(pose, speed, extension_seconds)
        hit = nearest_of(("road_edge_boundary",), extended)
        if hit is not None:
            return hit, False

    fallback = nearest_polyline(pose, m_pos, m_dir, m_valid)
    return (fallback if fallback is not None else -1), True


def gt_goal(episode: Episode, agent: int) -> int:
    """Goal variant: the polyline nearest to the last observed pose, no
    extension and no topology walk. Returns -1 when the agent never appears."""
    obs = last_observed_pose(episode, agent)
    if obs is None:
        return -1
    pose, _ = obs
    hit = nearest_polyline(pose, episode.map_pos, episode.map_dir, episode.map_valid)
    return -1 if hit is None else hit


def assign_destinations(episode: Episode, rng: np.random.Generator, cfg) -> tuple[np.ndarray, list[int]]:
    """Fill 1-based `agent/dest` for every agent that ever appears."""
    n_a = episode.n_agents
    dest = np.zeros(n_a, dtype=np.int32)
    fallbacks: list[int] = []
    for j in range(n_a):
        if not episode.agent_valid[:, j].any():
            continue
        idx, fell_back = gt_destination(
            episode, j, rng,
            n_hops=cfg.dest_n_hops,
            extension_seconds=cfg.dest_extension_seconds,
            on_lane_max_distance=cfg.on_lane_max_distance,
            on_lane_direction_tolerance=cfg.on_lane_direction_tolerance,
        )
        if idx >= 0:
            dest[j] = idx + 1
        if fell_back:
            fallbacks.append(j)
    return dest, fallbacks
