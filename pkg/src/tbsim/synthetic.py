"""Synthetic scenario generator: desk-scale episodes for training and tests.

Templates: straight-lanes (multi-lane road, lane-following vehicles),
intersection-with-lights (two signalized crossing roads) and crosswalk
(vehicles yielding to crossing pedestrians). Tracks are built position-first
and stored velocity is the forward difference of positions, so
finite-difference consistency holds exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .episode import (
    AGENT_TYPE_INDEX, MAP_TYPE_INDEX, RawEpisode, RawPolyline, TL_STATE_INDEX,
)

TEMPLATES = ("straight-lanes", "intersection-with-lights", "crosswalk")


@dataclass
class SyntheticConfig:
    template: str = "straight-lanes"
    n_agents: int = 4
    n_steps: int = 91
    t_history: int = 10
    dt: float = 0.1
    lane_spacing: float = 3.5
    lane_length: float = 160.0
    speed_range: tuple[float, float] = (3.0, 11.0)
    # intersection: steps (inclusive) during which the east-west road sees red
    ew_red_interval: tuple[int, int] | None = (20, 60)
    stop_line_offset: float = 8.0    # stop point distance from the crossing center
    late_agent: bool = False         # add one vehicle that appears mid-episode


def _node_line(p0, p1, step: float = 5.0) -> np.ndarray:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1, 2)
    return p0 + np.linspace(0, 1, n)[:, None] * (p1 - p0)


def _speed_profile(rng, n_steps: int, dt: float, v0: float, events=None) -> np.ndarray:
    """Integrate a per-step bounded-acceleration speed controller into arc
    positions s[0..n_steps-1]. `events` maps step -> target speed."""
    events = events or {}
    s = np.zeros(n_steps)
    v = v0
    target = v0
    a_max = 3.0
    for t in range(1, n_steps):
        target = events.get(t - 1, target)
        a = np.clip((target - v) / dt, -a_max, a_max)
        v = v + a * dt
        s[t] = s[t - 1] + v * dt
    return s


def _stop_and_go_profile(n_steps, dt, v0, stop_at, red_mask, a_brake=3.5, a_go=2.5):
    """Arc positions for a vehicle that brakes for a stop line while its
    light is red and cruises otherwise. `stop_at` is the arc of the stop
    line; `red_mask[t]` says whether the light shows stop at step t."""
    s = np.zeros(n_steps)
    v = v0
    for t in range(1, n_steps):
        remaining = stop_at - s[t - 1]
        want_stop = red_mask[t - 1] and remaining > 0.0
        if want_stop:
            margin = max(remaining - 2.0, 0.0)
            if margin < 1e-6:
                a = -v / dt  # hold at the line
            else:
                a = np.clip(-v * v / (2.0 * margin), -a_brake, 0.0)
                # brake harder if physically necessary
                if v * v / 2.0 > margin * a_brake:
                    a = -a_brake
        else:
            a = a_go if v < v0 else 0.0
        v = max(v + a * dt, 0.0)
        s[t] = s[t - 1] + v * dt
    return s


class _Builder:
    def __init__(self, cfg: SyntheticConfig):
        self.cfg = cfg
        self.polylines: list[RawPolyline] = []
        self.successors: list[list[int]] = []
        self.tracks = []  # (pos [T,2], yaw [T], valid [T], type, size, roles)

    def add_polyline(self, type_name: str, nodes: np.ndarray, successors=()) -> int:
        self.polylines.append(RawPolyline(MAP_TYPE_INDEX[type_name], nodes))
        self.successors.append(list(successors))
        return len(self.polylines) - 1

    def add_track(self, pos, yaw, valid, type_name: str, size, role=(False, False, True)):
        self.tracks.append((np.asarray(pos, float), np.asarray(yaw, float),
                            np.asarray(valid, bool), AGENT_TYPE_INDEX[type_name],
                            np.asarray(size, float), np.asarray(role, bool)))

    def lane_track(self, origin, direction, arc: np.ndarray, valid=None):
        """Positions along a straight lane; yaw constant at the lane heading."""
        direction = np.asarray(direction, float)
        direction = direction / np.linalg.norm(direction)
        pos = np.asarray(origin, float) + arc[:, None] * direction
        yaw = np.full(len(arc), np.arctan2(direction[1], direction[0]))
        if valid is None:
            valid = np.ones(len(arc), dtype=bool)
        return pos, yaw, valid

    def finish(self, tl_polyline, tl_state, tl_stop_pos, tl_stop_dir) -> RawEpisode:
        cfg = self.cfg
        t, n = cfg.n_steps, len(self.tracks)
        pos = np.zeros((t, n, 2))
        yaw = np.zeros((t, n))
        valid = np.zeros((t, n), dtype=bool)
        vel = np.zeros((t, n, 2))
        types = np.zeros(n, dtype=int)
        sizes = np.zeros((n, 3))
        roles = np.zeros((n, 3), dtype=bool)
        for j, (p, y, v, ty, sz, rl) in enumerate(self.tracks):
            pos[:, j], yaw[:, j], valid[:, j] = p, y, v
            types[j], sizes[j], roles[j] = ty, sz, rl
            # stored velocity = forward difference of positions (exact)
            vel[:-1, j] = (p[1:] - p[:-1]) / cfg.dt
            vel[-1, j] = vel[-2, j]
            vel[~v, j] = 0.0
        n_tl = len(tl_polyline)
        if n_tl:
            tl_valid = np.ones((t, n_tl), dtype=bool)
            tl_state = np.asarray(tl_state, dtype=int)
        else:
            tl_valid = np.zeros((t, 0), dtype=bool)
            tl_state = np.zeros((t, 0), dtype=int)
        sdc = int(np.flatnonzero(roles[:, 0])[0])
        return RawEpisode(
            dt=cfg.dt, t_history=cfg.t_history,
            map_polylines=self.polylines,
            tl_polyline=np.asarray(tl_polyline, dtype=int),
            tl_valid=tl_valid,
            tl_state=tl_state,
            tl_stop_pos=np.asarray(tl_stop_pos, float).reshape(n_tl, 2),
            tl_stop_dir=np.asarray(tl_stop_dir, float).reshape(n_tl, 2),
            agent_valid=valid, agent_pos=pos, agent_yaw=yaw, agent_vel=vel,
            agent_type=types, agent_role=roles, agent_size=sizes,
            sdc_index=sdc, lane_successors=self.successors,
        )


VEHICLE_SIZE = (4.5, 2.0, 1.6)
PED_SIZE = (0.8, 0.8, 1.8)


def _straight_lanes(cfg: SyntheticConfig, rng: np.random.Generator) -> RawEpisode:
    b = _Builder(cfg)
    n_lanes = 3
    half = cfg.lane_length / 2
    for i in range(n_lanes):
        y = i * cfg.lane_spacing
        b.add_polyline("surface_street", _node_line([-half, y], [half, y]))
    b.add_polyline("road_edge_boundary",
                   _node_line([-half, -cfg.lane_spacing], [half, -cfg.lane_spacing]))
    b.add_polyline("road_edge_boundary",
                   _node_line([-half, n_lanes * cfg.lane_spacing],
                              [half, n_lanes * cfg.lane_spacing]))

    n_veh = max(cfg.n_agents, 1)
    lanes = [int(rng.integers(n_lanes)) for _ in range(n_veh)]
    per_lane: dict[int, list[int]] = {}
    for j, ln in enumerate(lanes):
        per_lane.setdefault(ln, []).append(j)
    for ln, members in per_lane.items():
        y = ln * cfg.lane_spacing
        # front-to-back order with decreasing speeds avoids rear-end contact
        speeds = np.sort(rng.uniform(*cfg.speed_range, size=len(members)))[::-1]
        start = rng.uniform(-half + 10, -half + 30)
        for rank, j in enumerate(members):
            v0 = float(speeds[rank])
            events = {}
            if rng.random() < 0.5:
                events[int(rng.integers(20, 60))] = float(
                    np.clip(v0 + rng.uniform(-2.0, 2.0), 0.5, cfg.speed_range[1]))
            arc = _speed_profile(rng, cfg.n_steps, cfg.dt, v0, events)
            origin = [start - rank * 30.0, y]
            role = (j == 0, False, True)
            pos, yaw, valid = b.lane_track(origin, [1, 0], arc)
            b.add_track(pos, yaw, valid, "vehicle", VEHICLE_SIZE, role)
    if cfg.late_agent:
        arc = _speed_profile(rng, cfg.n_steps, cfg.dt, 5.0)
        pos, yaw, valid = b.lane_track([-half + 5, cfg.lane_spacing], [1, 0], arc)
        valid = valid.copy()
        valid[:30] = False
        b.add_track(pos, yaw, valid, "vehicle", VEHICLE_SIZE, (False, False, False))
    return b.finish([], [], [], [])


def _intersection(cfg: SyntheticConfig, rng: np.random.Generator) -> RawEpisode:
    b = _Builder(cfg)
    half = cfg.lane_length / 2
    off = cfg.lane_spacing / 2
    # east-west lanes (eastbound at y=-off, westbound at y=+off) and north-south
    ew_east = b.add_polyline("surface_street", _node_line([-half, -off], [half, -off]))
    ew_west = b.add_polyline("surface_street", _node_line([half, off], [-half, off]))
    ns_north = b.add_polyline("surface_street", _node_line([off, -half], [off, half]))
    ns_south = b.add_polyline("surface_street", _node_line([-off, half], [-off, -half]))
    for sgn in (-1, 1):
        y_edge = sgn * (cfg.lane_spacing + 1.0)
        b.add_polyline("road_edge_boundary",
                       _node_line([-half, y_edge], [-cfg.lane_spacing - 1.0, y_edge]))
        b.add_polyline("road_edge_boundary",
                       _node_line([cfg.lane_spacing + 1.0, y_edge], [half, y_edge]))

    t = cfg.n_steps
    red_ew = np.zeros(t, dtype=bool)
    if cfg.ew_red_interval is not None:
        lo, hi = cfg.ew_red_interval
        red_ew[lo:hi + 1] = True
    go, stop = TL_STATE_INDEX["go"], TL_STATE_INDEX["stop"]
    tl_state = np.zeros((t, 4), dtype=int)
    tl_state[:, 0] = np.where(red_ew, stop, go)   # eastbound
    tl_state[:, 1] = np.where(red_ew, stop, go)   # westbound
    tl_state[:, 2] = np.where(red_ew, go, stop)   # northbound
    tl_state[:, 3] = np.where(red_ew, go, stop)   # southbound
    d = cfg.stop_line_offset
    tl_polyline = [ew_east, ew_west, ns_north, ns_south]
    tl_stop_pos = [[-d, -off], [d, off], [off, -d], [-off, d]]
    tl_stop_dir = [[1, 0], [-1, 0], [0, 1], [0, -1]]

    lanes = [
        ([-half, -off], [1, 0], red_ew, half - d),
        ([half, off], [-1, 0], red_ew, half - d),
        ([off, -half], [0, 1], ~red_ew, half - d),
        ([-off, half], [0, -1], ~red_ew, half - d),
    ]
    n_veh = max(cfg.n_agents, 1)
    for j in range(n_veh):
        origin, direction, red_mask, stop_arc = lanes[j % 4]
        back = (j // 4) * 30.0
        v0 = float(rng.uniform(*cfg.speed_range))
        arc = _stop_and_go_profile(t, cfg.dt, v0, stop_arc + back, red_mask)
        start = np.asarray(origin, float) - back * np.asarray(direction, float)
        pos, yaw, valid = b.lane_track(start, direction, arc)
        b.add_track(pos, yaw, valid, "vehicle", VEHICLE_SIZE, (j == 0, False, True))
    return b.finish(tl_polyline, tl_state, tl_stop_pos, tl_stop_dir)


def _crosswalk(cfg: SyntheticConfig, rng: np.random.Generator) -> RawEpisode:
    b = _Builder(cfg)
    half = cfg.lane_length / 2
    off = cfg.lane_spacing / 2
    b.add_polyline("surface_street", _node_line([-half, -off], [half, -off]))
    b.add_polyline("surface_street", _node_line([half, off], [-half, off]))
    b.add_polyline("road_edge_boundary",
                   _node_line([-half, -cfg.lane_spacing - 1], [half, -cfg.lane_spacing - 1]))
    b.add_polyline("road_edge_boundary",
                   _node_line([-half, cfg.lane_spacing + 1], [half, cfg.lane_spacing + 1]))
    b.add_polyline("crosswalk",
                   _node_line([0, -cfg.lane_spacing - 1], [0, cfg.lane_spacing + 1], step=2.0))

    t = cfg.n_steps
    n_ped = max(cfg.n_agents // 2, 1)
    n_veh = max(cfg.n_agents - n_ped, 1)

    ped_cross = np.zeros(t, dtype=bool)
    for j in range(n_ped):
        v_ped = float(rng.uniform(1.0, 1.6))
        start_step = int(rng.integers(0, 25))
        y0 = -cfg.lane_spacing - 1.0
        span = 2 * (cfg.lane_spacing + 1.0)
        ys = np.full(t, y0)
        for k in range(1, t):
            walking = k > start_step and (ys[k - 1] - y0) < span
            ys[k] = ys[k - 1] + (v_ped * cfg.dt if walking else 0.0)
        inside = (ys > -off - 1.5) & (ys < off + 1.5)
        ped_cross |= inside
        pos = np.stack([np.full(t, 0.0 + 0.7 * j), ys], axis=-1)
        yaw = np.full(t, np.pi / 2)
        b.add_track(pos, yaw, np.ones(t, bool), "pedestrian", PED_SIZE,
                    (False, False, True))

    for j in range(n_veh):
        v0 = float(rng.uniform(4.0, 8.0))
        back = j * 35.0
        arc = _stop_and_go_profile(t, cfg.dt, v0, half - 6.0 + back, ped_cross,
                                   a_brake=4.0)
        pos, yaw, valid = b.lane_track([-half - back, -off], [1, 0], arc)
        b.add_track(pos, yaw, valid, "vehicle", VEHICLE_SIZE, (j == 0, False, True))
    return b.finish([], [], [], [])


def generate_synthetic(cfg: SyntheticConfig, seed: int) -> RawEpisode:
    """Deterministic synthetic RawEpisode for the given template and seed."""
    if cfg.template not in TEMPLATES:
        raise ValueError(f"unknown template {cfg.template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng(seed)
    if cfg.template == "straight-lanes":
        raw = _straight_lanes(cfg, rng)
    elif cfg.template == "intersection-with-lights":
        raw = _intersection(cfg, rng)
    else:
        raw = _crosswalk(cfg, rng)
    raw.validate()
    return raw
