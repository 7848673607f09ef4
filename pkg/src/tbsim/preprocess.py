"""Raw-episode preprocessing: polyline splitting, map/agent filtering,
centering, rotation augmentation, gap interpolation and episode assembly.

All functions are pure over their inputs; episodes can be preprocessed in
parallel, one worker per episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .destination import assign_destinations
from .episode import (
    Episode, N_MAP_TYPES, N_TL_STATES, RawEpisode, RawPolyline, one_hot,
)
from .geometry import rotation_matrix, wrap_angle


@dataclass
class PreprocessConfig:
    spacing: float = 1.0             # resampled node spacing, meters
    n_node_max: int = 20
    n_map_max: int = 1024
    n_agent_max: int = 64
    n_tl_max: int = 32
    min_nodes: int = 3               # polylines shorter than this are dropped
    map_distance_cutoff: float = 2000.0
    min_tracked: int = 5             # minimum tracked steps per agent
    displacement_threshold: float = 1.0
    yaw_jump_threshold: float = np.radians(90.0)
    agent_distance_cutoff: float = 100.0
    dest_n_hops: int = 3
    dest_extension_seconds: float = 5.0
    on_lane_max_distance: float = 3.0
    on_lane_direction_tolerance: float = np.radians(30.0)


@dataclass
class PreprocessReport:
    degenerate_polylines: int = 0
    short_polylines: int = 0
    far_polylines: int = 0
    truncated_polylines: int = 0
    removed_agents_few_steps: int = 0
    removed_agents_parked_far: int = 0
    removed_agents_yaw_jump: int = 0
    truncated_agents: int = 0
    flagged_relevant: list[int] = field(default_factory=list)
    dest_fallbacks: list[int] = field(default_factory=list)


@dataclass
class SplitPolyline:
    type_index: int
    nodes: np.ndarray        # [n, 2]
    dirs: np.ndarray         # [n, 2] unit vector toward the next node
    source: int              # raw polyline index
    chunk: int               # position among the source's chunks
    last_chunk: bool


def resample_polyline(nodes: np.ndarray, spacing: float) -> np.ndarray | None:
    """Resample a polyline at fixed arc-length spacing; None when degenerate.

    The endpoint is always kept, so the final segment may be shorter than
    `spacing`.
    """
    nodes = np.asarray(nodes, dtype=float)
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=-1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    length = arc[-1]
    if length < 1e-9:
        return None
    targets = np.arange(0.0, length, spacing)
    if length - targets[-1] > 1e-9:
        targets = np.concatenate([targets, [length]])
    else:
        targets[-1] = length
    x = np.interp(targets, arc, nodes[:, 0])
    y = np.interp(targets, arc, nodes[:, 1])
    return np.stack([x, y], axis=-1)


def split_polylines(
    polylines: list[RawPolyline],
    spacing: float = 1.0,
    n_node_max: int = 20,
) -> tuple[list[SplitPolyline], int]:
    """Resample each raw polyline at `spacing`, then chunk into pieces of at
    most `n_node_max` nodes. Returns (chunks, degenerate_count)."""
    out: list[SplitPolyline] = []
    degenerate = 0
    for src, poly in enumerate(polylines):
        pts = resample_polyline(poly.nodes, spacing)
        if pts is None:
            degenerate += 1
            continue
        n = len(pts)
        dirs = np.zeros_like(pts)
        if n >= 2:
            d = np.diff(pts, axis=0)
            d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
            dirs[:-1] = d
            dirs[-1] = d[-1]
        n_chunks = int(np.ceil(n / n_node_max))
        for c in range(n_chunks):
            sl = slice(c * n_node_max, min((c + 1) * n_node_max, n))
            out.append(SplitPolyline(
                type_index=poly.type_index,
                nodes=pts[sl].copy(),
                dirs=dirs[sl].copy(),
                source=src,
                chunk=c,
                last_chunk=(c == n_chunks - 1),
            ))
    return out, degenerate


def filter_map(
    chunks: list[SplitPolyline],
    agent_points: np.ndarray,
    n_map_max: int = 1024,
    min_nodes: int = 3,
    distance_cutoff: float = 2000.0,
) -> tuple[list[int], dict]:
    """Select which split polylines to keep.

    Drops chunks with fewer than `min_nodes` nodes or farther than
    `distance_cutoff` from every agent point, then keeps the `n_map_max`
    closest (ties resolved toward the lower index). The returned indices are
    in ascending (original) order.
    """
    stats = {"short": 0, "far": 0, "truncated": 0}
    cand = []
    dists = []
    for i, ch in enumerate(chunks):
        if len(ch.nodes) < min_nodes:
            stats["short"] += 1
            continue
        if agent_points.size:
            d = np.linalg.norm(ch.nodes[:, None, :] - agent_points[None, :, :], axis=-1).min()
        else:
            d = 0.0
        if d > distance_cutoff:
            stats["far"] += 1
            continue
        cand.append(i)
        dists.append(d)
    if len(cand) > n_map_max:
        order = np.lexsort((np.asarray(cand), np.asarray(dists)))  # distance, then index
        keep = sorted(np.asarray(cand)[order[:n_map_max]].tolist())
        stats["truncated"] = len(cand) - n_map_max
    else:
        keep = cand
    return keep, stats


def filter_agents(
    raw: RawEpisode,
    map_points: np.ndarray,
    cfg: PreprocessConfig,
) -> tuple[list[int], dict]:
    """Select which agents to keep, never dropping relevant (role-flagged)
    agents. Returns kept indices (ascending) and a report dict."""
    n_agents = raw.n_agents
    relevant = raw.agent_role.any(axis=1)
    stats = {"few_steps": 0, "parked_far": 0, "yaw_jump": 0, "truncated": 0,
             "flagged_relevant": []}

    rel_points = raw.agent_pos[raw.agent_valid & relevant[None, :]]

    def min_dist(points_from: np.ndarray, points_to: np.ndarray) -> float:
        if points_from.size == 0 or points_to.size == 0:
            return np.inf
        return float(np.linalg.norm(
            points_from[:, None, :] - points_to[None, :, :], axis=-1).min())

    keep_mask = np.ones(n_agents, dtype=bool)
    for i in range(n_agents):
        valid = raw.agent_valid[:, i]
        n_tracked = int(valid.sum())
        pos = raw.agent_pos[valid, i]
        remove = None
        if n_tracked < cfg.min_tracked:
            remove = "few_steps"
        else:
            displacement = float(np.linalg.norm(pos - pos[0], axis=-1).max())
            if displacement < cfg.displacement_threshold:
                d_rel = min_dist(pos, rel_points) if not relevant[i] else 0.0
                d_map = min_dist(pos, map_points)
                if min(d_rel, d_map) > cfg.agent_distance_cutoff:
                    remove = "parked_far"
                else:
                    yaw = raw.agent_yaw[valid, i]
                    yaw_change = float(np.abs(wrap_angle(yaw - yaw[0])).max())
                    is_vehicle = raw.agent_type[i] == 0
                    if is_vehicle and yaw_change > cfg.yaw_jump_threshold:
                        remove = "yaw_jump"
        if remove is not None:
            if relevant[i]:
                stats["flagged_relevant"].append(i)
            else:
                stats[remove] += 1
                keep_mask[i] = False

    kept = np.flatnonzero(keep_mask)
    if kept.size > cfg.n_agent_max:
        dists = []
        for i in kept:
            if relevant[i]:
                dists.append(-1.0)  # relevant agents sort first, never truncated
            else:
                pos = raw.agent_pos[raw.agent_valid[:, i], i]
                dists.append(min_dist(pos, rel_points))
        order = np.lexsort((kept, np.asarray(dists)))
        stats["truncated"] = int(kept.size - cfg.n_agent_max)
        kept = np.sort(kept[order[:cfg.n_agent_max]])
    return kept.tolist(), stats


def interpolate_gaps(valid: np.ndarray, pos: np.ndarray, vel: np.ndarray,
                     yaw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Fill interior invalid steps of one track: linear position/velocity,
    shortest-arc yaw. Leading/trailing invalid steps stay invalid."""
    idx = np.flatnonzero(valid)
    if idx.size < 2:
        return valid, pos, vel, yaw
    valid = valid.copy()
    pos, vel, yaw = pos.copy(), vel.copy(), yaw.copy()
    for a, b in zip(idx[:-1], idx[1:]):
        if b - a <= 1:
            continue
        steps = np.arange(a + 1, b)
        frac = (steps - a) / (b - a)
        pos[steps] = pos[a] + frac[:, None] * (pos[b] - pos[a])
        vel[steps] = vel[a] + frac[:, None] * (vel[b] - vel[a])
        dyaw = wrap_angle(yaw[b] - yaw[a])
        yaw[steps] = wrap_angle(yaw[a] + frac * dyaw)
        valid[steps] = True
    return valid, pos, vel, yaw


def _forward_diff(x: np.ndarray, dt: float) -> np.ndarray:
    """Forward difference along axis 0, last row repeating the previous."""
    d = np.zeros_like(x)
    if x.shape[0] >= 2:
        d[:-1] = (x[1:] - x[:-1]) / dt
        d[-1] = d[-2]
    return d


def preprocess(
    raw: RawEpisode,
    cfg: PreprocessConfig | None = None,
    rotation_angle: float = 0.0,
    seed: int = 0,
) -> tuple[Episode, PreprocessReport]:
    """Full pipeline from a RawEpisode to a model-ready Episode."""
    cfg = cfg or PreprocessConfig()
    raw.validate()
    report = PreprocessReport()

    if not raw.agent_valid[raw.t_history, raw.sdc_index]:
        raise ValueError("sdc has no valid state at the current step")

    # 1. split polylines, then filter them against agent positions
    chunks, report.degenerate_polylines = split_polylines(
        raw.map_polylines, cfg.spacing, cfg.n_node_max)
    agent_points = raw.agent_pos[raw.agent_valid]
    keep_map, mstats = filter_map(chunks, agent_points, cfg.n_map_max,
                                  cfg.min_nodes, cfg.map_distance_cutoff)
    report.short_polylines = mstats["short"]
    report.far_polylines = mstats["far"]
    report.truncated_polylines = mstats["truncated"]
    kept_chunks = [chunks[i] for i in keep_map]

    # successor graph on the retained chunks
    pos_of = {}
    for new_idx, old_idx in enumerate(keep_map):
        ch = chunks[old_idx]
        pos_of[(ch.source, ch.chunk)] = new_idx
    raw_succ = raw.lane_successors
    successors: list[list[int]] = []
    for ch in kept_chunks:
        succ: list[int] = []
        if not ch.last_chunk:
            nxt = pos_of.get((ch.source, ch.chunk + 1))
            if nxt is not None:
                succ.append(nxt)
        elif ch.source < len(raw_succ):
            for s in raw_succ[ch.source]:
                nxt = pos_of.get((s, 0))
                if nxt is not None:
                    succ.append(nxt)
        successors.append(succ)

    # 2. traffic lights survive only if some chunk of their polyline did
    surviving_sources = {ch.source for ch in kept_chunks}
    tl_keep = [j for j in range(len(raw.tl_polyline))
               if int(raw.tl_polyline[j]) in surviving_sources]
    tl_keep = tl_keep[:cfg.n_tl_max]

    # 3. agent filtering
    map_points = (np.concatenate([ch.nodes for ch in kept_chunks])
                  if kept_chunks else np.zeros((0, 2)))
    keep_agents, astats = filter_agents(raw, map_points, cfg)
    report.removed_agents_few_steps = astats["few_steps"]
    report.removed_agents_parked_far = astats["parked_far"]
    report.removed_agents_yaw_jump = astats["yaw_jump"]
    report.truncated_agents = astats["truncated"]
    report.flagged_relevant = astats["flagged_relevant"]
    if raw.sdc_index not in keep_agents:
        raise ValueError("sdc was filtered out")

    # 4. center on the sdc at t=0, rotate, interpolate gaps
    t0 = raw.t_history
    center = raw.agent_pos[t0, raw.sdc_index].copy()
    rot = rotation_matrix(rotation_angle)

    def tf_points(p: np.ndarray) -> np.ndarray:
        return (p - center) @ rot.T

    def tf_vectors(v: np.ndarray) -> np.ndarray:
        return v @ rot.T

    t = raw.n_steps
    n_a = len(keep_agents)
    a_valid = raw.agent_valid[:, keep_agents].copy()
    a_pos = tf_points(raw.agent_pos[:, keep_agents].reshape(-1, 2)).reshape(t, n_a, 2)
    a_vel = tf_vectors(raw.agent_vel[:, keep_agents].reshape(-1, 2)).reshape(t, n_a, 2)
    a_yaw = wrap_angle(raw.agent_yaw[:, keep_agents] + rotation_angle)

    for j in range(n_a):
        a_valid[:, j], a_pos[:, j], a_vel[:, j], a_yaw[:, j] = interpolate_gaps(
            a_valid[:, j], a_pos[:, j], a_vel[:, j], a_yaw[:, j])

    # derived kinematics on the interpolated tracks
    a_spd = np.linalg.norm(a_vel, axis=-1, keepdims=True)
    a_acc = np.zeros_like(a_spd)
    a_yaw_rate = np.zeros((t, n_a, 1))
    for j in range(n_a):
        idx = np.flatnonzero(a_valid[:, j])
        if idx.size >= 2:
            lo, hi = idx[0], idx[-1]
            a_acc[lo:hi + 1, j, 0] = _forward_diff(a_spd[lo:hi + 1, j, 0], raw.dt)
            dyaw = wrap_angle(np.diff(a_yaw[lo:hi + 1, j]))
            a_yaw_rate[lo:hi, j, 0] = dyaw / raw.dt
            if hi - lo >= 1:
                a_yaw_rate[hi, j, 0] = a_yaw_rate[hi - 1, j, 0]

    # zero out everything on invalid steps
    inv = ~a_valid
    for arr in (a_pos, a_vel):
        arr[inv] = 0.0
    for arr in (a_spd, a_acc, a_yaw_rate):
        arr[inv] = 0.0
    a_yaw = np.where(a_valid, a_yaw, 0.0)[..., None]

    # 5. assemble map arrays
    n_m = len(kept_chunks)
    map_valid = np.zeros((n_m, cfg.n_node_max), dtype=bool)
    map_pos = np.zeros((n_m, cfg.n_node_max, 2), dtype=np.float32)
    map_dir = np.zeros((n_m, cfg.n_node_max, 2), dtype=np.float32)
    map_type = np.zeros((n_m, N_MAP_TYPES), dtype=np.float32)
    for i, ch in enumerate(kept_chunks):
        k = len(ch.nodes)
        map_valid[i, :k] = True
        map_pos[i, :k] = tf_points(ch.nodes)
        map_dir[i, :k] = tf_vectors(ch.dirs)
        map_type[i, ch.type_index] = 1.0

    # 6. traffic light arrays
    n_c = len(tl_keep)
    tl_valid = np.zeros((t, n_c), dtype=bool)
    tl_state = np.zeros((t, n_c, N_TL_STATES), dtype=np.float32)
    tl_pos = np.zeros((t, n_c, 2), dtype=np.float32)
    tl_dir = np.zeros((t, n_c, 2), dtype=np.float32)
    for jj, j in enumerate(tl_keep):
        tl_valid[:, jj] = raw.tl_valid[:, j]
        states = raw.tl_state[:, j]
        tl_state[:, jj] = one_hot(states.astype(int), N_TL_STATES)
        tl_state[~tl_valid[:, jj], jj] = 0.0
        tl_pos[:, jj] = tf_points(raw.tl_stop_pos[None, j])
        tl_dir[:, jj] = tf_vectors(raw.tl_stop_dir[None, j])
        tl_pos[~tl_valid[:, jj], jj] = 0.0
        tl_dir[~tl_valid[:, jj], jj] = 0.0

    episode = Episode(
        dt=raw.dt,
        t_history=raw.t_history,
        map_valid=map_valid,
        map_type=map_type,
        map_pos=map_pos,
        map_dir=map_dir,
        tl_valid=tl_valid,
        tl_state=tl_state,
        tl_pos=tl_pos,
        tl_dir=tl_dir,
        agent_valid=a_valid,
        agent_pos=a_pos.astype(np.float32),
        agent_vel=a_vel.astype(np.float32),
        agent_spd=a_spd.astype(np.float32),
        agent_acc=a_acc.astype(np.float32),
        agent_yaw=a_yaw.astype(np.float32),
        agent_yaw_rate=a_yaw_rate.astype(np.float32),
        agent_type=one_hot(raw.agent_type[keep_agents].astype(int), 3),
        agent_role=raw.agent_role[keep_agents],
        agent_size=raw.agent_size[keep_agents].astype(np.float32),
        agent_dest=np.zeros(n_a, dtype=np.int32),
        map_successors=successors,
    )

    # 7. ground-truth destinations from the processed scene
    rng = np.random.default_rng(seed)
    dest, fallbacks = assign_destinations(episode, rng, cfg)
    episode.agent_dest = dest
    report.dest_fallbacks = fallbacks
    return episode, report
