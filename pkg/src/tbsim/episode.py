"""Episode data model and serialization.

An Episode is the fully preprocessed scene: map polylines, traffic-light
stop points, agent tracks, agent attributes and per-agent destination
polyline indices. The JSON layout uses the flat slash-separated keys listed
below; `agent/dest` is 1-based (0 means unset). A little-endian binary cache
(.epb) keyed by a content hash of the JSON form sits next to it for fast
reloads.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

EPISODE_VERSION = "tbsim-episode/1"
RAW_VERSION = "tbsim-raw/1"

# map polyline types
MAP_TYPES = [
    "freeway", "surface_street", "stop_sign", "bike_lane",
    "road_edge_boundary", "road_edge_median", "solid_single", "solid_double",
    "passing_double_yellow", "speed_bump", "crosswalk",
]
N_MAP_TYPES = len(MAP_TYPES)
MAP_TYPE_INDEX = {name: i for i, name in enumerate(MAP_TYPES)}
LANE_TYPES = ("freeway", "surface_street")  # drivable lane centerlines

# traffic light states
TL_STATES = ["unknown", "stop", "caution", "go", "flashing"]
N_TL_STATES = len(TL_STATES)
TL_STATE_INDEX = {name: i for i, name in enumerate(TL_STATES)}

# agent types and roles
AGENT_TYPES = ["vehicle", "pedestrian", "cyclist"]
N_AGENT_TYPES = len(AGENT_TYPES)
AGENT_TYPE_INDEX = {name: i for i, name in enumerate(AGENT_TYPES)}
ROLES = ["sdc", "interest", "predict"]

DT_DEFAULT = 0.1
T_HISTORY_DEFAULT = 10
T_FUTURE_DEFAULT = 80
N_NODE_MAX = 20
N_MAP_MAX = 1024
N_AGENT_MAX = 64


@dataclass
class RawPolyline:
    type_index: int
    nodes: np.ndarray  # [n, 2]


@dataclass
class RawEpisode:
    """Unprocessed scene straight from a data source or generator."""

    dt: float
    t_history: int
    map_polylines: list[RawPolyline]
    # traffic lights: a fixed set, with per-step validity and state
    tl_polyline: np.ndarray      # [n_tl] index into map_polylines
    tl_valid: np.ndarray         # [T, n_tl] bool
    tl_state: np.ndarray         # [T, n_tl] int state index
    tl_stop_pos: np.ndarray      # [n_tl, 2]
    tl_stop_dir: np.ndarray      # [n_tl, 2]
    # agent tracks
    agent_valid: np.ndarray      # [T, n_agent] bool
    agent_pos: np.ndarray        # [T, n_agent, 2]
    agent_yaw: np.ndarray        # [T, n_agent]
    agent_vel: np.ndarray        # [T, n_agent, 2]
    agent_type: np.ndarray       # [n_agent] int
    agent_role: np.ndarray       # [n_agent, 3] bool
    agent_size: np.ndarray       # [n_agent, 3] length, width, height
    sdc_index: int
    lane_successors: list[list[int]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.agent_valid.shape[0]

    @property
    def n_agents(self) -> int:
        return self.agent_valid.shape[1]

    def validate(self) -> None:
        t = self.n_steps
        for name in ("tl_valid", "tl_state"):
            if getattr(self, name).shape[0] != t:
                raise ValueError(f"RawEpisode: {name} step count != {t}")
        if not (0 <= self.sdc_index < self.n_agents):
            raise ValueError("RawEpisode: sdc_index out of range")
        if not np.all(np.isfinite(self.agent_yaw[self.agent_valid])):
            raise ValueError("RawEpisode: non-finite yaw on a valid step")
        if np.any(self.agent_size[self.agent_valid.any(axis=0)] <= 0):
            raise ValueError("RawEpisode: non-positive size for a valid agent")


@dataclass
class Episode:
    """Preprocessed scene. Array shapes use T steps, N_M polylines with up
    to N_node nodes each, N_C lights and N_A agents."""

    dt: float
    t_history: int
    map_valid: np.ndarray    # [N_M, N_node] bool
    map_type: np.ndarray     # [N_M, 11] one-hot
    map_pos: np.ndarray      # [N_M, N_node, 2]
    map_dir: np.ndarray      # [N_M, N_node, 2]
    tl_valid: np.ndarray     # [T, N_C] bool
    tl_state: np.ndarray     # [T, N_C, 5] one-hot
    tl_pos: np.ndarray       # [T, N_C, 2]
    tl_dir: np.ndarray       # [T, N_C, 2]
    agent_valid: np.ndarray  # [T, N_A] bool
    agent_pos: np.ndarray    # [T, N_A, 2]
    agent_vel: np.ndarray    # [T, N_A, 2]
    agent_spd: np.ndarray    # [T, N_A, 1]
    agent_acc: np.ndarray    # [T, N_A, 1]
    agent_yaw: np.ndarray    # [T, N_A, 1]
    agent_yaw_rate: np.ndarray  # [T, N_A, 1]
    agent_type: np.ndarray   # [N_A, 3] one-hot
    agent_role: np.ndarray   # [N_A, 3] bool
    agent_size: np.ndarray   # [N_A, 3]
    agent_dest: np.ndarray   # [N_A] int, 1-based polyline index (0 = unset)
    map_successors: list[list[int]] = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.agent_valid.shape[0]

    @property
    def t_future(self) -> int:
        return self.n_steps - self.t_history - 1

    @property
    def n_map(self) -> int:
        return self.map_valid.shape[0]

    @property
    def n_lights(self) -> int:
        return self.tl_valid.shape[1]

    @property
    def n_agents(self) -> int:
        return self.agent_valid.shape[1]

    @property
    def sdc_index(self) -> int:
        idx = np.flatnonzero(self.agent_role[:, 0])
        if idx.size != 1:
            raise ValueError(f"episode must have exactly one sdc, found {idx.size}")
        return int(idx[0])

    def agent_type_index(self) -> np.ndarray:
        return np.argmax(self.agent_type, axis=-1)

    def dest_index0(self) -> np.ndarray:
        """0-based destination indices (-1 where unset)."""
        return self.agent_dest.astype(int) - 1

    def validate(self, spacing: float = 1.0, n_node_max: int = N_NODE_MAX) -> None:
        if self.map_valid.shape[0] > N_MAP_MAX:
            raise ValueError(f"too many polylines: {self.map_valid.shape[0]}")
        if self.map_valid.shape[1] > n_node_max:
            raise ValueError(f"too many nodes per polyline: {self.map_valid.shape[1]}")
        if self.n_agents > N_AGENT_MAX:
            raise ValueError(f"too many agents: {self.n_agents}")
        yaw = self.agent_yaw[self.agent_valid]
        if yaw.size and (yaw.min() <= -np.pi - 1e-6 or yaw.max() > np.pi + 1e-6):
            raise ValueError("agent yaw outside (-pi, pi]")
        for name, onehot, mask in (
            ("map_type", self.map_type, self.map_valid.any(axis=1)),
            ("agent_type", self.agent_type, self.agent_valid.any(axis=0)),
        ):
            rows = onehot[mask]
            if rows.size and not np.allclose(rows.sum(axis=-1), 1.0):
                raise ValueError(f"{name} rows must be one-hot")
        tl_rows = self.tl_state[self.tl_valid]
        if tl_rows.size and not np.allclose(tl_rows.sum(axis=-1), 1.0):
            raise ValueError("tl_state rows must be one-hot")
        dest = self.agent_dest[self.agent_valid.any(axis=0)]
        if dest.size and (dest.min() < 0 or dest.max() > self.n_map):
            raise ValueError("agent_dest outside [0, N_M]")
        # node spacing: consecutive valid map nodes are ~spacing apart
        for i in range(self.n_map):
            v = self.map_valid[i]
            pts = self.map_pos[i][v]
            if len(pts) >= 3:
                gaps = np.linalg.norm(np.diff(pts[:-1], axis=0), axis=-1)
                if gaps.size and (gaps.max() > spacing * 1.1 or gaps.min() < spacing * 0.9):
                    raise ValueError(f"polyline {i}: node spacing outside {spacing} +-10%")

    # -- serialization ----------------------------------------------------

    _KEYS = (
        ("agent/valid", "agent_valid"), ("agent/pos", "agent_pos"),
        ("agent/vel", "agent_vel"), ("agent/spd", "agent_spd"),
        ("agent/acc", "agent_acc"), ("agent/yaw_bbox", "agent_yaw"),
        ("agent/yaw_rate", "agent_yaw_rate"), ("agent/type", "agent_type"),
        ("agent/role", "agent_role"), ("agent/size", "agent_size"),
        ("agent/dest", "agent_dest"), ("map/valid", "map_valid"),
        ("map/type", "map_type"), ("map/pos", "map_pos"),
        ("map/dir", "map_dir"), ("tl_stop/valid", "tl_valid"),
        ("tl_stop/state", "tl_state"), ("tl_stop/pos", "tl_pos"),
        ("tl_stop/dir", "tl_dir"),
    )

    def to_dict(self) -> dict:
        doc = {"version": EPISODE_VERSION, "dt": self.dt, "t_history": self.t_history}
        for key, attr in self._KEYS:
            doc[key] = getattr(self, attr).tolist()
        if self.map_successors:
            doc["map/successors"] = [list(map(int, s)) for s in self.map_successors]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Episode":
        if doc.get("version") != EPISODE_VERSION:
            raise ValueError(f"unsupported episode version {doc.get('version')!r}")
        kw = {"dt": float(doc["dt"]), "t_history": int(doc["t_history"])}
        dtypes = {
            "agent_valid": bool, "map_valid": bool, "tl_valid": bool,
            "agent_role": bool, "agent_dest": np.int32,
        }
        for key, attr in cls._KEYS:
            kw[attr] = np.asarray(doc[key], dtype=dtypes.get(attr, np.float32))
        kw["map_successors"] = [list(map(int, s)) for s in doc.get("map/successors", [])]
        return cls(**kw)

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path: str | Path) -> "Episode":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def save_cache(self, path: str | Path, content_hash: str | None = None) -> None:
        """Write the .epb binary cache keyed by a content hash."""
        arrays = {key: getattr(self, attr) for key, attr in self._KEYS}
        meta = {"dt": self.dt, "t_history": self.t_history,
                "content_hash": content_hash or self.content_hash(),
                "map/successors": [list(map(int, s)) for s in self.map_successors]}
        container.save_arrays(path, EPISODE_VERSION, arrays, meta)

    @classmethod
    def load_cache(cls, path: str | Path) -> "Episode":
        _, arrays, meta = container.load_arrays(path, EPISODE_VERSION)
        kw = {"dt": float(meta["dt"]), "t_history": int(meta["t_history"])}
        dtypes = {
            "agent_valid": bool, "map_valid": bool, "tl_valid": bool,
            "agent_role": bool, "agent_dest": np.int32,
        }
        for key, attr in cls._KEYS:
            arr = arrays[key]
            kw[attr] = arr.astype(dtypes.get(attr, np.float32))
        kw["map_successors"] = [list(map(int, s)) for s in meta.get("map/successors", [])]
        return cls(**kw)


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_episode(path: str | Path, use_cache: bool = True) -> Episode:
    """Load a JSON episode, transparently using/refreshing its .epb cache.

    The cache is keyed by a hash of the JSON file bytes; a stale cache is
    rewritten on the next load.
    """
    path = Path(path)
    cache = path.with_suffix(".epb")
    key = file_hash(path)
    if use_cache and cache.exists():
        try:
            _, arrays, meta = container.load_arrays(cache, EPISODE_VERSION)
            if meta.get("content_hash") == key:
                return Episode.load_cache(cache)
        except Exception:
            pass
    ep = Episode.load_json(path)
    if use_cache:
        try:
            ep.save_cache(cache, content_hash=key)
        except OSError:
            pass
    return ep


# -- raw episode serialization ----------------------------------------------


def raw_to_dict(raw: RawEpisode) -> dict:
    return {
        "version": RAW_VERSION,
        "dt": raw.dt,
        "t_history": raw.t_history,
        "map_polylines": [
            {"type": int(p.type_index), "nodes": np.asarray(p.nodes, dtype=float).tolist()}
            for p in raw.map_polylines
        ],
        "tl/polyline": raw.tl_polyline.tolist(),
        "tl/valid": raw.tl_valid.tolist(),
        "tl/state": raw.tl_state.tolist(),
        "tl/stop_pos": raw.tl_stop_pos.tolist(),
        "tl/stop_dir": raw.tl_stop_dir.tolist(),
        "agent/valid": raw.agent_valid.tolist(),
        "agent/pos": raw.agent_pos.tolist(),
        "agent/yaw": raw.agent_yaw.tolist(),
        "agent/vel": raw.agent_vel.tolist(),
        "agent/type": raw.agent_type.tolist(),
        "agent/role": raw.agent_role.tolist(),
        "agent/size": raw.agent_size.tolist(),
        "sdc_index": int(raw.sdc_index),
        "lane_successors": [list(map(int, s)) for s in raw.lane_successors],
    }


def raw_from_dict(doc: dict) -> RawEpisode:
    if doc.get("version") != RAW_VERSION:
        raise ValueError(f"unsupported raw episode version {doc.get('version')!r}")
    return RawEpisode(
        dt=float(doc["dt"]),
        t_history=int(doc["t_history"]),
        map_polylines=[
            RawPolyline(int(p["type"]), np.asarray(p["nodes"], dtype=float))
            for p in doc["map_polylines"]
        ],
        tl_polyline=np.asarray(doc["tl/polyline"], dtype=int),
        tl_valid=np.asarray(doc["tl/valid"], dtype=bool),
        tl_state=np.asarray(doc["tl/state"], dtype=int),
        tl_stop_pos=np.asarray(doc["tl/stop_pos"], dtype=float),
        tl_stop_dir=np.asarray(doc["tl/stop_dir"], dtype=float),
        agent_valid=np.asarray(doc["agent/valid"], dtype=bool),
        agent_pos=np.asarray(doc["agent/pos"], dtype=float),
        agent_yaw=np.asarray(doc["agent/yaw"], dtype=float),
        agent_vel=np.asarray(doc["agent/vel"], dtype=float),
        agent_type=np.asarray(doc["agent/type"], dtype=int),
        agent_role=np.asarray(doc["agent/role"], dtype=bool),
        agent_size=np.asarray(doc["agent/size"], dtype=float),
        sdc_index=int(doc["sdc_index"]),
        lane_successors=[list(map(int, s)) for s in doc.get("lane_successors", [])],
    )


def save_raw(raw: RawEpisode, path: str | Path) -> None:
    Path(path).write_text(json.dumps(raw_to_dict(raw)))


def load_raw(path: str | Path) -> RawEpisode:
    return raw_from_dict(json.loads(Path(path).read_text()))


def one_hot(indices: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(indices.shape + (n,), dtype=np.float32)
    np.put_along_axis(out, np.expand_dims(indices, -1), 1.0, axis=-1)
    return out


def yaw_from_dir(direc: np.ndarray) -> np.ndarray:
    """Heading angle of direction vectors, zero where the vector is zero."""
    out = np.arctan2(direc[..., 1], direc[..., 0])
    zero = np.linalg.norm(direc, axis=-1) < 1e-9
    return np.where(zero, 0.0, out)
