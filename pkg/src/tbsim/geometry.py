"""2D pose math, polyline queries and oriented-bounding-box overlap.

Everything here is stateless numpy; callers pass plain arrays. Angles are
radians and every function that returns an angle keeps it in (-pi, pi].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into the half-open interval (-pi, pi]."""
    theta = np.asarray(theta)
    if not np.all(np.isfinite(theta)):
        raise ValueError("wrap_angle: non-finite angle")
    wrapped = np.pi - np.mod(np.pi - theta, TWO_PI)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass
class Pose2:
    """A planar pose (meters, meters, radians)."""

    x: float
    y: float
    theta: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


def extend_constant_velocity(pose: Pose2, speed: float, horizon: float) -> Pose2:
    """Advance `pose` along its heading at `speed` for `horizon` seconds."""
    if speed < 0:
        raise ValueError("extend_constant_velocity: negative speed")
    d = speed * horizon
    return Pose2(pose.x + d * np.cos(pose.theta), pose.y + d * np.sin(pose.theta), pose.theta)


@dataclass
class Obb:
    """Oriented bounding box: center, yaw and half extents (length/2, width/2)."""

    center: np.ndarray
    yaw: float
    half_extent: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extent = np.asarray(self.half_extent, dtype=float)
        if np.any(self.half_extent <= 0):
            raise ValueError("Obb: half extents must be positive")

    def axes(self) -> np.ndarray:
        """Unit local axes as rows: [forward; left]."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        """The 4 corner points, counter-clockwise, shape [4, 2]."""
        ax = self.axes()
        hx, hy = self.half_extent
        offsets = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        return self.center + offsets @ ax

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean containment test for points of shape [..., 2] (closed box)."""
        local = (np.asarray(points) - self.center) @ self.axes().T
        return np.all(np.abs(local) <= self.half_extent + margin, axis=-1)


def obb_separation(a: Obb, b: Obb) -> float:
    """Signed separation along the best separating axis of the 4 candidates.

    Negative means the boxes overlap by that depth; positive means they are
    disjoint with at least that gap. Zero means touching.
    """
    delta = b.center - a.center
    best = -np.inf
    for box in (a, b):
        for axis in box.axes():
            ra = np.sum(a.half_extent * np.abs(a.axes() @ axis))
            rb = np.sum(b.half_extent * np.abs(b.axes() @ axis))
            gap = abs(float(np.dot(delta, axis))) - (ra + rb)
            best = max(best, gap)
    return best


def obb_overlap(a: Obb, b: Obb) -> bool:
    """Separating-axis test over the 4 box axes; touching counts as overlap."""
    return obb_separation(a, b) <= 0.0


def nearest_polyline(
    pose: Pose2,
    map_pos: np.ndarray,
    map_dir: np.ndarray,
    map_valid: np.ndarray,
    candidates: np.ndarray | None = None,
    direction_tolerance: float | None = None,
    max_distance: float | None = None,
) -> int | None:
    """Index of the closest polyline to `pose`, or None if nothing qualifies.

    map_pos: [N_M, N_node, 2], map_dir: [N_M, N_node, 2], map_valid: [N_M, N_node].
    `candidates` optionally restricts the search to a subset of polyline indices.
    With `direction_tolerance` set, only nodes whose direction is within that
    angle of pose.theta count; polylines with no such node are skipped.
    Ties are broken by the lowest polyline index.
    """
    n_m = map_pos.shape[0]
    if candidates is None:
        candidates = np.arange(n_m)
    candidates = np.sort(np.asarray(candidates, dtype=int))
    if candidates.size == 0:
        return None

    pos = map_pos[candidates]
    valid = map_valid[candidates].copy()
    if direction_tolerance is not None:
        node_yaw = np.arctan2(map_dir[candidates][..., 1], map_dir[candidates][..., 0])
        dyaw = np.abs(wrap_angle(node_yaw - pose.theta))
        valid = valid & (dyaw <= direction_tolerance)

    d = np.linalg.norm(pos - pose.xy, axis=-1)
    d = np.where(valid, d, np.inf)
    per_poly = d.min(axis=-1)
    best = int(np.argmin(per_poly))  # argmin takes the first minimum: lowest index
    best_dist = per_poly[best]
    if not np.isfinite(best_dist):
        return None
    if max_distance is not None and best_dist > max_distance:
        return None
    return int(candidates[best])
