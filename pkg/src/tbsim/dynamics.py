"""Constrained unicycle integration per agent type.

Normalized commands in [-1, 1]^2 scale to per-type acceleration and yaw-rate
limits; the semi-implicit update (speed and heading first, then position)
enforces the limits exactly and stays differentiable end to end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import wrap_angle


@dataclass
class DynamicsConfig:
    # limits indexed by agent type [vehicle, pedestrian, cyclist]
    accel_max: tuple[float, float, float] = (5.0, 7.0, 6.0)       # m/s^2
    yaw_rate_max: tuple[float, float, float] = (1.5, 7.0, 3.0)    # rad/s
    # reversing (negative speed) allowed per type; vehicles only by default
    allow_reverse: tuple[bool, bool, bool] = (True, False, False)
    clamp_nonnegative_speed: bool = False  # force v >= 0 for every type
    dt: float = 0.1

    def __post_init__(self):
        if any(a <= 0 for a in self.accel_max) or any(w <= 0 for w in self.yaw_rate_max):
            raise ValueError("dynamics limits must be positive")

    def per_agent_limits(self, type_onehot: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ty = np.asarray(type_onehot)
        a_max = ty @ np.asarray(self.accel_max)
        w_max = ty @ np.asarray(self.yaw_rate_max)
        if self.clamp_nonnegative_speed:
            reverse_ok = np.zeros(ty.shape[:-1], dtype=bool)
        else:
            reverse_ok = ty @ np.asarray(self.allow_reverse, dtype=float) > 0.5
        return a_max, w_max, reverse_ok


def step_unicycle(
    state: Tensor,
    cmd: Tensor,
    type_onehot: np.ndarray,
    cfg: DynamicsConfig,
    dt: float | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Advance states (x, y, yaw, v) of shape [N, 4] by one step.

    cmd is [N, 2] normalized (accel, yaw rate), clamped defensively. Returns
    (next_state [N, 4], accel [N], yaw_rate [N]) where accel/yaw_rate are the
    realized values after limits and speed clamping.
    """
    state = ad.as_tensor(state)
    cmd = ad.as_tensor(cmd)
    if not np.all(np.isfinite(state.numpy())):
        raise FloatingPointError("step_unicycle: non-finite state")
    dt = cfg.dt if dt is None else dt
    a_max, w_max, reverse_ok = cfg.per_agent_limits(type_onehot)

    cmd = ad.clamp(cmd, -1.0, 1.0)
    accel = ad.mul(cmd[:, 0], Tensor(a_max))
    yaw_rate = ad.mul(cmd[:, 1], Tensor(w_max))

    x, y = state[:, 0], state[:, 1]
    yaw, v = state[:, 2], state[:, 3]

    v_new = ad.add(v, ad.mul(accel, dt))
    v_clamped = ad.relu(v_new)
    v_new = ad.where_mask(reverse_ok, v_new, v_clamped)
    yaw_new = ad.wrap_angle_op(ad.add(yaw, ad.mul(yaw_rate, dt)))
    x_new = ad.add(x, ad.mul(ad.mul(v_new, ad.cos(yaw_new)), dt))
    y_new = ad.add(y, ad.mul(ad.mul(v_new, ad.sin(yaw_new)), dt))

    def col(t):
        return ad.reshape(t, (t.shape[0], 1))

    next_state = ad.concat([col(x_new), col(y_new), col(yaw_new), col(v_new)], axis=-1)
    realized_accel = ad.div(ad.sub(v_new, v), dt)
    realized_yaw_rate = yaw_rate
    return next_state, realized_accel, realized_yaw_rate


def inverse_dynamics(
    state_t: np.ndarray,
    state_t1: np.ndarray,
    type_onehot: np.ndarray,
    cfg: DynamicsConfig,
    dt: float | None = None,
) -> tuple[np.ndarray, dict]:
    """Recover normalized commands that best explain a state transition.

    Accelerations/yaw rates beyond the per-type limits are clamped; the
    report carries the residual magnitudes."""
    dt = cfg.dt if dt is None else dt
    state_t = np.asarray(state_t, dtype=float)
    state_t1 = np.asarray(state_t1, dtype=float)
    a_max, w_max, _ = cfg.per_agent_limits(type_onehot)

    accel = (state_t1[..., 3] - state_t[..., 3]) / dt
    yaw_rate = wrap_angle(state_t1[..., 2] - state_t[..., 2]) / dt
    accel_c = np.clip(accel, -a_max, a_max)
    yaw_rate_c = np.clip(yaw_rate, -w_max, w_max)
    cmd = np.stack([accel_c / a_max, yaw_rate_c / w_max], axis=-1)
    report = {
        "accel_residual": np.abs(accel - accel_c),
        "yaw_rate_residual": np.abs(yaw_rate - yaw_rate_c),
    }
    return cmd, report
