"""Closed-loop simulation: teacher-forced warm start, per-step world update,
per-agent control assignment (bot / log-replay / external player) and the
three rollout modes (a posteriori, a priori, counterfactual).

Step indexing: episode arrays run over i in [0, T); the current step t=0 sits
at i = t_history, so t = i - t_history in [-T_h, T_f].
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .destination import gt_goal
from .dynamics import DynamicsConfig, step_unicycle
from .encoders import EncodedContext
from .episode import Episode
from .generative import sample_personality
from .model import WorldModel
from .policy import StepInputs, update_reached

TRACE_VERSION = "tbsim-trace/1"

CONTROLLER_BOT = "trafficbot"
CONTROLLER_REPLAY = "log_replay"
CONTROLLER_EXTERNAL = "external"
CONTROLLERS = (CONTROLLER_BOT, CONTROLLER_REPLAY, CONTROLLER_EXTERNAL)


@dataclass
class ControlAssignment:
    """Per-agent controller tags plus attention visibility."""

    controllers: list[str]
    visible: np.ndarray | None = None  # default: everyone visible

    def __post_init__(self):
        for c in self.controllers:
            if c not in CONTROLLERS:
                raise ValueError(f"unknown controller {c!r}")
        if self.visible is None:
            self.visible = np.ones(len(self.controllers), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool)

    @classmethod
    def all_bots(cls, n_agents: int) -> "ControlAssignment":
        return cls([CONTROLLER_BOT] * n_agents)

    @classmethod
    def all_replay(cls, n_agents: int) -> "ControlAssignment":
        return cls([CONTROLLER_REPLAY] * n_agents)

    def tags(self) -> np.ndarray:
        return np.asarray(self.controllers)


@dataclass
class Observation:
    """What an external player sees each step: the full vectorized scene."""

    step: int                 # array index
    t: int                    # step relative to the current step (t=0)
    dt: float
    player_index: int
    map_pos: np.ndarray
    map_dir: np.ndarray
    map_valid: np.ndarray
    map_type: np.ndarray
    tl_pos: np.ndarray
    tl_dir: np.ndarray
    tl_state: np.ndarray
    tl_valid: np.ndarray
    agent_state: np.ndarray   # [N_A, 4] (x, y, yaw, v)
    agent_valid: np.ndarray
    agent_type: np.ndarray
    agent_size: np.ndarray


@dataclass
class PlayerAction:
    """Normalized (accel, yaw rate) commands in [-1, 1]."""

    accel: float
    yaw_rate: float


@dataclass
class PlayerState:
    """Direct next kinematic state."""

    x: float
    y: float
    yaw: float
    v: float


@dataclass
class RolloutTrace:
    mode: str
    seed: int
    dt: float
    t_history: int
    valid: np.ndarray        # [T, N_A]
    pos: np.ndarray          # [T, N_A, 2]
    yaw: np.ndarray          # [T, N_A, 1]
    spd: np.ndarray          # [T, N_A, 1]
    yaw_rate: np.ndarray     # [T, N_A, 1]
    acc: np.ndarray          # [T, N_A, 1]
    controllers: list[str]
    scores: np.ndarray | None = None        # [N_A] per-agent mode score
    dest_index0: np.ndarray | None = None   # [N_A]
    dest_probs: np.ndarray | None = None    # [N_A, N_M]
    flags: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return self.valid.shape[0]

    def future_slice(self) -> slice:
        return slice(self.t_history + 1, self.n_steps)

    def to_dict(self) -> dict:
        doc = {
            "version": TRACE_VERSION, "mode": self.mode, "seed": self.seed,
            "dt": self.dt, "t_history": self.t_history,
            "valid": self.valid.tolist(), "pos": self.pos.tolist(),
            "yaw": self.yaw.tolist(), "spd": self.spd.tolist(),
            "yaw_rate": self.yaw_rate.tolist(), "acc": self.acc.tolist(),
            "controllers": list(self.controllers),
            "flags": self.flags,
        }
        for name in ("scores", "dest_index0", "dest_probs"):
            v = getattr(self, name)
            doc[name] = None if v is None else np.asarray(v).tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RolloutTrace":
        if doc.get("version") != TRACE_VERSION:
            raise ValueError(f"unsupported trace version {doc.get('version')!r}")
        opt = {}
        for name, dtype in (("scores", float), ("dest_index0", int), ("dest_probs", float)):
            v = doc.get(name)
            opt[name] = None if v is None else np.asarray(v, dtype=dtype)
        return cls(
            mode=doc["mode"], seed=int(doc["seed"]), dt=float(doc["dt"]),
            t_history=int(doc["t_history"]),
            valid=np.asarray(doc["valid"], dtype=bool),
            pos=np.asarray(doc["pos"], dtype=np.float32),
            yaw=np.asarray(doc["yaw"], dtype=np.float32),
            spd=np.asarray(doc["spd"], dtype=np.float32),
            yaw_rate=np.asarray(doc["yaw_rate"], dtype=np.float32),
            acc=np.asarray(doc["acc"], dtype=np.float32),
            controllers=list(doc["controllers"]),
            flags=dict(doc.get("flags", {})),
            **opt,
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load_json(cls, path) -> "RolloutTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))


def replay_trace(episode: Episode, mode: str = "log_replay", seed: int = 0) -> RolloutTrace:
    """A trace that copies the recorded episode bit for bit."""
    return RolloutTrace(
        mode=mode, seed=seed, dt=episode.dt, t_history=episode.t_history,
        valid=episode.agent_valid.copy(), pos=episode.agent_pos.copy(),
        yaw=episode.agent_yaw.copy(), spd=episode.agent_spd.copy(),
        yaw_rate=episode.agent_yaw_rate.copy(), acc=episode.agent_acc.copy(),
        controllers=[CONTROLLER_REPLAY] * episode.n_agents,
    )


def gt_target_index0(episode: Episode, dest_mode: str) -> np.ndarray:
    """Recorded navigation target per agent: the preprocessed destination, or
    the goal polyline when the model is configured for goals."""
    if dest_mode == "goal":
        return np.asarray([gt_goal(episode, j) for j in range(episode.n_agents)], dtype=int)
    return episode.dest_index0()


class Simulation:
    """One rollout over one episode.

    Differentiable when run inside a tape: bot states flow through the
    policy and dynamics; log-replay and external rows are constants.
    """

    def __init__(
        self,
        model: WorldModel,
        episode: Episode,
        assignment: ControlAssignment,
        ctx: EncodedContext,
        z: Tensor | None,
        dest_index0: np.ndarray | None,
        hold_lights: bool = False,
        player=None,
        detach_policy_input: bool = True,
    ):
        if len(assignment.controllers) != episode.n_agents:
            raise ValueError("assignment size != agent count")
        self.model = model
        self.episode = episode
        self.ctx = ctx
        self.z = z
        self.player = player
        self.hold_lights = hold_lights
        self.detach_policy_input = detach_policy_input
        self.cfg = model.cfg
        self.dyn: DynamicsConfig = model.cfg.dynamics

        t0 = episode.t_history
        controllers = list(assignment.controllers)
        for j in range(episode.n_agents):
            # bots need a valid current state; others replay their segments
            if controllers[j] == CONTROLLER_BOT and not episode.agent_valid[t0, j]:
                controllers[j] = CONTROLLER_REPLAY
            if controllers[j] == CONTROLLER_EXTERNAL and player is None:
                raise ValueError("external controller assigned but no player given")
        self.controllers = controllers
        self.bot_mask = np.asarray([c == CONTROLLER_BOT for c in controllers])
        self.external_mask = np.asarray([c == CONTROLLER_EXTERNAL for c in controllers])
        self.replay_mask = np.asarray([c == CONTROLLER_REPLAY for c in controllers])
        self.visible = assignment.visible.copy()

        self.dest_index0 = (np.full(episode.n_agents, -1, dtype=int)
                            if dest_index0 is None else np.asarray(dest_index0, dtype=int))
        self.dest_feat = (model.dest_features(ctx, self.dest_index0)
                          if model.cfg.policy.use_destination else None)
        self.flags: dict = {"clamped_player_steps": 0}

    # -- helpers -----------------------------------------------------------

    def _gt_state(self, i: int) -> Tensor:
        ep = self.episode
        arr = np.concatenate([
            ep.agent_pos[i], ep.agent_yaw[i], ep.agent_spd[i]], axis=-1)
        return Tensor(arr)

    def _gt_rates(self, i: int) -> tuple[Tensor, Tensor]:
        ep = self.episode
        return Tensor(ep.agent_acc[i, :, 0]), Tensor(ep.agent_yaw_rate[i, :, 0])

    def _encode_states(self, state: Tensor, acc: Tensor, yaw_rate: Tensor,
                       valid: np.ndarray) -> Tensor:
        ep = self.episode
        if self.detach_policy_input:
            state = ad.stop_gradient(state)
            acc = ad.stop_gradient(acc)
            yaw_rate = ad.stop_gradient(yaw_rate)
        return self.model.agent_encoder(
            state[:, 0], state[:, 1], state[:, 2], state[:, 3],
            acc, yaw_rate, ep.agent_type, ep.agent_size, valid=valid)

    def _lights(self, i: int) -> tuple[Tensor | None, np.ndarray | None]:
        if self.episode.n_lights == 0:
            return None, None
        idx = self.episode.t_history if (self.hold_lights and i > self.episode.t_history) else i
        feat, valid = self.ctx.lights_at(idx)
        return feat, valid

    def _step_inputs(self, state_emb: Tensor, valid: np.ndarray, i: int) -> StepInputs:
        light_feat, light_valid = self._lights(i)
        return StepInputs(
            state_emb=state_emb, agent_valid=valid, visible=self.visible,
            type_onehot=self.episode.agent_type, map_feat=self.ctx.map_feat,
            map_valid=self.ctx.map_valid, light_feat=light_feat,
            light_valid=light_valid, z=self.z, dest_feat=self.dest_feat)

    def _update_reached(self, rec, positions: np.ndarray):
        ep = self.episode
        rec.reached = update_reached(
            rec.reached, positions, self.dest_index0, ep.map_pos, ep.map_valid,
            self.cfg.policy.reached_threshold)

    # -- rollout ------------------------------------------------------------

    def run(self) -> tuple[RolloutTrace, list[Tensor], np.ndarray]:
        """Returns (trace, per-step bot state tensors for t in [1, T_f],
        loss mask [T_f, N_A]).

        The trace history segment t in [-T_h, 0] equals the episode exactly
        (teacher forcing)."""
        ep = self.episode
        model = self.model
        t0, t_end = ep.t_history, ep.n_steps - 1
        n_a = ep.n_agents

        rec = model.policy.initial_state(n_a)
        # teacher-forced warm start over the history window
        for i in range(t0):
            valid = ep.agent_valid[i]
            emb = self._encode_states(self._gt_state(i), *self._gt_rates(i), valid)
            self._update_reached(rec, ep.agent_pos[i])
            _, rec = model.policy.step(self._step_inputs(emb, valid, i), rec)

        # trace buffers, history prefilled with GT
        trace = replay_trace(ep)
        trace.controllers = list(self.controllers)

        state = self._gt_state(t0)
        acc_t, rate_t = self._gt_rates(t0)
        cur_valid = ep.agent_valid[t0].copy()
        sim_states: list[Tensor] = []
        loss_mask = np.zeros((ep.n_steps - t0 - 1, n_a), dtype=bool)

        for i in range(t0, t_end):
            self._update_reached(rec, state.numpy()[:, :2])
            emb = self._encode_states(state, acc_t, rate_t, cur_valid)
            actions, rec = model.policy.step(self._step_inputs(emb, cur_valid, i), rec)

            next_bot, bot_acc, bot_rate = step_unicycle(
                state, actions, ep.agent_type, self.dyn, ep.dt)

            # assemble the next step's full state
            gt_next = self._gt_state(i + 1)
            gt_acc, gt_rate = self._gt_rates(i + 1)
            bot_rows = self.bot_mask[:, None]
            next_state = ad.where_mask(bot_rows, next_bot, gt_next)
            next_acc = ad.where_mask(self.bot_mask, bot_acc, gt_acc)
            next_rate = ad.where_mask(self.bot_mask, bot_rate, gt_rate)

            if self.external_mask.any():
                next_state, next_acc, next_rate = self._apply_player(
                    i, state, next_state, next_acc, next_rate)

            # bots and the player stay valid once simulated; replay follows GT
            next_valid = np.where(self.replay_mask, ep.agent_valid[i + 1], cur_valid)

            # record
            arr = next_state.numpy()
            j = i + 1
            trace.valid[j] = next_valid
            controlled = self.bot_mask | self.external_mask
            trace.pos[j, controlled] = arr[controlled, :2]
            trace.yaw[j, controlled, 0] = arr[controlled, 2]
            trace.spd[j, controlled, 0] = arr[controlled, 3]
            trace.acc[j, controlled, 0] = next_acc.numpy()[controlled]
            trace.yaw_rate[j, controlled, 0] = next_rate.numpy()[controlled]

            sim_states.append(next_state)
            loss_mask[i - t0] = self.bot_mask & next_valid & ep.agent_valid[i + 1]

            state, acc_t, rate_t, cur_valid = next_state, next_acc, next_rate, next_valid

        trace.flags.update(self.flags)
        trace.dest_index0 = self.dest_index0.copy()
        return trace, sim_states, loss_mask

    def _apply_player(self, i: int, state: Tensor, next_state: Tensor,
                      next_acc: Tensor, next_rate: Tensor):
        ep = self.episode
        obs = Observation(
            step=i, t=i - ep.t_history, dt=ep.dt,
            player_index=int(np.flatnonzero(self.external_mask)[0]),
            map_pos=ep.map_pos, map_dir=ep.map_dir, map_valid=ep.map_valid,
            map_type=ep.map_type,
            tl_pos=ep.tl_pos[i], tl_dir=ep.tl_dir[i], tl_state=ep.tl_state[i],
            tl_valid=ep.tl_valid[i],
            agent_state=state.numpy().copy(), agent_valid=ep.agent_valid[i],
            agent_type=ep.agent_type, agent_size=ep.agent_size)
        for j in np.flatnonzero(self.external_mask):
            obs.player_index = int(j)
            resp = self.player(obs)
            if resp is None:
                raise ValueError(f"player returned no response for agent {j} at step {i}")
            if isinstance(resp, PlayerAction):
                cmd = np.array([resp.accel, resp.yaw_rate], dtype=float)
                if np.any(np.abs(cmd) > 1.0):
                    self.flags["clamped_player_steps"] += 1
                cmd_t = Tensor(np.clip(cmd, -1, 1)[None, :])
                row, a_r, r_r = step_unicycle(
                    ad.stop_gradient(state[j:j + 1]), cmd_t,
                    ep.agent_type[j:j + 1], self.dyn, ep.dt)
                row_np, a_np, r_np = row.numpy()[0], a_r.numpy()[0], r_r.numpy()[0]
            elif isinstance(resp, PlayerState):
                row_np = np.array([resp.x, resp.y, resp.yaw, resp.v])
                a_np = (resp.v - float(state.numpy()[j, 3])) / ep.dt
                r_np = float(np.arctan2(np.sin(resp.yaw - state.numpy()[j, 2]),
                                        np.cos(resp.yaw - state.numpy()[j, 2]))) / ep.dt
            else:
                raise TypeError(f"player response must be PlayerAction or PlayerState, got {type(resp)}")
            mask = np.zeros(ep.n_agents, dtype=bool)
            mask[j] = True
            patch = np.zeros_like(next_state.numpy())
            patch[j] = row_np
            next_state = ad.where_mask(mask[:, None], Tensor(patch), next_state)
            acc_patch = np.zeros(ep.n_agents)
            acc_patch[j] = a_np
            rate_patch = np.zeros(ep.n_agents)
            rate_patch[j] = r_np
            next_acc = ad.where_mask(mask, Tensor(acc_patch), next_acc)
            next_rate = ad.where_mask(mask, Tensor(rate_patch), next_rate)
        return next_state, next_acc, next_rate


# ---------------------------------------------------------------------------
# rollout drivers
# ---------------------------------------------------------------------------


def prepare_latents(
    model: WorldModel,
    episode: Episode,
    ctx: EncodedContext,
    state_emb: Tensor,
    z_source: str,
    dest_source: str,
    rng: np.random.Generator,
    with_scores: bool = False,
):
    """Resolve (z, dest_index0, info) from the configured sources.

    z_source: posterior-most-likely | posterior-sample | prior-most-likely |
    prior-sample | none. dest_source: gt | predicted-argmax |
    predicted-sample | none. `with_scores` forces the destination classifier
    to run even for GT destinations, so log-probabilities are available.
    """
    pc = model.cfg.policy
    info: dict = {}
    z = None
    if pc.use_personality and z_source != "none":
        which, _, how = z_source.partition("-")
        dist = model.personality(episode, ctx, state_emb, which)
        mode = "most-likely" if how == "most-likely" else "sample"
        z = sample_personality(dist, mode, rng)
        info["z_log_prob"] = dist.log_prob(z.numpy())
        info["z_dist"] = dist
    dest = None
    if pc.use_destination and dest_source != "none":
        if dest_source == "gt":
            dest = gt_target_index0(episode, pc.dest_mode)
            if with_scores:
                dist = model.destination_dist(episode, ctx, state_emb)
                info["dest_dist"] = dist
                info["dest_probs"] = dist.probs()
        else:
            dist = model.destination_dist(episode, ctx, state_emb)
            info["dest_dist"] = dist
            info["dest_probs"] = dist.probs()
            if dest_source == "predicted-argmax":
                dest = dist.argmax()
            elif dest_source == "predicted-sample":
                dest = dist.sample(rng)
            else:
                raise ValueError(f"unknown dest_source {dest_source!r}")
            dest = np.where(episode.agent_valid.any(axis=0), dest, -1)
        if "dest_dist" in info:
            safe = np.where(dest >= 0, dest, 0)
            info["dest_log_prob"] = info["dest_dist"].log_prob(safe)
    return z, dest, info


def rollout_a_posteriori(
    model: WorldModel,
    episode: Episode,
    seed: int = 0,
    assignment: ControlAssignment | None = None,
) -> RolloutTrace:
    """Single-mode reconstruction: most likely posterior personality and the
    recorded destination; GT traffic lights."""
    with ad.no_grad():
        ctx = model.encode_context(episode)
        state_emb = model.encode_gt_agents(episode)
        rng = np.random.default_rng(seed)
        z, dest, _ = prepare_latents(
            model, episode, ctx, state_emb,
            "posterior-most-likely" if model.cfg.policy.use_personality else "none",
            "gt" if model.cfg.policy.use_destination else "none", rng)
        sim = Simulation(model, episode,
                         assignment or ControlAssignment.all_bots(episode.n_agents),
                         ctx, z, dest, hold_lights=False)
        trace, _, _ = sim.run()
    trace.mode = "aposteriori"
    trace.seed = seed
    return trace


def rollout_a_priori(
    model: WorldModel,
    episode: Episode,
    k: int = 6,
    seed: int = 0,
    gt_sdc_future: bool = False,
    gt_lights: bool = False,
    gt_destination: bool = False,
    score_temperature: float = 1.0,
) -> list[RolloutTrace]:
    """K multi-modal futures conditioned on history only.

    Mode 0 is deterministic (argmax destination, prior mean); the rest sample
    the destination distribution and the prior personality. Per-agent mode
    scores are a temperature softmax of log p(dest) + log p(z) across modes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pc = model.cfg.policy
    traces: list[RolloutTrace] = []
    log_scores = np.zeros((k, episode.n_agents))
    with ad.no_grad():
        ctx = model.encode_context(episode)
        state_emb = model.encode_gt_agents(episode)
        for mode_idx in range(k):
            rng = np.random.default_rng(np.random.SeedSequence((seed, mode_idx)))
            deterministic = mode_idx == 0
            z_source = ("prior-most-likely" if deterministic else "prior-sample") \
                if pc.use_personality else "none"
            if not pc.use_destination:
                dest_source = "none"
            elif gt_destination:
                dest_source = "gt"
            else:
                dest_source = "predicted-argmax" if deterministic else "predicted-sample"
            z, dest, info = prepare_latents(
                model, episode, ctx, state_emb, z_source, dest_source, rng,
                with_scores=True)
            assignment = ControlAssignment.all_bots(episode.n_agents)
            if gt_sdc_future:
                assignment.controllers[episode.sdc_index] = CONTROLLER_REPLAY
            sim = Simulation(model, episode, assignment, ctx, z, dest,
                             hold_lights=not gt_lights)
            trace, _, _ = sim.run()
            trace.mode = f"apriori/{mode_idx}"
            trace.seed = seed
            if "dest_probs" in info:
                trace.dest_probs = info["dest_probs"]
            lp = np.zeros(episode.n_agents)
            if "z_log_prob" in info:
                lp += info["z_log_prob"]
            if "dest_log_prob" in info:
                lp += info["dest_log_prob"]
            log_scores[mode_idx] = lp
            traces.append(trace)
    # per-agent softmax over modes with temperature
    s = log_scores / max(score_temperature, 1e-9)
    s = s - s.max(axis=0, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=0, keepdims=True)
    for mode_idx, trace in enumerate(traces):
        trace.scores = w[mode_idx]
    return traces


def rollout_counterfactual(
    model: WorldModel,
    episode: Episode,
    assignment: ControlAssignment,
    player,
    seed: int = 0,
    z_source: str = "posterior-most-likely",
    dest_source: str = "gt",
) -> RolloutTrace:
    """Rollout with at least one external agent; bots react online."""
    if CONTROLLER_EXTERNAL not in assignment.controllers:
        raise ValueError("counterfactual rollout needs at least one external agent")
    with ad.no_grad():
        ctx = model.encode_context(episode)
        state_emb = model.encode_gt_agents(episode)
        rng = np.random.default_rng(seed)
        pc = model.cfg.policy
        z, dest, _ = prepare_latents(
            model, episode, ctx, state_emb,
            z_source if pc.use_personality else "none",
            dest_source if pc.use_destination else "none", rng)
        sim = Simulation(model, episode, assignment, ctx, z, dest,
                         hold_lights=False, player=player)
        trace, _, _ = sim.run()
    trace.mode = "counterfactual"
    trace.seed = seed
    return trace
