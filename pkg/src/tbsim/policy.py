"""Per-step bot policy: context cross-attention, interaction self-attention,
recurrent aggregation, destination/personality injection and per-type action
heads.

One policy step consumes the encoded current states of every agent (bots and
non-bots alike, so bots can react to anything on the road) and emits
normalized (acceleration, yaw-rate) commands in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import EncoderConfig
from .nn import GruCell, Linear, Mlp, Module, ModuleList, TransformerLayer


@dataclass
class PolicyConfig:
    hidden: int = 128
    n_head: int = 4
    ff_scale: int = 2
    dropout: float = 0.1
    n_layers_map: int = 2
    n_layers_tl: int = 1
    n_layers_interaction: int = 1
    n_layers_polyline: int = 1
    personality_dim: int = 16
    use_personality: bool = True
    dest_mode: str = "destination"   # destination | goal | none
    use_navigator: bool = True       # drop the goal/destination once reached
    reached_threshold: float = 2.0   # meters to a destination node
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.hidden % self.n_head != 0:
            raise ValueError("hidden must be divisible by n_head")
        if self.dest_mode not in ("destination", "goal", "none"):
            raise ValueError(f"unknown dest_mode {self.dest_mode!r}")
        self.encoder.hidden = self.hidden

    @property
    def ff_dim(self) -> int:
        return self.ff_scale * self.hidden

    @property
    def use_destination(self) -> bool:
        return self.dest_mode != "none"


@dataclass
class RecurrentState:
    """Per-agent GRU hidden plus monotone destination-reached flags."""

    hidden: Tensor            # [N_A, hidden]
    reached: np.ndarray       # [N_A] bool

    def detached(self) -> "RecurrentState":
        return RecurrentState(ad.stop_gradient(self.hidden), self.reached.copy())


class CombineFeature(Module):
    """Residual injection x + mask * MLP(cat(x, f)); rows with mask False are
    bitwise unchanged."""

    def __init__(self, hidden: int, f_dim: int, rng: np.random.Generator):
        super().__init__()
        self.mlp = Mlp([hidden + f_dim, hidden, hidden], rng)

    def __call__(self, x: Tensor, f: Tensor, valid_mask: np.ndarray) -> Tensor:
        r = self.mlp(ad.concat([x, f], axis=-1))
        r = ad.masked_fill(r, ~np.asarray(valid_mask, dtype=bool)[..., None], 0.0)
        return ad.add(x, r)


class ActionHead(Module):
    """Two-layer MLP + tanh, separate parameters per agent type."""

    def __init__(self, hidden: int, n_types: int, rng: np.random.Generator):
        super().__init__()
        self.heads = ModuleList([Mlp([hidden, hidden, 2], rng) for _ in range(n_types)])
        self.n_types = n_types

    def __call__(self, x: Tensor, type_onehot: np.ndarray) -> Tensor:
        type_onehot = np.asarray(type_onehot)
        if type_onehot.shape[-1] != self.n_types:
            raise ValueError(f"expected {self.n_types} agent types, got {type_onehot.shape[-1]}")
        out = None
        for t, head in enumerate(self.heads):
            y = ad.tanh(head(x))
            y = ad.masked_fill(y, (type_onehot[..., t] < 0.5)[..., None], 0.0)
            out = y if out is None else ad.add(out, y)
        return out


@dataclass
class StepInputs:
    """Everything policy_step needs at one simulation step."""

    state_emb: Tensor            # [N_A, hidden] encoded current states (all agents)
    agent_valid: np.ndarray      # [N_A] valid at this step
    visible: np.ndarray          # [N_A] participates as attention key
    type_onehot: np.ndarray      # [N_A, 3]
    map_feat: Tensor             # [N_M, hidden]
    map_valid: np.ndarray        # [N_M]
    light_feat: Tensor | None    # [N_C, hidden]
    light_valid: np.ndarray | None
    z: Tensor | None             # [N_A, personality_dim]
    dest_feat: Tensor | None     # [N_A, hidden]


class BotPolicy(Module):
    """The recurrent multi-agent policy core."""

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        h, nh, ff, dp = cfg.hidden, cfg.n_head, cfg.ff_dim, cfg.dropout
        self.map_layers = ModuleList([
            TransformerLayer(h, nh, ff, dp, rng) for _ in range(cfg.n_layers_map)])
        self.tl_layers = ModuleList([
            TransformerLayer(h, nh, ff, dp, rng) for _ in range(cfg.n_layers_tl)])
        self.interaction_layers = ModuleList([
            TransformerLayer(h, nh, ff, dp, rng) for _ in range(cfg.n_layers_interaction)])
        self.gru = GruCell(h, h, rng)
        if cfg.use_destination:
            self.combine_dest = CombineFeature(h, h, rng)
        if cfg.use_personality:
            self.combine_personality = CombineFeature(h, cfg.personality_dim, rng)
        self.action_head = ActionHead(h, 3, rng)

    def initial_state(self, n_agents: int, dtype=None) -> RecurrentState:
        dtype = dtype or ad.get_default_dtype()
        return RecurrentState(
            hidden=Tensor(np.zeros((n_agents, self.cfg.hidden), dtype=dtype)),
            reached=np.zeros(n_agents, dtype=bool),
        )

    def attend_contexts(self, inp: StepInputs) -> Tensor:
        """Map, traffic-light and interaction attention, in that order."""
        invalid_rows = ~inp.agent_valid[..., None]
        x = inp.state_emb
        for layer in self.map_layers:
            x = layer(x, inp.map_feat, inp.map_valid)
        x = ad.masked_fill(x, invalid_rows, 0.0)
        if inp.light_feat is not None and inp.light_valid is not None and inp.light_valid.any():
            for layer in self.tl_layers:
                x = layer(x, inp.light_feat, inp.light_valid)
            x = ad.masked_fill(x, invalid_rows, 0.0)
        keys = inp.agent_valid & inp.visible
        for layer in self.interaction_layers:
            x = layer(x, None, keys)
        return ad.masked_fill(x, invalid_rows, 0.0)

    def step(self, inp: StepInputs, rec: RecurrentState) -> tuple[Tensor, RecurrentState]:
        """One policy step for all agents: returns (actions [N_A, 2], new
        recurrent state). Rows of invalid agents stay zero throughout."""
        cfg = self.cfg
        invalid_rows = ~inp.agent_valid[..., None]

        x = self.attend_contexts(inp)

        # hold the hidden state through per-step validity gaps
        h_new = self.gru(rec.hidden, x)
        h_new = ad.where_mask(inp.agent_valid[..., None], h_new, rec.hidden)
        y = h_new

        reached = rec.reached
        if cfg.use_destination and inp.dest_feat is not None:
            gate = inp.agent_valid.copy()
            if cfg.use_navigator:
                gate &= ~reached
            y = self.combine_dest(y, inp.dest_feat, gate)
        if cfg.use_personality and inp.z is not None:
            y = self.combine_personality(y, inp.z, inp.agent_valid)
        y = ad.masked_fill(y, invalid_rows, 0.0)

        actions = self.action_head(y, inp.type_onehot)
        actions = ad.masked_fill(actions, invalid_rows, 0.0)
        return actions, RecurrentState(hidden=h_new, reached=reached)


def update_reached(
    reached: np.ndarray,
    positions: np.ndarray,
    dest_index0: np.ndarray,
    map_pos: np.ndarray,
    map_valid: np.ndarray,
    threshold: float,
) -> np.ndarray:
    """Monotone update of destination-reached flags: an agent within
    `threshold` meters of any valid node of its destination polyline has
    arrived."""
    out = reached.copy()
    for j in range(len(reached)):
        d = dest_index0[j]
        if out[j] or d < 0:
            continue
        nodes = map_pos[d][map_valid[d]]
        if nodes.size and np.linalg.norm(nodes - positions[j], axis=-1).min() <= threshold:
            out[j] = True
    return out
