"""The full learned model: shared scene encoders, the bot policy, the
posterior/prior personality encoders and the destination classifier, plus
checkpointing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .dynamics import DynamicsConfig
from .encoders import (
    AgentEncoder, EncodedContext, MapEncoder, TrafficLightEncoder,
    encode_episode_agents,
)
from .episode import Episode
from .generative import (
    DestinationDist, DestinationPredictor, PersonalityDist, PersonalityEncoder,
    personality_std,
)
from .nn import Module, Parameter
from .policy import BotPolicy, PolicyConfig


@dataclass
class ModelConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    log_std_init: float = -2.0
    seed: int = 0


class WorldModel(Module):
    """Everything with parameters, addressable by dotted names."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        pc = cfg.policy
        rng = np.random.default_rng(cfg.seed)
        self.map_encoder = MapEncoder(pc.encoder, pc.n_head, pc.ff_dim, pc.dropout,
                                      pc.n_layers_polyline, rng)
        self.light_encoder = TrafficLightEncoder(pc.encoder, rng)
        self.agent_encoder = AgentEncoder(pc.encoder, rng)
        self.policy = BotPolicy(pc, rng)
        if pc.use_personality:
            self.posterior_encoder = PersonalityEncoder(pc, rng)
            self.prior_encoder = PersonalityEncoder(pc, rng)
            self.log_std = Parameter(
                np.full((3, pc.personality_dim), cfg.log_std_init))
        if pc.use_destination:
            self.dest_predictor = DestinationPredictor(pc, rng)

    # -- context ----------------------------------------------------------

    def encode_context(self, episode: Episode) -> EncodedContext:
        """Encode the shared map once and the lights for every step."""
        map_feat, map_valid = self.map_encoder(episode)
        light_feat = self.light_encoder(
            episode.tl_pos, episode.tl_dir, episode.tl_state, episode.tl_valid)
        return EncodedContext(map_feat=map_feat, map_valid=map_valid,
                              light_feat=light_feat, light_valid=episode.tl_valid)

    def encode_gt_agents(self, episode: Episode) -> Tensor:
        return encode_episode_agents(self.agent_encoder, episode)

    # -- generative heads --------------------------------------------------

    def personality(
        self,
        episode: Episode,
        ctx: EncodedContext,
        state_emb: Tensor,
        which: str,
    ) -> PersonalityDist:
        """Posterior uses the whole episode; prior only the history window."""
        if not self.cfg.policy.use_personality:
            raise RuntimeError("personality disabled in this configuration")
        t_hist = episode.t_history
        if which == "posterior":
            enc, sl = self.posterior_encoder, slice(None)
        elif which == "prior":
            enc, sl = self.prior_encoder, slice(0, t_hist + 1)
        else:
            raise ValueError(f"unknown personality window {which!r}")
        mean = enc(state_emb[sl], episode.agent_valid[sl], ctx.map_feat,
                   ctx.map_valid, ctx.light_feat[sl], ctx.light_valid[sl])
        std = personality_std(self.log_std, episode.agent_type)
        return PersonalityDist(mean=mean, std=std,
                               valid=episode.agent_valid[sl].any(axis=0))

    def destination_dist(self, episode: Episode, ctx: EncodedContext,
                         state_emb: Tensor) -> DestinationDist:
        if not self.cfg.policy.use_destination:
            raise RuntimeError("destination disabled in this configuration")
        t_hist = episode.t_history
        return self.dest_predictor(
            state_emb[0:t_hist + 1], episode.agent_valid[0:t_hist + 1],
            ctx.map_feat, ctx.map_valid)

    def dest_features(self, ctx: EncodedContext, dest_index0: np.ndarray) -> Tensor:
        """Destination feature rows from the encoded map; index -1 maps to a
        zero row."""
        idx = np.asarray(dest_index0, dtype=int)
        safe = np.where(idx >= 0, idx, 0)
        feat = ad.index_select(ctx.map_feat, safe)
        return ad.masked_fill(feat, (idx < 0)[:, None], 0.0)

    # -- checkpointing ------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": _config_meta(self.cfg)}
        if extra_meta:
            meta.update(extra_meta)
        container.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "WorldModel":
        state, meta = container.load_checkpoint(path)
        cfg = config_from_meta(meta["config"])
        model = cls(cfg)
        model.load_state_dict(state)
        return model


def _config_meta(cfg: ModelConfig) -> dict:
    pc, dyn = cfg.policy, cfg.dynamics
    return {
        "policy": {
            "hidden": pc.hidden, "n_head": pc.n_head, "ff_scale": pc.ff_scale,
            "dropout": pc.dropout, "n_layers_map": pc.n_layers_map,
            "n_layers_tl": pc.n_layers_tl,
            "n_layers_interaction": pc.n_layers_interaction,
            "n_layers_polyline": pc.n_layers_polyline,
            "personality_dim": pc.personality_dim,
            "use_personality": pc.use_personality,
            "dest_mode": pc.dest_mode, "use_navigator": pc.use_navigator,
            "reached_threshold": pc.reached_threshold,
            "encoder": {
                "d_emb": pc.encoder.d_emb, "omega": pc.encoder.omega,
                "variant": pc.encoder.variant,
                "conventional_exponent": pc.encoder.conventional_exponent,
                "hidden": pc.encoder.hidden,
            },
        },
        "dynamics": {
            "accel_max": list(dyn.accel_max),
            "yaw_rate_max": list(dyn.yaw_rate_max),
            "allow_reverse": list(dyn.allow_reverse),
            "clamp_nonnegative_speed": dyn.clamp_nonnegative_speed,
            "dt": dyn.dt,
        },
        "log_std_init": cfg.log_std_init,
        "seed": cfg.seed,
    }


def config_from_meta(meta: dict) -> ModelConfig:
    from .encoders import EncoderConfig

    p = meta["policy"]
    enc = EncoderConfig(**p["encoder"])
    pc = PolicyConfig(**{k: v for k, v in p.items() if k != "encoder"}, encoder=enc)
    d = meta["dynamics"]
    dyn = DynamicsConfig(
        accel_max=tuple(d["accel_max"]), yaw_rate_max=tuple(d["yaw_rate_max"]),
        allow_reverse=tuple(bool(b) for b in d["allow_reverse"]),
        clamp_nonnegative_speed=bool(d["clamp_nonnegative_speed"]), dt=float(d["dt"]))
    return ModelConfig(policy=pc, dynamics=dyn,
                       log_std_init=float(meta["log_std_init"]),
                       seed=int(meta["seed"]))
