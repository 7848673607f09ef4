"""Scene encoders: sinusoidal encodings for scalars and angles, the three
state-encoder variants, the polyline map encoder and the traffic-light
encoder.

All entities stay in the shared global frame; the encodings are what lets
dot-product attention recover local geometry. Scalar coordinates use a
sinusoidal positional encoding (PE); headings use an integer-frequency
angular encoding (AE) that is exactly 2*pi-periodic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episode import Episode, N_MAP_TYPES, N_TL_STATES, yaw_from_dir
from .nn import Linear, Mlp, Module, ModuleList, TransformerLayer

VARIANTS = ("eq1", "eq2", "eq3")


@dataclass
class EncoderConfig:
    d_emb: int = 32          # per-block embedding width (must be even)
    omega: float = 1000.0    # base frequency for the scalar encoding
    variant: str = "eq3"
    conventional_exponent: bool = False  # flip the PE exponent sign
    hidden: int = 128

    def __post_init__(self):
        if self.d_emb % 2 != 0:
            raise ValueError("d_emb must be even")
        if self.omega <= 1:
            raise ValueError("omega must be > 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}")


def pe_frequencies(d_emb: int, omega: float, conventional: bool = False) -> np.ndarray:
    i = np.arange(d_emb // 2, dtype=np.float64)
    expo = 2.0 * i / d_emb
    if conventional:
        expo = -expo
    return np.power(omega, expo)


def _interleave_sin_cos(arg: Tensor) -> Tensor:
    """[..., d/2] phase -> [..., d] as (sin, cos) pairs."""
    s = ad.sin(arg)
    c = ad.cos(arg)
    half = arg.shape[-1]
    s = ad.reshape(s, arg.shape[:-1] + (half, 1))
    c = ad.reshape(c, arg.shape[:-1] + (half, 1))
    pair = ad.concat([s, c], axis=-1)
    return ad.reshape(pair, arg.shape[:-1] + (2 * half,))


def pe(x, d_emb: int, omega: float, conventional: bool = False) -> Tensor:
    """Sinusoidal encoding of a scalar: even slots sin(x*w_i), odd cos(x*w_i),
    with w_i = omega**(2i/d_emb). x has shape [...]; output [..., d_emb]."""
    x = ad.as_tensor(x)
    freqs = Tensor(pe_frequencies(d_emb, omega, conventional))
    arg = ad.mul(ad.expand(freqs, x.shape), ad.reshape(x, x.shape + (1,)))
    return _interleave_sin_cos(arg)


def ae(theta, d_emb: int) -> Tensor:
    """Angular encoding: integer frequencies i = 1..d_emb/2, slots
    (sin(theta*i), cos(theta*i)). Exactly periodic in 2*pi."""
    theta = ad.as_tensor(theta)
    freqs = Tensor(np.arange(1, d_emb // 2 + 1, dtype=np.float64))
    arg = ad.mul(ad.expand(freqs, theta.shape), ad.reshape(theta, theta.shape + (1,)))
    return _interleave_sin_cos(arg)


class StateEncoder(Module):
    """Encodes (x, y, yaw, attributes) to the shared hidden width.

    Variants:
      eq1: MLP over cat(PE(x), PE(y), cos yaw, sin yaw, u)
      eq2: cat(PE(x), PE(y), PE(cos yaw), PE(sin yaw)) + MLP(u), projected
      eq3: cat(PE(x), PE(y), AE(yaw), MLP(u)), projected
    """

    def __init__(self, cfg: EncoderConfig, u_dim: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.u_dim = u_dim
        d, h = cfg.d_emb, cfg.hidden
        if cfg.variant == "eq1":
            self.mlp = Mlp([2 * d + 2 + u_dim, h, h], rng)
        elif cfg.variant == "eq2":
            self.u_mlp = Mlp([u_dim, h, 4 * d], rng)
            self.proj = Linear(4 * d, h, rng)
        else:
            self.u_mlp = Mlp([u_dim, h, d], rng)
            self.proj = Linear(4 * d, h, rng)

    def _pe(self, v) -> Tensor:
        return pe(v, self.cfg.d_emb, self.cfg.omega, self.cfg.conventional_exponent)

    def features(self, x, y, yaw, u) -> Tensor:
        """Pre-projection feature blocks (eq2/eq3); eq1 has no such split."""
        cfg = self.cfg
        if cfg.variant == "eq1":
            yaw = ad.as_tensor(yaw)
            cs = ad.reshape(ad.cos(yaw), yaw.shape + (1,))
            sn = ad.reshape(ad.sin(yaw), yaw.shape + (1,))
            return ad.concat([self._pe(x), self._pe(y), cs, sn, ad.as_tensor(u)], axis=-1)
        if cfg.variant == "eq2":
            pose = ad.concat([self._pe(x), self._pe(y),
                              self._pe(ad.cos(ad.as_tensor(yaw))),
                              self._pe(ad.sin(ad.as_tensor(yaw)))], axis=-1)
            return ad.add(pose, self.u_mlp(ad.as_tensor(u)))
        return ad.concat([self._pe(x), self._pe(y), ae(yaw, cfg.d_emb),
                          self.u_mlp(ad.as_tensor(u))], axis=-1)

    def __call__(self, x, y, yaw, u, valid=None) -> Tensor:
        feats = self.features(x, y, yaw, u)
        out = self.mlp(feats) if self.cfg.variant == "eq1" else self.proj(feats)
        if valid is not None:
            invalid = ~np.asarray(valid, dtype=bool)[..., None]
            out = ad.masked_fill(out, invalid, 0.0)
        return out


class MapEncoder(Module):
    """Per-node state encoding, self-attention inside each polyline, masked
    max-pool to one feature per polyline."""

    def __init__(self, cfg: EncoderConfig, n_head: int, ff_dim: int, dropout: float,
                 n_layers: int, rng: np.random.Generator):
        super().__init__()
        self.node_encoder = StateEncoder(cfg, N_MAP_TYPES, rng)
        self.layers = ModuleList([
            TransformerLayer(cfg.hidden, n_head, ff_dim, dropout, rng)
            for _ in range(n_layers)
        ])

    def __call__(self, episode: Episode) -> tuple[Tensor, np.ndarray]:
        """Returns ([N_M, hidden] polyline features, [N_M] validity mask)."""
        m_valid = episode.map_valid                     # [N_M, N_node]
        yaw = yaw_from_dir(episode.map_dir)
        x = self.node_encoder(
            episode.map_pos[..., 0], episode.map_pos[..., 1], yaw,
            episode.map_type[:, None, :].repeat(episode.map_valid.shape[1], axis=1),
            valid=m_valid,
        )                                               # [N_M, N_node, hidden]
        for layer in self.layers:
            x = layer(x, key_mask=m_valid)
        # masked max-pool over nodes
        x = ad.masked_fill(x, ~m_valid[..., None], -1e9)
        pooled = ad.max_(x, axis=1)
        poly_valid = m_valid.any(axis=1)
        pooled = ad.masked_fill(pooled, ~poly_valid[:, None], 0.0)
        return pooled, poly_valid


class TrafficLightEncoder(Module):
    """State encoder over stop-point pose and light state, one row per light."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = StateEncoder(cfg, N_TL_STATES, rng)

    def __call__(self, tl_pos, tl_dir, tl_state, tl_valid) -> Tensor:
        """Accepts one step ([N_C, ...]) or a whole window ([T, N_C, ...])."""
        yaw = yaw_from_dir(np.asarray(tl_dir))
        return self.encoder(tl_pos[..., 0], tl_pos[..., 1], yaw, tl_state, valid=tl_valid)


AGENT_U_DIM = 3 + 3 + 3  # type one-hot, kinematic scalars (v, a, yaw rate), size


class AgentEncoder(Module):
    """State encoder for agents: pose plus attributes/kinematics."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.encoder = StateEncoder(cfg, AGENT_U_DIM, rng)

    def __call__(self, x, y, yaw, spd, acc, yaw_rate, type_onehot, size, valid=None) -> Tensor:
        def col(v):
            v = ad.as_tensor(v)
            return ad.reshape(v, v.shape + (1,))

        u = ad.concat([ad.as_tensor(type_onehot), col(spd), col(acc), col(yaw_rate),
                       ad.as_tensor(size)], axis=-1)
        return self.encoder(x, y, yaw, u, valid=valid)


def encode_episode_agents(encoder: AgentEncoder, episode: Episode) -> Tensor:
    """Encode every (step, agent) ground-truth state: [T, N_A, hidden]."""
    return encoder(
        episode.agent_pos[..., 0], episode.agent_pos[..., 1],
        episode.agent_yaw[..., 0],
        episode.agent_spd[..., 0], episode.agent_acc[..., 0],
        episode.agent_yaw_rate[..., 0],
        np.broadcast_to(episode.agent_type, episode.agent_valid.shape + (3,)).copy(),
        np.broadcast_to(episode.agent_size, episode.agent_valid.shape + (3,)).copy(),
        valid=episode.agent_valid,
    )


@dataclass
class EncodedContext:
    """Per-episode encodings shared by the policy and the generative heads."""

    map_feat: Tensor          # [N_M, hidden]
    map_valid: np.ndarray     # [N_M]
    light_feat: Tensor        # [T, N_C, hidden]
    light_valid: np.ndarray   # [T, N_C]

    def lights_at(self, step: int) -> tuple[Tensor, np.ndarray]:
        return self.light_feat[step], self.light_valid[step]
