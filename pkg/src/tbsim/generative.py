"""Latent personality (CVAE posterior/prior encoders, KL with free nats,
reparameterized sampling) and destination classification.

The personality is one diagonal-Gaussian latent per agent, held fixed for an
entire rollout. Means come from window encoders; the log standard deviation
is a learnable input-independent parameter shared per agent type.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import GruCell, Linear, Mlp, Module, ModuleList, Parameter, TransformerLayer
from .policy import PolicyConfig


@dataclass
class PersonalityDist:
    """Diagonal Gaussian per agent: mean [N_A, d], std [N_A, d]."""

    mean: Tensor
    std: Tensor
    valid: np.ndarray  # [N_A] agents with a defined distribution

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        """Numpy log-density of given latents, summed over dimensions."""
        mu, sd = self.mean.numpy(), self.std.numpy()
        q = -0.5 * ((z - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)
        return q.sum(axis=-1)


@dataclass
class DestinationDist:
    """Per-agent categorical over map polylines."""

    logits: Tensor            # [N_A, N_M], invalid polylines at -inf scale
    polyline_valid: np.ndarray

    def probs(self) -> np.ndarray:
        x = self.logits.numpy()
        x = x - x.max(axis=-1, keepdims=True)
        e = np.exp(x)
        e[:, ~self.polyline_valid] = 0.0
        return e / np.maximum(e.sum(axis=-1, keepdims=True), 1e-30)

    def log_prob(self, index0: np.ndarray) -> np.ndarray:
        p = self.probs()
        return np.log(np.maximum(p[np.arange(len(index0)), index0], 1e-30))

    def argmax(self) -> np.ndarray:
        return np.argmax(self.probs(), axis=-1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs()
        cdf = np.cumsum(p, axis=-1)
        u = rng.random((p.shape[0], 1))
        return np.minimum((u > cdf[:, :-1]).sum(axis=-1), p.shape[1] - 1)


class PersonalityEncoder(Module):
    """Window encoder with the policy-style blocks.

    Map attention treats every (step, agent) pair as an independent query;
    traffic-light and interaction attention are restricted to keys from the
    same step; a GRU then aggregates each agent over time.
    """

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        super().__init__()
        h, nh, ff, dp = cfg.hidden, cfg.n_head, cfg.ff_dim, cfg.dropout
        self.map_layer = TransformerLayer(h, nh, ff, dp, rng)
        self.tl_layer = TransformerLayer(h, nh, ff, dp, rng)
        self.interaction_layer = TransformerLayer(h, nh, ff, dp, rng)
        self.gru = GruCell(h, h, rng)
        self.head = Linear(h, cfg.personality_dim, rng)

    def __call__(
        self,
        state_emb: Tensor,        # [T, N_A, hidden]
        valid: np.ndarray,        # [T, N_A]
        map_feat: Tensor,         # [N_M, hidden]
        map_valid: np.ndarray,    # [N_M]
        light_feat: Tensor,       # [T, N_C, hidden]
        light_valid: np.ndarray,  # [T, N_C]
    ) -> Tensor:
        t, n_a, h = state_emb.shape
        invalid_rows = ~valid[..., None]

        # every (step, agent) queries the map independently
        x = ad.reshape(state_emb, (t * n_a, h))
        x = self.map_layer(x, map_feat, map_valid)
        x = ad.reshape(x, (t, n_a, h))
        x = ad.masked_fill(x, invalid_rows, 0.0)

        # lights and interaction: keys restricted to the same step
        if light_valid.size and light_valid.any():
            x = self.tl_layer(x, light_feat, light_valid)
            x = ad.masked_fill(x, invalid_rows, 0.0)
        x = self.interaction_layer(x, None, valid)
        x = ad.masked_fill(x, invalid_rows, 0.0)

        # temporal aggregation per agent
        hidden = Tensor(np.zeros((n_a, h), dtype=x.dtype))
        for step in range(t):
            upd = self.gru(hidden, x[step])
            hidden = ad.where_mask(valid[step][..., None], upd, hidden)
        ever = valid.any(axis=0)
        mean = self.head(hidden)
        return ad.masked_fill(mean, ~ever[..., None], 0.0)


def personality_std(log_std: Parameter, type_onehot: np.ndarray) -> Tensor:
    """Per-agent std from the shared per-type log-std table."""
    type_idx = np.argmax(np.asarray(type_onehot), axis=-1)
    return ad.exp(ad.index_select(log_std, type_idx))


def kl_diag_gaussian(post: PersonalityDist, prior: PersonalityDist) -> Tensor:
    """Closed-form KL(post || prior) per agent and dimension: [N_A, d]."""
    lq = ad.log(post.std)
    lp = ad.log(prior.std)
    var_ratio = ad.square(ad.div(post.std, prior.std))
    mean_term = ad.square(ad.div(ad.sub(post.mean, prior.mean), prior.std))
    half = Tensor(np.asarray(0.5, dtype=post.mean.dtype))
    return ad.add(ad.sub(lp, lq),
                  ad.sub(ad.mul(half, ad.add(var_ratio, mean_term)), half))


def kl_free_nats(
    post: PersonalityDist,
    prior: PersonalityDist,
    free_nats: float = 0.01,
    valid: np.ndarray | None = None,
    per_dimension: bool = False,
    enabled: bool = True,
) -> tuple[Tensor, np.ndarray]:
    """KL loss clipped by free nats.

    Per agent, loss = max(KL_total - free_nats, 0); below the threshold both
    the loss and its gradient are exactly zero. `per_dimension` clips each
    latent dimension at `free_nats` instead. Returns (scalar loss, raw
    per-agent KL as numpy).
    """
    if np.any(post.std.numpy() <= 0) or np.any(prior.std.numpy() <= 0):
        raise ValueError("kl_free_nats: non-positive std")
    kl = kl_diag_gaussian(post, prior)  # [N_A, d]
    if valid is None:
        valid = np.ones(kl.shape[0], dtype=bool)
    kl = ad.masked_fill(kl, ~valid[..., None], 0.0)
    kl_per_agent = ad.sum_(kl, axis=-1)
    if enabled:
        if per_dimension:
            clipped = ad.sum_(ad.relu(ad.sub(kl, float(free_nats))), axis=-1)
        else:
            clipped = ad.relu(ad.sub(kl_per_agent, float(free_nats)))
    else:
        clipped = kl_per_agent
    clipped = ad.masked_fill(clipped, ~valid, 0.0)
    n = max(int(valid.sum()), 1)
    loss = ad.div(ad.sum_(clipped), float(n))
    return loss, kl_per_agent.numpy().copy()


def sample_personality(
    dist: PersonalityDist,
    mode: str = "most-likely",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Draw the rollout-constant latent: the mean, or a reparameterized
    sample mean + std * eps."""
    if mode == "most-likely":
        return dist.mean
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        eps = Tensor(rng.standard_normal(dist.mean.shape))
        return ad.add(dist.mean, ad.mul(dist.std, eps))
    raise ValueError(f"unknown personality sampling mode {mode!r}")


class DestinationPredictor(Module):
    """Per-agent categorical over polylines from the map and own history."""

    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        super().__init__()
        h = cfg.hidden
        self.gru = GruCell(h, h, rng)
        self.mlp = Mlp([2 * h, h, 1], rng)

    def __call__(
        self,
        history_emb: Tensor,      # [T_hist, N_A, hidden] encoded GT history
        history_valid: np.ndarray,
        map_feat: Tensor,         # [N_M, hidden]
        map_valid: np.ndarray,
    ) -> DestinationDist:
        t, n_a, h = history_emb.shape
        n_m = map_feat.shape[0]
        hidden = Tensor(np.zeros((n_a, h), dtype=history_emb.dtype))
        for step in range(t):
            upd = self.gru(hidden, history_emb[step])
            hidden = ad.where_mask(history_valid[step][..., None], upd, hidden)
        # pair every agent with every polyline
        m = ad.expand(map_feat, (n_a,))                          # [N_A, N_M, h]
        a = ad.transpose(ad.expand(hidden, (n_m,)), (1, 0, 2))   # [N_A, N_M, h]
        logits = self.mlp(ad.concat([m, a], axis=-1))
        logits = ad.reshape(logits, (n_a, n_m))
        logits = ad.masked_fill(logits, ~map_valid[None, :], -1e9)
        return DestinationDist(logits=logits, polyline_valid=map_valid)


def destination_cross_entropy(dist: DestinationDist, target_index0: np.ndarray,
                              valid: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the target polylines over valid agents."""
    target = np.where(valid, target_index0, 0).astype(int)
    lse = ad.logsumexp(dist.logits, axis=-1)             # [N_A]
    picked = ad.take_along_last(dist.logits, target)     # [N_A]
    nll = ad.sub(lse, picked)
    nll = ad.masked_fill(nll, ~valid, 0.0)
    n = max(int(valid.sum()), 1)
    return ad.div(ad.sum_(nll), float(n))
