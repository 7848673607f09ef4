"""Small module/layer library over the autodiff tensors.

Modules auto-register parameters and sub-modules through attribute
assignment, torch-style, so checkpoints can address every parameter by a
dotted name.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named, trainable tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data[...] = arr.astype(p.dtype)


class ModuleList:
    def __init__(self, modules=()):
        self._items = list(modules)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def append(self, m):
        self._items.append(m)

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def train(self, mode: bool = True):
        for m in self._items:
            m.train(mode)
        return self


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = _kaiming_uniform(rng, d_in, (d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out) if zero_init else _kaiming_uniform(rng, d_in, (d_out,))) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, ad.expand(self.bias, y.shape[:-1]))
        return y


class Mlp(Module):
    """ReLU MLP; hidden activations between every pair of linear layers."""

    def __init__(self, dims: list[int], rng: np.random.Generator, dropout: float = 0.0,
                 zero_init_last: bool = False):
        super().__init__()
        self.layers = ModuleList([
            Linear(dims[i], dims[i + 1], rng, zero_init=(zero_init_last and i == len(dims) - 2))
            for i in range(len(dims) - 1)
        ])
        self.p_drop = dropout
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = ad.relu(x)
                if self.p_drop > 0:
                    x = ad.dropout(x, self.p_drop, self.training, self.rng)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.layer_norm(x)
        y = ad.mul(y, ad.expand(self.gamma, y.shape[:-1]))
        return ad.add(y, ad.expand(self.beta, y.shape[:-1]))


class MultiheadAttention(Module):
    """Projected multi-head attention; reports fully-masked query rows."""

    def __init__(self, hidden: int, n_head: int, rng: np.random.Generator):
        super().__init__()
        if hidden % n_head != 0:
            raise ValueError(f"hidden {hidden} not divisible by n_head {n_head}")
        self.n_head = n_head
        self.d_head = hidden // n_head
        self.hidden = hidden
        self.q_proj = Linear(hidden, hidden, rng)
        self.k_proj = Linear(hidden, hidden, rng)
        self.v_proj = Linear(hidden, hidden, rng)
        self.out_proj = Linear(hidden, hidden, rng)
        self.last_fallback_rows = 0

    def _split(self, x: Tensor) -> Tensor:
        # [..., n, hidden] -> [..., n_head, n, d_head]
        nd = x.ndim
        x = ad.reshape(x, x.shape[:-1] + (self.n_head, self.d_head))
        perm = tuple(range(nd - 2)) + (nd - 1, nd - 2, nd)
        return ad.transpose(x, perm)

    def _merge(self, x: Tensor) -> Tensor:
        nd = x.ndim
        perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        x = ad.transpose(x, perm)
        return ad.reshape(x, x.shape[:-2] + (self.hidden,))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            if key_mask.ndim == k.ndim - 1:  # [..., n_k] -> broadcast over heads
                key_mask = np.expand_dims(key_mask, -2)
            else:  # [..., n_q, n_k] -> per-query mask, add a head axis
                key_mask = np.expand_dims(key_mask, -3)
        out, fallback = ad.attention(qh, kh, vh, key_mask, return_fallback=True)
        self.last_fallback_rows = int(fallback.sum())
        return self.out_proj(self._merge(out))


class TransformerLayer(Module):
    """Pre-layer-norm residual block: cross-attention then feed-forward.

    Self-attention is the special case context=x. Residual adds keep rows
    whose attention has no valid keys unchanged.
    """

    def __init__(self, hidden: int, n_head: int, ff_dim: int, dropout: float,
                 rng: np.random.Generator):
        super().__init__()
        self.attn = MultiheadAttention(hidden, n_head, rng)
        self.norm_attn = LayerNorm(hidden)
        self.norm_ctx = LayerNorm(hidden)
        self.norm_ff = LayerNorm(hidden)
        self.ff_in = Linear(hidden, ff_dim, rng)
        self.ff_out = Linear(ff_dim, hidden, rng)
        self.p_drop = dropout
        self.rng = rng

    def __call__(self, x: Tensor, context: Tensor | None = None, key_mask=None) -> Tensor:
        is_self = context is None
        ctx = x if is_self else context
        xq = self.norm_attn(x)
        cn = xq if is_self else self.norm_ctx(ctx)
        a = self.attn(xq, cn, cn, key_mask)
        a = ad.dropout(a, self.p_drop, self.training, self.rng)
        x = ad.add(x, a)
        f = self.ff_out(ad.relu(self.ff_in(self.norm_ff(x))))
        f = ad.dropout(f, self.p_drop, self.training, self.rng)
        return ad.add(x, f)


class GruCell(Module):
    """Standard gated recurrent unit: h' = (1-z)*n + z*h."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.w_ih = Parameter(_kaiming_uniform(rng, d_in, (d_in, 3 * d_hidden)))
        self.w_hh = Parameter(_kaiming_uniform(rng, d_hidden, (d_hidden, 3 * d_hidden)))
        self.b_ih = Parameter(np.zeros(3 * d_hidden))
        self.b_hh = Parameter(np.zeros(3 * d_hidden))
        self.d_hidden = d_hidden

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        d = self.d_hidden
        gi = ad.add(ad.matmul(x, self.w_ih), ad.expand(self.b_ih, x.shape[:-1]))
        gh = ad.add(ad.matmul(h, self.w_hh), ad.expand(self.b_hh, h.shape[:-1]))
        r = ad.sigmoid(ad.add(gi[..., 0:d], gh[..., 0:d]))
        z = ad.sigmoid(ad.add(gi[..., d:2 * d], gh[..., d:2 * d]))
        n = ad.tanh(ad.add(gi[..., 2 * d:], ad.mul(r, gh[..., 2 * d:])))
        one = Tensor(np.ones((), dtype=n.dtype))
        return ad.add(ad.mul(ad.sub(one, z), n), ad.mul(z, h))


class Adam:
    """Adam with bias correction over a fixed list of named parameters."""

    def __init__(self, named_params, lr: float = 4e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.items = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.items]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for _, p in self.items]

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None

    def clip_global_norm(self, max_norm: float) -> float:
        sq = 0.0
        for _, p in self.items:
            if p.grad is not None:
                sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
        norm = float(np.sqrt(sq))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for _, p in self.items:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.items, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.dtype)
