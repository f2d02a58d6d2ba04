"""Layer attention over the blocks of one network stage.

Each block output ``x^l`` (B, C, H, W) becomes a token. Queries and keys are
linear maps of the pooled descriptor ``y^l = GAP(x^l)`` giving ``heads`` rows
of width ``key_dim``; values are a 1x1 channel map of the full feature map,
split channel-wise into head groups.

Variants:

* ``mrla-b``: softmax over every token seen so far in the stage.
* ``mrla-l``: recurrent form ``o^l = lam^l * o^{l-1} + softmax(q^l k^l) v^l``.
* ``dla-b`` / ``dla-l``: before attending, a shared recurrent cell runs over
  ``y^1..y^l`` from a fixed random ``c^0`` to obtain a context ``c^l`` and
  every earlier cached map is rescaled in place by
  ``d^m = Dyn(y^m, c^l)``. Attention then reads the refreshed cache.

The block output is ``x^l + o^l``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import cells
from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

VARIANTS = ("mrla-b", "mrla-l", "dla-b", "dla-l")


@dataclass
class AttentionConfig:
    variant: str
    channels: int
    heads: int = 1
    key_dim: int = None
    cell: str = "dsu"
    reduction: int = 4
    sigma: str = "sigmoid"
    c0_std: float = 0.1
    value_init: str = "zero"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}", "variant")
        if self.value_init not in ("zero", "normal"):
            raise ConfigError(f"expected zero or normal, got {self.value_init!r}", "value_init")
        if self.heads < 1 or self.channels % self.heads:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}", "heads"
            )
        if self.key_dim is None:
            self.key_dim = self.channels // self.heads
        if self.key_dim < 1:
            raise ConfigError("key_dim must be positive", "key_dim")

    @property
    def dynamic(self):
        return self.variant.startswith("dla")

    @property
    def lightweight(self):
        return self.variant.endswith("-l")


@dataclass
class ProjectionSet:
    """Layer-specific query/key/value maps, indexed from layer 1."""

    query: list
    key: list
    value: list

    def layer(self, l):
        if not 1 <= l <= len(self.query):
            raise ConfigError(f"no projection for layer {l} (depth {len(self.query)})", "depth")
        return self.query[l - 1], self.key[l - 1], self.value[l - 1]


@dataclass
class TokenCache:
    xs: list = field(default_factory=list)
    ys: list = field(default_factory=list)
    qs: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    vs: list = field(default_factory=list)

    def __len__(self):
        return len(self.xs)

    def clear(self):
        for store in (self.xs, self.ys, self.qs, self.ks, self.vs):
            store.clear()


@dataclass
class AttentionRecord:
    stage: int
    query_layer: int
    weights: np.ndarray


@dataclass
class DynContext:
    c0: np.ndarray
    cell: cells.CellParams


@dataclass
class LightweightState:
    lambdas: list
    running: Tensor = None


def init_projections(cfg, depth, rng):
    """Uniform +-sqrt(1/C) query/key maps; value maps are zero unless
    ``cfg.value_init == "normal"`` (fan-in scaled), so a fresh network starts
    out as its plain backbone."""
    C, qk = cfg.channels, cfg.heads * cfg.key_dim
    bound = math.sqrt(1.0 / C)
    std = math.sqrt(2.0 / C)
    query, key, value = [], [], []
    for l in range(1, depth + 1):
        query.append(Tensor(rng.uniform(-bound, bound, (qk, C)), True, f"q{l}"))
        key.append(Tensor(rng.uniform(-bound, bound, (qk, C)), True, f"k{l}"))
        v = rng.normal(0.0, std, (C, C, 1, 1))
        if cfg.value_init == "zero":
            v[...] = 0.0
        value.append(Tensor(v, True, f"v{l}"))
    return ProjectionSet(query, key, value)


def compute_tokens(x, l, proj, cfg):
    """Pooled descriptor, query, key and value of one feature map.

    q and k have shape (B, heads, key_dim); v has (B, heads, C/heads, H, W).
    """
    wq, wk, wv = proj.layer(l)
    B, C, H, W = x.shape
    y = T.global_average_pool(x)
    q = T.matmul(y, T.transpose(wq)).reshape(B, cfg.heads, cfg.key_dim)
    k = T.matmul(y, T.transpose(wk)).reshape(B, cfg.heads, cfg.key_dim)
    v = T.conv2d(x, wv, padding=0).reshape(B, cfg.heads, C // cfg.heads, H, W)
    return y, q, k, v


def _merge_heads(o):
    B, H, Ch, h, w = o.shape
    return o.reshape(B, H * Ch, h, w)


def attention_scores(q, keys, key_dim):
    """Softmax weights (B, heads, n) of one query against stacked keys."""
    K = T.stack(keys, axis=2)
    scores = T.matmul(K, q.reshape(q.shape + (1,))).reshape(K.shape[:3])
    return T.softmax(scores * (1.0 / math.sqrt(key_dim)), axis=-1)


def attention_base(cache, l, cfg, form="matrix"):
    """Softmax attention of query ``l`` over tokens 1..l.

    Returns ``(o, weights)`` where ``weights`` is the (B, heads, l) array.
    ``form="sum"`` evaluates the per-layer sum instead of one matmul.
    """
    if l < 1 or len(cache) < l:
        raise ContractError(f"attention at layer {l} needs {l} cached tokens, have {len(cache)}")
    w = attention_scores(cache.qs[l - 1], cache.ks[:l], cfg.key_dim)
    v0 = cache.vs[0]
    B, H, Ch, h, wd = v0.shape
    if form == "matrix":
        V = T.stack(cache.vs[:l], axis=2).reshape(B, H, l, Ch * h * wd)
        o = T.matmul(w.reshape(B, H, 1, l), V).reshape(B, H, Ch, h, wd)
    else:
        o = None
        for i in range(l):
            term = w[:, :, i].reshape(B, H, 1, 1, 1) * cache.vs[i]
            o = term if o is None else o + term
    return _merge_heads(o), w.data


def _light_term(cache, m, cfg):
    # the lightweight softmax ranges over the current layer's key only
    w = attention_scores(cache.qs[m - 1], [cache.ks[m - 1]], cfg.key_dim)
    B, H = w.shape[:2]
    return _merge_heads(w.reshape(B, H, 1, 1, 1) * cache.vs[m - 1])


def attention_light(state, cache, l, cfg):
    """``o^l = lam^l * o^{l-1} + current-layer term``; ``o^0 = 0``."""
    if l < 1 or len(cache) < l:
        raise ContractError(f"attention at layer {l} needs {l} cached tokens, have {len(cache)}")
    term = _light_term(cache, l, cfg)
    if state.running is None:
        return term
    lam = state.lambdas[l - 1].reshape(1, -1, 1, 1)
    return lam * state.running + term


def light_recurrence(state, cache, l, cfg):
    """Rebuild ``o^1..o^l`` from the (possibly refreshed) cache."""
    state.running = None
    for m in range(1, l + 1):
        state.running = attention_light(state, cache, m, cfg)
    return state.running


def dla_forward_context(cache, l, ctx):
    """Run the shared cell over ``y^1..y^l`` from ``c^0``; return the cell state."""
    B = cache.ys[0].shape[0]
    c0 = Tensor(np.broadcast_to(ctx.c0, (B, ctx.c0.shape[0])))
    state = cells.initial_state(ctx.cell, c0)
    for m in range(l):
        state = cells.step(ctx.cell, cache.ys[m], state)
    return state


def refresh_gate(cache, m, context_state, ctx):
    """``d^m = Dyn(y^m, c^l)`` for one layer, shape (B, C)."""
    return cells.output(ctx.cell, cells.step(ctx.cell, cache.ys[m - 1], context_state))


def dla_backward_refresh(cache, l, context_state, ctx, proj, cfg, order=None, hook=None):
    """Rescale cached maps ``x^m`` (m < l) by their gates and recompute their tokens.

    Every gate reads the descriptors as they were before this call, so the
    visiting ``order`` has no effect on the result. ``hook(m, d)`` may replace
    a gate (used to switch the refresh off in tests).
    """
    layers = range(1, l) if order is None else order
    if sorted(layers) != list(range(1, l)):
        raise ContractError(f"refresh order must permute 1..{l - 1}")
    gates = {}
    for m in layers:
        d = refresh_gate(cache, m, context_state, ctx)
        gates[m] = d if hook is None else hook(m, d)
    for m in layers:
        d = gates[m]
        x = cache.xs[m - 1] * d.reshape(d.shape + (1, 1))
        cache.xs[m - 1] = x
        cache.ys[m - 1], cache.qs[m - 1], cache.ks[m - 1], cache.vs[m - 1] = compute_tokens(
            x, m, proj, cfg
        )
    return cache


class LayerAttention:
    """Per-stage layer attention with its own parameters and token cache."""

    def __init__(self, cfg, depth, rng, stage=0):
        self.cfg = cfg
        self.depth = depth
        self.stage = stage
        self.proj = init_projections(cfg, depth, rng)
        self.light = None
        if cfg.lightweight:
            lambdas = [Tensor(np.ones(cfg.channels), True, f"lambda{l}") for l in range(1, depth + 1)]
            self.light = LightweightState(lambdas)
        self.ctx = None
        if cfg.dynamic:
            cell = cells.init_cell(cfg.cell, cfg.channels, cfg.reduction, cfg.sigma, rng)
            c0 = rng.normal(0.0, cfg.c0_std, cfg.channels)
            self.ctx = DynContext(c0, cell)
        self.cache = TokenCache()
        self.records = []
        self.record = False
        self.refresh_hook = None

    def named_parameters(self):
        out = []
        for name, store in (("q", self.proj.query), ("k", self.proj.key), ("v", self.proj.value)):
            out += [(f"{name}{l}", t) for l, t in enumerate(store, 1)]
        if self.light is not None:
            out += [(f"lambda{l}", t) for l, t in enumerate(self.light.lambdas, 1)]
        if self.ctx is not None:
            out += [(f"cell.{n}", t) for n, t in self.ctx.cell.arrays()]
        return out

    def named_buffers(self):
        return [] if self.ctx is None else [("c0", self.ctx.c0)]

    def reset(self):
        self.cache.clear()
        if self.light is not None:
            self.light.running = None

    def __call__(self, x, order=None):
        """Append ``x`` as the next token and return ``x + o``."""
        cfg, cache = self.cfg, self.cache
        l = len(cache) + 1
        if l > self.depth:
            raise ContractError(f"stage {self.stage} already holds {self.depth} tokens")
        y, q, k, v = compute_tokens(x, l, self.proj, cfg)
        cache.xs.append(x)
        cache.ys.append(y)
        cache.qs.append(q)
        cache.ks.append(k)
        cache.vs.append(v)

        if cfg.dynamic:
            context = dla_forward_context(cache, l, self.ctx)
            dla_backward_refresh(
                cache, l, context, self.ctx, self.proj, cfg, order=order, hook=self.refresh_hook
            )

        if cfg.lightweight:
            if cfg.dynamic:
                o = light_recurrence(self.light, cache, l, cfg)
            else:
                o = attention_light(self.light, cache, l, cfg)
                self.light.running = o
            weights = None
        else:
            o, weights = attention_base(cache, l, cfg)

        if self.record:
            if weights is None:
                # Diagnostic only: where the query would look under full softmax.
                with T.no_grad():
                    weights = attention_scores(cache.qs[l - 1], cache.ks[:l], cfg.key_dim).data
            self.records.append(AttentionRecord(self.stage, l, weights.mean(axis=(0, 1))))
        return x + o
