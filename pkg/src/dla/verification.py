"""Independent checks for the rest of the package.

Nothing here calls into the attention or cell code to produce an expected
value: the oracles below re-derive every quantity with plain numpy (or
scalar Python loops) from the raw parameter arrays. They only *read* the
objects they audit.
"""

import math
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import attention as A
from . import tensor as T
from .cells import init_cell
from .datagen import PATTERN_NAMES, pattern_templates
from .errors import ConfigError, NumericError, ProbeError

# ----------------------------------------------------------------- gradcheck


def _scalar_value(out):
    value = float(np.asarray(out.data if isinstance(out, T.Tensor) else out).reshape(()))
    if not math.isfinite(value):
        raise NumericError(f"objective returned non-finite value {value}")
    return value


@dataclass
class GradcheckReport:
    max_error: float
    worst: tuple = None  # (param index, flat coordinate, analytic, numeric)
    checked: int = 0
    per_param: list = field(default_factory=list)

    def passed(self, tol):
        return self.max_error <= tol


def gradcheck_report(f, params, step=1e-5, max_coords=200, seed=0):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar tensor built from
    ``params``. At most ``max_coords`` coordinates of each array are probed,
    chosen with a seeded generator.
    """
    if step <= 0:
        raise ConfigError("step must be positive", "step")
    loss = f()
    if loss.size != 1:
        raise NumericError("objective must return a scalar")
    _scalar_value(loss)
    for p in params:
        p.grad = None
    T.backward(loss, leaves=params)
    analytic = [np.array(p.grad, copy=True) for p in params]
    rng = np.random.default_rng(seed)
    report = GradcheckReport(0.0)
    with T.no_grad():
        for pi, (p, grad) in enumerate(zip(params, analytic)):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
            worst_here = 0.0
            for idx in coords:
                saved = flat[idx]
                flat[idx] = saved + step
                up = _scalar_value(f())
                flat[idx] = saved - step
                down = _scalar_value(f())
                flat[idx] = saved
                numeric = (up - down) / (2.0 * step)
                a = grad.reshape(-1)[idx]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst_here = max(worst_here, err)
                if report.worst is None or err > report.max_error:
                    report.max_error = err
                    report.worst = (pi, int(idx), float(a), float(numeric))
                report.checked += 1
            report.per_param.append(worst_here)
    return report


def finite_diff_gradcheck(f, params, step=1e-5, max_coords=200, seed=0):
    """Max relative error between tape and central-difference gradients."""
    return gradcheck_report(f, params, step, max_coords, seed).max_error


# ----------------------------------------------------------------- attention


def brute_force_attention_oracle(q, keys, values, l, key_dim):
    """Softmax-weighted value sum for query layer ``l`` using scalar loops.

    ``q``: (B, H, Dk); ``keys[i]``: (B, H, Dk); ``values[i]``: (B, H, Ch, h, w).
    Returns the (B, H*Ch, h, w) output with heads concatenated channel-wise.
    """
    q = np.asarray(q)
    B, H, Dk = q.shape
    Ch, hh, ww = np.asarray(values[0]).shape[2:]
    out = np.zeros((B, H * Ch, hh, ww))
    scale = 1.0 / math.sqrt(key_dim)
    for b in range(B):
        for head in range(H):
            scores = []
            for i in range(l):
                s = 0.0
                for d in range(Dk):
                    s += float(q[b, head, d]) * float(keys[i][b, head, d])
                scores.append(s * scale)
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            total = sum(exps)
            weights = [e / total for e in exps]
            for c in range(Ch):
                for r in range(hh):
                    for col in range(ww):
                        acc = 0.0
                        for i in range(l):
                            acc += weights[i] * float(values[i][b, head, c, r, col])
                        out[b, head * Ch + c, r, col] = acc
    return out


def _np_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


_NP_SIGMAS = {
    "sigmoid": _np_sigmoid,
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
    "identity": lambda z: z,
}


def np_cell_step(kind, sigma, weights, biases, y, c, h):
    """One cell step on plain arrays; returns ``(c, h)``."""
    C = y.shape[-1]
    if kind == "dsu":
        s = np.maximum(np.concatenate([_NP_SIGMAS[sigma](c), y], -1) @ weights["W1"].T, 0.0)
        c_tilde = np.tanh(s @ weights["W2c"].T + biases["bc"])
        i = _np_sigmoid(s @ weights["W2i"].T + biases["bi"])
        f = _np_sigmoid(s @ weights["W2f"].T + biases["bf"])
        return f * c + i * c_tilde, None
    if kind == "rnn":
        return None, np.tanh(y @ weights["W_y"].T + h @ weights["W_h"].T + biases["b"])
    if kind == "lstm":
        z = y @ weights["W_ih"].T + h @ weights["W_hh"].T + biases["b"]
        i, f, g, o = (z[..., k * C : (k + 1) * C] for k in range(4))
        c = _np_sigmoid(f) * c + _np_sigmoid(i) * np.tanh(g)
        return c, _np_sigmoid(o) * np.tanh(c)
    if kind == "dia":
        s = np.maximum(np.concatenate([h, y], -1) @ weights["W1"].T, 0.0)
        z = s @ weights["W2"].T + biases["b"]
        i, f, o, g = (z[..., k * C : (k + 1) * C] for k in range(4))
        c = _np_sigmoid(f) * c + _np_sigmoid(i) * np.tanh(g)
        return c, _np_sigmoid(o) * _np_sigmoid(c)
    raise ConfigError(f"unknown cell kind {kind!r}", "cell")


def _np_softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def monolithic_stage_oracle(module, inputs, refresh=True):
    """Recompute a whole stage of layer attention from scratch with numpy.

    ``module`` is a :class:`~dla.attention.LayerAttention`; only its raw
    arrays and config are read. ``inputs`` is the list of block outputs
    (B, C, H, W) fed to it one at a time. At every layer the oracle first
    refreshes all earlier maps (dynamic variants, unless ``refresh`` is
    False), then rebuilds every token and evaluates the attention output
    without reusing anything from the previous layer. Returns the list of
    block outputs ``x^l + o^l``.
    """
    cfg = module.cfg
    Wq = [t.data for t in module.proj.query]
    Wk = [t.data for t in module.proj.key]
    Wv = [t.data[:, :, 0, 0] for t in module.proj.value]
    H, Dk = cfg.heads, cfg.key_dim
    if cfg.dynamic:
        cell = module.ctx.cell
        cw = {n: t.data for n, t in cell.weights.items()}
        cb = {n: t.data for n, t in cell.biases.items()}
        c0 = module.ctx.c0
    lambdas = [t.data for t in module.light.lambdas] if cfg.lightweight else None

    def run_cell(y, c, h):
        return np_cell_step(cell.kind, cell.sigma, cw, cb, y, c, h)

    def cell_out(c, h):
        return c if cell.kind == "dsu" else h

    maps, outs = [], []
    for l, x in enumerate(inputs, 1):
        x = np.asarray(x, dtype=np.float64)
        B, C, hs, ws = x.shape
        maps.append(x.copy())
        if cfg.dynamic and refresh and l > 1:
            ys = [m.mean(axis=(2, 3)) for m in maps]
            start = np.broadcast_to(c0, (B, C))
            c, h = start, start
            for y in ys:
                c, h = run_cell(y, c, h)
            gates = [cell_out(*run_cell(ys[m], c, h)) for m in range(l - 1)]
            for m in range(l - 1):
                maps[m] = maps[m] * gates[m][:, :, None, None]
        ys = [m.mean(axis=(2, 3)) for m in maps]
        qs = [(ys[i] @ Wq[i].T).reshape(B, H, Dk) for i in range(l)]
        ks = [(ys[i] @ Wk[i].T).reshape(B, H, Dk) for i in range(l)]
        vs = [np.einsum("oc,bchw->bohw", Wv[i], maps[i]).reshape(B, H, C // H, hs, ws) for i in range(l)]
        if cfg.lightweight:
            o = None
            for m in range(l):
                # single-key softmax of the lightweight recurrence is 1
                w = _np_softmax((np.einsum("bhd,bhd->bh", qs[m], ks[m]) / math.sqrt(Dk))[..., None])
                term = (w[:, :, :, None, None] * vs[m]).reshape(B, C, hs, ws)
                o = term if o is None else lambdas[m][None, :, None, None] * o + term
        else:
            K = np.stack(ks[:l], axis=2)
            w = _np_softmax(np.einsum("bhld,bhd->bhl", K, qs[l - 1]) / math.sqrt(Dk))
            V = np.stack(vs[:l], axis=2)
            o = np.einsum("bhl,bhlcij->bhcij", w, V).reshape(B, C, hs, ws)
        outs.append(maps[l - 1] + o)
    return outs


# ------------------------------------------------------------ parameter audit


@dataclass
class LedgerEntry:
    name: str
    shape: tuple
    count: int


def param_count_oracle(network):
    """Enumerate every named parameter array of ``network`` (or a cell)."""
    if hasattr(network, "named_parameters"):
        items = network.named_parameters()
    else:
        items = network.arrays()
    return [LedgerEntry(n, tuple(t.shape), int(np.prod(t.shape))) for n, t in items]


def ledger_total(ledger, include_biases=True):
    return sum(
        e.count for e in ledger if include_biases or not _is_bias(e.name, e.shape)
    )


def _is_bias(name, shape):
    return len(shape) == 1


def cell_weight_formula(kind, channels, reduction):
    """Closed-form weight count (biases excluded) as an exact fraction."""
    C, r = Fraction(channels), Fraction(reduction)
    return {
        "dsu": 5 * C * C / r,
        "lstm": 8 * C * C,
        "dia": 6 * C * C / r,
        "rnn": 2 * C * C,
    }[kind]


def cell_bias_formula(kind, channels):
    return {"dsu": 3 * channels, "lstm": 4 * channels, "dia": 4 * channels, "rnn": channels}[kind]


def plain_network_formula(cfg):
    """Closed-form parameter count of the plain residual backbone."""
    total = 9 * cfg.in_channels * cfg.widths[0] + 2 * cfg.widths[0]
    cin = cfg.widths[0]
    for s, width in enumerate(cfg.widths):
        for b in range(cfg.blocks):
            total += 9 * cin * width + 9 * width * width + 4 * width
            if (s > 0 and b == 0) or cin != width:
                total += cin * width + 2 * width
            cin = width
    return total + cin * cfg.classes + cfg.classes


def attachment_formula(cfg):
    """Closed-form cost of the layer-attention modules of a network config."""
    if cfg.variant is None:
        return 0
    total = 0
    for C in cfg.widths:
        n = cfg.blocks
        total += n * (2 * C * C + C * C)  # query, key (H*Dk = C) and value maps
        if cfg.variant.endswith("-l"):
            total += n * C
        if cfg.variant.startswith("dla"):
            total += int(cell_weight_formula(cfg.cell, C, cfg.reduction))
            total += cell_bias_formula(cfg.cell, C)
    return total


def format_ledger(ledger):
    lines = ["name,shape,count"]
    for e in ledger:
        lines.append(f"{e.name},{'x'.join(map(str, e.shape))},{e.count}")
    lines.append(f"total,,{sum(e.count for e in ledger)}")
    return "\n".join(lines)


# ------------------------------------------------------------ pattern decoder


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    return float((a * b).sum()) / den if den > 0 else -1.0


def pattern_decoder(images, classes):
    """Label images by the best Pearson match against every class template.

    Correlation ignores the per-channel brightness and (positive) contrast,
    so on noise-free data the true placement scores ~1.
    """
    n = images.shape[-1]
    bank = [pattern_templates(name, n) for name in PATTERN_NAMES[:classes]]
    labels = np.empty(len(images), dtype=np.int64)
    for idx, img in enumerate(images.astype(np.float64)):
        gray = img.mean(axis=0)
        best = [max(_pearson(gray, t) for t in temps) for temps in bank]
        labels[idx] = int(np.argmax(best))
    return labels


# -------------------------------------------------------------- timing probe


@dataclass
class ScalingReport:
    depths: list
    forward: list  # median seconds per depth
    refresh: list
    forward_ratios: list
    refresh_ratios: list
    slope: float
    intercept: float
    r_squared: float

    def to_text(self):
        lines = ["depth,forward_s,refresh_s"]
        for d, f, r in zip(self.depths, self.forward, self.refresh):
            lines.append(f"{d},{f:.6e},{r:.6e}")
        lines.append("forward_ratios," + ",".join(f"{x:.3f}" for x in self.forward_ratios))
        lines.append("refresh_ratios," + ",".join(f"{x:.3f}" for x in self.refresh_ratios))
        lines.append(f"fit,slope={self.slope:.6e},intercept={self.intercept:.6e},r2={self.r_squared:.4f}")
        return "\n".join(lines)


def linear_fit(xs, ys):
    x, y = np.asarray(xs, float), np.asarray(ys, float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


def _interleaved_medians(jobs, repeats, warmup):
    """Median wall time of each job; one sample of every job per round so a
    slow stretch of the machine hits all of them alike."""
    for _ in range(warmup):
        for fn in jobs:
            fn()
    samples = [[] for _ in jobs]
    for _ in range(repeats):
        for fn, store in zip(jobs, samples):
            t0 = time.perf_counter()
            fn()
            store.append(time.perf_counter() - t0)
    return [statistics.median(s) for s in samples]


def timing_scaling_probe(depths, repeats=20, channels=64, batch=1, warmup=3, seed=0):
    """Time the context recurrence and one refresh gate at several stage depths.

    The forward context walks all ``depth`` descriptors, so its time should
    grow linearly; a single refresh gate is one cell step whatever the depth.
    """
    depths = [int(d) for d in depths]
    if len(depths) < 3 or any(b <= a for a, b in zip(depths, depths[1:])) or depths[0] < 1:
        raise ConfigError("need at least three strictly increasing positive depths", "depths")
    if repeats < 1:
        raise ConfigError("repeats must be positive", "repeats")
    rng = np.random.default_rng(seed)
    cfg = A.AttentionConfig("dla-b", channels, heads=1)
    cell_rng = np.random.default_rng([seed, 1])
    ctx = A.DynContext(rng.normal(0.0, 0.1, channels), init_cell("dsu", channels, 4, "sigmoid", cell_rng))
    resolution = time.get_clock_info("perf_counter").resolution
    jobs = []
    with T.no_grad():
        for depth in depths:
            cache = A.TokenCache()
            cache.ys.extend(T.Tensor(rng.normal(size=(batch, channels))) for _ in range(depth))
            cache.xs.extend([None] * depth)
            state = A.dla_forward_context(cache, depth, ctx)
            jobs.append(lambda c=cache, d=depth: A.dla_forward_context(c, d, ctx))
            jobs.append(lambda c=cache, s=state: A.refresh_gate(c, 1, s, ctx))
        medians = _interleaved_medians(jobs, repeats, warmup)
    forward, refresh = medians[0::2], medians[1::2]
    if min(forward + refresh) < 100 * resolution:
        raise ProbeError(
            f"timings near the clock resolution ({resolution:.1e} s); increase repeats or channels"
        )
    slope, intercept, r2 = linear_fit(depths, forward)
    return ScalingReport(
        depths,
        forward,
        refresh,
        [b / a for a, b in zip(forward, forward[1:])],
        [b / a for a, b in zip(refresh, refresh[1:])],
        slope,
        intercept,
        r2,
    )
