"""SGD training loop, step schedule, metrics and the multi-seed runner."""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import NetworkConfig, build_network, save_checkpoint
from .config import to_bool, to_float, to_int, to_int_list
from .errors import ConfigError, NumericError

LOG_HEADER = "epoch,lr,train_loss,train_acc,test_loss,test_acc"


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: list = field(default_factory=lambda: [15, 25])
    gamma: float = 0.1
    batch_size: int = 64
    augment: bool = True
    pad: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("must be non-negative", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be positive", "batch_size")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("must be strictly increasing", "milestones")

    @classmethod
    def from_kv(cls, kv):
        d = cls()
        return cls(
            epochs=to_int(kv, "epochs", d.epochs),
            lr=to_float(kv, "lr", d.lr),
            momentum=to_float(kv, "momentum", d.momentum),
            weight_decay=to_float(kv, "weight_decay", d.weight_decay),
            milestones=to_int_list(kv, "milestones", d.milestones),
            gamma=to_float(kv, "gamma", d.gamma),
            batch_size=to_int(kv, "batch_size", d.batch_size),
            augment=to_bool(kv, "augment", d.augment),
            pad=to_int(kv, "pad", d.pad),
            seed=to_int(kv, "seed", d.seed),
        )


@dataclass
class Schedule:
    base_lr: float = 0.1
    milestones: list = field(default_factory=lambda: [15, 25])
    gamma: float = 0.1

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("must be strictly increasing", "milestones")


def lr_at_epoch(sched, epoch):
    if epoch < 0:
        raise ConfigError("epoch must be non-negative", "epoch")
    passed = sum(1 for m in sched.milestones if m <= epoch)
    return sched.base_lr * sched.gamma**passed


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list = None


def sgd_step(params, grads, state):
    """Classical momentum SGD, in place: ``v = mu v + g + wd p``; ``p -= lr v``.

    All gradients are validated before anything is touched, so a NaN aborts
    the whole step.
    """
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {p.name or 'parameter'}")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= state.lr * v


@dataclass
class Metrics:
    loss: float
    accuracy: float


def normalize(images):
    return (images.astype(np.float64) / 255.0 - 0.5) / 0.25


def augment_batch(x, rng, pad):
    """Random horizontal flip, then a random crop from a zero-padded copy."""
    B, _, H, W = x.shape
    flip = rng.random(B) < 0.5
    x = x.copy()
    x[flip] = x[flip, :, :, ::-1]
    if pad:
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
        for b in range(B):
            i, j = offs[b]
            x[b] = padded[b, :, i : i + H, j : j + W]
    return x


def _require_data(data):
    if data is None or len(data) == 0:
        raise ConfigError("dataset is empty", "data")


def train_epoch(net, data, state, cfg, rng):
    _require_data(data)
    params = net.parameters()
    order = rng.permutation(len(data))
    total_loss, correct = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x = normalize(data.images[idx])
        if cfg.augment:
            x = augment_batch(x, rng, cfg.pad)
        y = data.labels[idx].astype(np.int64)
        net.zero_grad()
        logits = net.forward(x, "train")
        loss = T.cross_entropy(logits, y)
        T.backward(loss, leaves=params)
        sgd_step(params, [p.grad for p in params], state)
        total_loss += loss.item() * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return Metrics(total_loss / len(data), correct / len(data))


def evaluate(net, data, batch_size=200):
    _require_data(data)
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            x = normalize(data.images[start : start + batch_size])
            y = data.labels[start : start + batch_size].astype(np.int64)
            logits = net.forward(x, "eval")
            total_loss += T.cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    return Metrics(total_loss / len(data), correct / len(data))


def format_log_line(epoch, lr, train, test):
    return (
        f"{epoch},{lr:.6g},{train.loss:.6f},{train.accuracy:.6f},"
        f"{test.loss:.6f},{test.accuracy:.6f}"
    )


def run_training(net_cfg, cfg, train, test, log_path=None, checkpoint=None, progress=None):
    """Train one network; returns ``(net, history)`` with one entry per epoch."""
    net = build_network(net_cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    sched = Schedule(cfg.lr, cfg.milestones, cfg.gamma)
    state = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    lines = [LOG_HEADER]
    history = []
    for epoch in range(cfg.epochs):
        state.lr = lr_at_epoch(sched, epoch)
        tr = train_epoch(net, train, state, cfg, rng)
        te = evaluate(net, test)
        history.append((epoch, state.lr, tr, te))
        lines.append(format_log_line(epoch, state.lr, tr, te))
        if progress is not None:
            progress(lines[-1])
        if log_path is not None:
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
    if checkpoint is not None:
        save_checkpoint(net, checkpoint)
    return net, history


def mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


def format_accuracy(accuracies):
    """Percent accuracy as ``mean±std`` with two decimals."""
    m, s = mean_std(100.0 * np.asarray(accuracies))
    return f"{m:.2f}±{s:.2f}"


def run_seeds(net_cfg, cfg, train, test, seeds, log_path=None, checkpoint=None, progress=None):
    """Train once per seed; returns final test accuracies in seed order."""
    accs = []
    for s in seeds:
        suffix = f".seed{s}" if len(seeds) > 1 else ""
        _, history = run_training(
            replace(net_cfg, seed=s),
            replace(cfg, seed=s),
            train,
            test,
            log_path=None if log_path is None else f"{log_path}{suffix}",
            checkpoint=None if checkpoint is None else f"{checkpoint}{suffix}",
            progress=progress,
        )
        accs.append(history[-1][3].accuracy if history else evaluate_fresh(net_cfg, test, s))
    return accs


def evaluate_fresh(net_cfg, test, seed):
    return evaluate(build_network(replace(net_cfg, seed=seed)), test).accuracy


def accuracy_table(rows):
    """Render ``[(label, params, accuracies)]`` as a Table-1 style text table."""
    out = ["Model | #P | Top-1 (Accuracy±Std)"]
    for label, n_params, accs in rows:
        out.append(f"{label} | {n_params} | {format_accuracy(accs)}")
    return "\n".join(out)


def ablation_grid(base=None):
    """Configurations for the cell swap and the state-normalizer swap of DSU.

    Returns ``(label, NetworkConfig)`` pairs: four DLA-L networks with RNN,
    LSTM, DIA and DSU cells (sigmoid), then four DSU networks with identity,
    tanh, relu and sigmoid as the normalizer of the previous state.
    """
    base = NetworkConfig(variant="dla-l") if base is None else replace(base, variant="dla-l")
    grid = [(f"cell={c}", replace(base, cell=c, sigma="sigmoid")) for c in ("rnn", "lstm", "dia", "dsu")]
    grid += [
        (f"sigma={s}", replace(base, cell="dsu", sigma=s))
        for s in ("identity", "tanh", "relu", "sigmoid")
    ]
    return grid


def initial_loss(net, data, batch_size=64):
    """Cross-entropy of an untrained network on the first batch (train mode)."""
    with T.no_grad():
        x = normalize(data.images[:batch_size])
        y = data.labels[:batch_size].astype(np.int64)
        return T.cross_entropy(net.forward(x, "train"), y).item()


def chance_bounds(n, classes, sigmas=3.0):
    p = 1.0 / classes
    half = sigmas * math.sqrt(p * (1 - p) / n)
    return p - half, p + half
