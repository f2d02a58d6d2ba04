"""Small CIFAR-style ResNet with optional stage-scoped layer attention."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import VARIANTS, AttentionConfig, LayerAttention
from .cells import BOTTLENECKED, CELL_KINDS, SIGMAS
from .config import read_kv, to_float, to_int, to_int_list, write_kv
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor


@dataclass
class NetworkConfig:
    in_channels: int = 3
    resolution: int = 16
    widths: list = field(default_factory=lambda: [16, 32, 64])
    blocks: int = 3
    variant: str = None
    heads: int = 4
    cell: str = "dsu"
    reduction: int = 4
    sigma: str = "sigmoid"
    classes: int = 10
    seed: int = 0
    value_init: str = "zero"
    residual_gamma: float = 0.0

    def __post_init__(self):
        if self.variant in ("none", ""):
            self.variant = None
        if self.variant is not None and self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}", "variant")
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"unknown cell {self.cell!r}", "cell")
        if self.sigma not in SIGMAS:
            raise ConfigError(f"unknown sigma {self.sigma!r}", "sigma")
        if self.blocks < 1:
            raise ConfigError("need at least one block per stage", "blocks")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive", "widths")
        if self.variant is not None:
            for w in self.widths:
                if w % self.heads:
                    raise ConfigError(f"width {w} not divisible by heads {self.heads}", "heads")
                if self.cell in BOTTLENECKED and w % self.reduction:
                    raise ConfigError(
                        f"width {w} not divisible by reduction {self.reduction}", "reduction"
                    )

    @classmethod
    def from_kv(cls, kv):
        d = cls()
        return cls(
            in_channels=to_int(kv, "in_channels", d.in_channels),
            resolution=to_int(kv, "resolution", d.resolution),
            widths=to_int_list(kv, "widths", d.widths),
            blocks=to_int(kv, "blocks", d.blocks),
            variant=kv.get("variant", "none").lower(),
            heads=to_int(kv, "heads", d.heads),
            cell=kv.get("cell", d.cell).lower(),
            reduction=to_int(kv, "reduction", d.reduction),
            sigma=kv.get("sigma", d.sigma).lower(),
            classes=to_int(kv, "classes", d.classes),
            seed=to_int(kv, "seed", d.seed),
            value_init=kv.get("value_init", d.value_init).lower(),
            residual_gamma=to_float(kv, "residual_gamma", d.residual_gamma),
        )

    def to_kv(self):
        return {
            "in_channels": self.in_channels,
            "resolution": self.resolution,
            "widths": ",".join(map(str, self.widths)),
            "blocks": self.blocks,
            "variant": self.variant or "none",
            "heads": self.heads,
            "cell": self.cell,
            "reduction": self.reduction,
            "sigma": self.sigma,
            "classes": self.classes,
            "seed": self.seed,
            "value_init": self.value_init,
            "residual_gamma": repr(float(self.residual_gamma)),
        }


def _conv_weight(rng, cout, cin, k, name):
    std = np.sqrt(2.0 / (cin * k * k))
    return Tensor(rng.normal(0.0, std, (cout, cin, k, k)), True, name)


class BatchNorm:
    def __init__(self, channels, name, gamma=1.0):
        self.gamma = Tensor(np.full(channels, gamma), True, f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), True, f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name

    def __call__(self, x, training):
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [
            (f"{self.name}.running_mean", self.running_mean),
            (f"{self.name}.running_var", self.running_var),
        ]


class ResidualBlock:
    """conv3x3-BN-ReLU-conv3x3-BN plus shortcut, then ReLU.

    The second BN scale starts at ``residual_gamma`` (zero by default), so
    every block begins as its shortcut and a fresh network's logits stay near
    uniform.
    """

    def __init__(self, cin, cout, stride, rng, name, residual_gamma=0.0):
        self.stride = stride
        self.conv1 = _conv_weight(rng, cout, cin, 3, f"{name}.conv1")
        self.bn1 = BatchNorm(cout, f"{name}.bn1")
        self.conv2 = _conv_weight(rng, cout, cout, 3, f"{name}.conv2")
        self.bn2 = BatchNorm(cout, f"{name}.bn2", gamma=residual_gamma)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = _conv_weight(rng, cout, cin, 1, f"{name}.shortcut")
            self.proj_bn = BatchNorm(cout, f"{name}.shortcut_bn")
        self.name = name

    def __call__(self, x, training):
        out = T.relu(self.bn1(T.conv2d(x, self.conv1, self.stride), training))
        out = self.bn2(T.conv2d(out, self.conv2), training)
        short = x
        if self.proj is not None:
            short = self.proj_bn(T.conv2d(x, self.proj, self.stride, padding=0), training)
        return T.relu(out + short)

    def parameters(self):
        out = [(self.conv1.name, self.conv1), *self.bn1.parameters()]
        out += [(self.conv2.name, self.conv2), *self.bn2.parameters()]
        if self.proj is not None:
            out += [(self.proj.name, self.proj), *self.proj_bn.parameters()]
        return out

    def buffers(self):
        out = self.bn1.buffers() + self.bn2.buffers()
        if self.proj is not None:
            out += self.proj_bn.buffers()
        return out


class Network:
    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # Attention draws from its own stream so the backbone init does not
        # depend on the variant.
        attn_rng = np.random.default_rng([cfg.seed, 1])
        self.stem = _conv_weight(rng, cfg.widths[0], cfg.in_channels, 3, "stem.conv")
        self.stem_bn = BatchNorm(cfg.widths[0], "stem.bn")
        self.stages = []
        self.attention = []
        cin = cfg.widths[0]
        for s, width in enumerate(cfg.widths, 1):
            blocks = []
            for b in range(1, cfg.blocks + 1):
                stride = 2 if (s > 1 and b == 1) else 1
                blocks.append(ResidualBlock(cin, width, stride, rng, f"stage{s}.block{b}", cfg.residual_gamma))
                cin = width
            self.stages.append(blocks)
            attn = None
            if cfg.variant is not None:
                acfg = AttentionConfig(
                    cfg.variant,
                    width,
                    cfg.heads,
                    cell=cfg.cell,
                    reduction=cfg.reduction,
                    sigma=cfg.sigma,
                    value_init=cfg.value_init,
                )
                attn = LayerAttention(acfg, cfg.blocks, attn_rng, stage=s)
            self.attention.append(attn)
        bound = np.sqrt(1.0 / cin)
        self.fc_w = Tensor(rng.uniform(-bound, bound, (cfg.classes, cin)), True, "fc.weight")
        self.fc_b = Tensor(np.zeros(cfg.classes), True, "fc.bias")
        self.records = []
        self._record = False

    @property
    def record(self):
        return self._record

    @record.setter
    def record(self, flag):
        self._record = bool(flag)
        for attn in self.attention:
            if attn is not None:
                attn.record = self._record

    def named_parameters(self):
        out = [(self.stem.name, self.stem), *self.stem_bn.parameters()]
        for s, blocks in enumerate(self.stages, 1):
            for block in blocks:
                out += block.parameters()
            attn = self.attention[s - 1]
            if attn is not None:
                out += [(f"stage{s}.attn.{n}", t) for n, t in attn.named_parameters()]
        out += [("fc.weight", self.fc_w), ("fc.bias", self.fc_b)]
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_buffers(self):
        out = list(self.stem_bn.buffers())
        for s, blocks in enumerate(self.stages, 1):
            for block in blocks:
                out += block.buffers()
            attn = self.attention[s - 1]
            if attn is not None:
                out += [(f"stage{s}.attn.{n}", a) for n, a in attn.named_buffers()]
        return out

    def describe_params(self):
        return [(name, t.shape) for name, t in self.named_parameters()]

    def param_count(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, x, mode="train"):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be train or eval, got {mode!r}", "mode")
        cfg = self.cfg
        x = T.as_tensor(x)
        expected = (cfg.in_channels, cfg.resolution, cfg.resolution)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"network expects (B, {expected}), got {x.shape}")
        training = mode == "train"
        out = T.relu(self.stem_bn(T.conv2d(x, self.stem), training))
        for blocks, attn in zip(self.stages, self.attention):
            if attn is not None:
                attn.reset()
            for block in blocks:
                out = block(out, training)
                if attn is not None:
                    out = attn(out)
            if attn is not None:
                self.records.extend(attn.records)
                attn.records.clear()
                attn.reset()
        pooled = T.global_average_pool(out)
        return T.matmul(pooled, T.transpose(self.fc_w)) + self.fc_b

    __call__ = forward


def build_network(cfg):
    return Network(cfg)


# ------------------------------------------------------------- checkpoints
#
# u32 count, then per array: u32 name length, name bytes (utf-8), u32 rank,
# u32 extents[rank], float64 values (row-major). Everything little-endian.


def state_arrays(net):
    arrays = [(n, t.data) for n, t in net.named_parameters()]
    return arrays + [(n, np.asarray(a)) for n, a in net.named_buffers()]


def write_arrays(path, arrays):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_arrays(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "array count"))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n, f"values of {name}"), dtype="<f8").reshape(shape)
        out.append((name, data.astype(np.float64)))
    if pos != len(buf):
        raise FormatError("trailing bytes after last array", pos)
    return out


def config_path(path):
    return str(path) + ".cfg"


def save_checkpoint(net, path):
    """Write the array file plus a ``<path>.cfg`` sidecar holding the config."""
    write_arrays(path, state_arrays(net))
    write_kv(config_path(path), net.cfg.to_kv())


def load_checkpoint(path, cfg=None):
    if cfg is None:
        cfg = NetworkConfig.from_kv(read_kv(config_path(path)))
    net = build_network(cfg)
    arrays = dict(read_arrays(path))
    targets = {n: t.data for n, t in net.named_parameters()}
    targets.update({n: a for n, a in net.named_buffers()})
    missing = sorted(set(targets) - set(arrays))
    if missing:
        raise FormatError(f"checkpoint lacks arrays: {', '.join(missing[:5])}")
    for name, dest in targets.items():
        src = arrays[name]
        if src.shape != dest.shape:
            raise FormatError(f"shape mismatch for {name}: {src.shape} vs {dest.shape}")
        dest[...] = src
    return net
