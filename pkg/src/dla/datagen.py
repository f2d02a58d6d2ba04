"""Procedural image classification data and its ``DLAD`` container format.

Each class is a parametric grayscale pattern. A sample picks one of the
class's discrete placements (phase, offset), maps the pattern into every
channel with a random brightness and positive contrast, adds Gaussian noise
and quantizes to 8 bits. Every pattern is closed under horizontal flips, so
flip augmentation keeps labels valid.

Container layout (little-endian)::

    b"DLAD"  u32 version=1  u32 n_samples  u32 channels  u32 height
    u32 width  u32 n_classes
    u8 images[n_samples, channels, height, width]
    u8 labels[n_samples]
"""

import struct
from dataclasses import dataclass

import numpy as np

from .config import to_float, to_int
from .errors import ConfigError, FormatError

MAGIC = b"DLAD"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass
class DatasetSpec:
    n_train: int = 5000
    n_test: int = 1000
    classes: int = 10
    resolution: int = 16
    channels: int = 3
    noise: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least two classes", "classes")
        if self.classes > len(PATTERNS):
            raise ConfigError(
                f"only {len(PATTERNS)} patterns available, asked for {self.classes}", "classes"
            )
        if self.resolution < 8:
            raise ConfigError("resolution must be at least 8", "resolution")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("sample counts must be non-negative", "n_train")
        if self.channels < 1:
            raise ConfigError("need at least one channel", "channels")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative", "noise")

    @classmethod
    def from_kv(cls, kv):
        d = cls()
        return cls(
            n_train=to_int(kv, "n_train", d.n_train),
            n_test=to_int(kv, "n_test", d.n_test),
            classes=to_int(kv, "classes", d.classes),
            resolution=to_int(kv, "resolution", d.resolution),
            channels=to_int(kv, "channels", d.channels),
            noise=to_float(kv, "noise", d.noise),
            seed=to_int(kv, "seed", d.seed),
        )


@dataclass
class Dataset:
    images: np.ndarray  # uint8 (N, C, H, W)
    labels: np.ndarray  # uint8 (N,)
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.n_classes == other.n_classes
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)


# ----------------------------------------------------------------- patterns
#
# Each entry maps a name to (render(n, params) -> float array in [0, 1],
# placements(n) -> list of params).


def _grid(n):
    return np.mgrid[0:n, 0:n].astype(np.float64)


def _stripes(axis, period):
    def render(n, phase):
        coord = _grid(n)[axis]
        return 0.5 + 0.5 * np.cos(2 * np.pi * (coord + phase) / period)

    return render, lambda n: list(range(period))


def _checker(cell):
    def render(n, offset):
        i, j = _grid(n)
        return (((i + offset[0]) // cell + (j + offset[1]) // cell) % 2).astype(np.float64)

    return render, lambda n: [(a, b) for a in range(2 * cell) for b in range(2 * cell)]


def _centred(shape_fn):
    def render(n, shift):
        i, j = _grid(n)
        centre = (n - 1) / 2.0
        return shape_fn(i - centre - shift[0], j - centre - shift[1], n)

    return render, lambda n: [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)]


def _rings(di, dj, n):
    return 0.5 + 0.5 * np.cos(2 * np.pi * np.hypot(di, dj) / 4.0)


def _blob(di, dj, n):
    return np.exp(-(di**2 + dj**2) / (2 * (n / 5.0) ** 2))


def _plus(di, dj, n):
    return ((np.abs(di) < 1.5) | (np.abs(dj) < 1.5)).astype(np.float64)


def _diag_cross(di, dj, n):
    return ((np.abs(di - dj) < 1.5) | (np.abs(di + dj) < 1.5)).astype(np.float64)


def _frame(di, dj, n):
    r = np.maximum(np.abs(di), np.abs(dj))
    return ((r > n / 4.0 - 1) & (r < n / 4.0 + 1)).astype(np.float64)


def _vgradient():
    return (lambda n, _: _grid(n)[0] / (n - 1)), (lambda n: [None])


def _dots(period):
    def render(n, offset):
        i, j = _grid(n)
        return (((i + offset[0]) % period < 1) & ((j + offset[1]) % period < 1)).astype(float)

    return render, lambda n: [(a, b) for a in range(period) for b in range(period)]


PATTERNS = {
    "hstripes4": _stripes(0, 4),
    "vstripes4": _stripes(1, 4),
    "checker2": _checker(2),
    "rings": _centred(_rings),
    "blob": _centred(_blob),
    "plus": _centred(_plus),
    "diagonal_cross": _centred(_diag_cross),
    "hstripes8": _stripes(0, 8),
    "vstripes8": _stripes(1, 8),
    "frame": _centred(_frame),
    "checker4": _checker(4),
    "vgradient": _vgradient(),
    "dots4": _dots(4),
}
PATTERN_NAMES = list(PATTERNS)


def pattern_templates(name, n):
    """Every placement of one pattern, rendered at resolution ``n``."""
    render, placements = PATTERNS[name]
    return [render(n, p) for p in placements(n)]


def _render_sample(name, n, channels, noise, rng):
    render, placements = PATTERNS[name]
    options = placements(n)
    base = render(n, options[rng.integers(len(options))])
    offset = rng.uniform(0.05, 0.35, size=(channels, 1, 1))
    contrast = rng.uniform(0.3, 0.55, size=(channels, 1, 1))
    img = offset + contrast * base[None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _make_split(spec, count, rng):
    labels = np.arange(count) % spec.classes
    rng.shuffle(labels)
    names = PATTERN_NAMES[: spec.classes]
    images = np.empty((count, spec.channels, spec.resolution, spec.resolution), np.uint8)
    for idx, label in enumerate(labels):
        images[idx] = _render_sample(names[label], spec.resolution, spec.channels, spec.noise, rng)
    return Dataset(images, labels.astype(np.uint8), spec.classes)


def generate_synthetic(spec):
    """Return ``(train, test)`` datasets, stratified and fully determined by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    train = _make_split(spec, spec.n_train, rng)
    test = _make_split(spec, spec.n_test, rng)
    return train, test


# ---------------------------------------------------------------- container


def encode_dataset(ds):
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.n_classes)
    return header + np.ascontiguousarray(ds.images, np.uint8).tobytes() + ds.labels.astype(
        np.uint8
    ).tobytes()


def decode_dataset(buf):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: need {_HEADER.size} bytes, have {len(buf)}", len(buf))
    magic, version, n, c, h, w, k = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    n_img = n * c * h * w
    if len(buf) < pos + n_img:
        raise FormatError(
            f"truncated images section: need {n_img} bytes, have {len(buf) - pos}", len(buf)
        )
    images = np.frombuffer(buf, np.uint8, n_img, pos).reshape(n, c, h, w).copy()
    pos += n_img
    if len(buf) < pos + n:
        raise FormatError(f"truncated labels section: need {n} bytes, have {len(buf) - pos}", len(buf))
    labels = np.frombuffer(buf, np.uint8, n, pos).copy()
    pos += n
    if pos != len(buf):
        raise FormatError("trailing bytes after labels section", pos)
    if n and labels.max() >= k:
        raise FormatError(f"label {labels.max()} out of range for {k} classes", pos - n)
    return Dataset(images, labels, k)


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
