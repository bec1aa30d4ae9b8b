"""Dataset ingestion, corruption synthesizers, and augmentation.

Loaders parse the published binary layouts directly: big-endian IDX for
MNIST-style digit sets and 3073-byte-record batches for CIFAR-10. Pixel
bytes are scaled by 1/255 so Dataset images always live in [0,1]; labels ride
along as a plain list of ints.

The four corruptions (gaussian, shot, speckle, impulse) operate in pixel
space and clamp back to [0,1]. Severity is either an integer level 0..4
into the benchmark-convention parameter tables below, or a float used as
the raw parameter itself (sigma for gaussian/speckle, the photon count for
shot, the replacement fraction for impulse), which callers use when the
table steps are too coarse for a sweep.

synthesize_digits writes a self-contained digit corpus in genuine IDX files
(seven-segment-style glyphs with position, slant, thickness, brightness,
and pixel-noise jitter) for environments where no MNIST copy is available;
load_mnist reads it back through the exact same parsing path.
"""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["Dataset", "NoiseSpec", "load_mnist", "load_cifar10", "corrupt",
           "augment", "channel_stats", "synthesize_digits", "SEVERITY_TABLES"]

SEVERITY_TABLES = {
    "gaussian": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot": (500.0, 250.0, 100.0, 75.0, 50.0),
    "speckle": (0.06, 0.10, 0.12, 0.16, 0.20),
    "impulse": (0.01, 0.02, 0.03, 0.05, 0.07),
}


@dataclass
class Dataset:
    images: Tensor
    labels: list
    name: str

    def __post_init__(self):
        self.labels = [int(v) for v in self.labels]
        if self.images.shape[0] != len(self.labels):
            raise ValueError("%d images but %d labels"
                             % (self.images.shape[0], len(self.labels)))
        arr = self.images.data
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("image values must lie in [0,1], got [%g, %g]"
                             % (arr.min(), arr.max()))

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        images = Tensor(np.ascontiguousarray(self.images.data[idx]))
        labels = [self.labels[i] for i in idx]
        return Dataset(images, labels, self.name)


@dataclass
class NoiseSpec:
    """Corruption request: kind, severity (int level or float parameter), seed."""

    kind: str
    severity: object
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ValueError("unknown corruption %r; expected one of %s"
                             % (self.kind, sorted(SEVERITY_TABLES)))
        _resolve_strength(self.kind, self.severity)
        self.seed = int(self.seed)

    @property
    def strength(self):
        return _resolve_strength(self.kind, self.severity)


def _resolve_strength(kind, severity):
    if isinstance(severity, bool):
        raise ValueError("severity must be an int level or float parameter")
    if isinstance(severity, (int, np.integer)):
        table = SEVERITY_TABLES[kind]
        if not 0 <= severity < len(table):
            raise ValueError("severity level %d outside 0..%d"
                             % (severity, len(table) - 1))
        return table[severity]
    value = float(severity)
    if kind == "shot":
        if value <= 0:
            raise ValueError("shot photon count must be positive, got %g" % value)
    elif kind == "impulse":
        if not 0.0 <= value <= 1.0:
            raise ValueError("impulse fraction must be in [0,1], got %g" % value)
    elif value < 0:
        raise ValueError("noise sigma must be non-negative, got %g" % value)
    return value


# binary readers --------------------------------------------------------------------


def _read_bytes(path):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _read_idx(path, want_magic):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ValueError("%s: truncated IDX header" % path)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != want_magic:
        raise ValueError("%s: bad magic %d, expected %d" % (path, magic, want_magic))
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise ValueError("%s: truncated IDX header" % path)
    dims = struct.unpack(">%dI" % rank, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise ValueError("%s: expected %d data bytes, found %d"
                         % (path, count, len(raw) - header))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(root, split="train"):
    """Read an IDX image/label pair from root; split is train or test."""
    if split not in ("train", "test"):
        raise ValueError("split must be train or test, got %r" % (split,))
    prefix = "train" if split == "train" else "t10k"
    images = _read_idx(os.path.join(root, "%s-images-idx3-ubyte" % prefix), 2051)
    labels = _read_idx(os.path.join(root, "%s-labels-idx1-ubyte" % prefix), 2049)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("count mismatch: %d images vs %d labels"
                         % (images.shape[0], labels.shape[0]))
    n, h, w = images.shape
    arr = images.astype(np.float64).reshape(n, 1, h, w) / 255.0
    return Dataset(Tensor._wrap(arr), labels.tolist(), "mnist-%s" % split)


def load_cifar10(root, split="train"):
    """Read CIFAR-10 binary batches (1 label byte + 3072 pixel bytes each)."""
    if split == "train":
        names = ["data_batch_%d.bin" % i for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise ValueError("split must be train or test, got %r" % (split,))
    chunks, labels = [], []
    for name in names:
        raw = _read_bytes(os.path.join(root, name))
        if not raw or len(raw) % 3073:
            raise ValueError("%s: length %d is not a whole number of "
                             "3073-byte records" % (name, len(raw)))
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        labels.extend(rec[:, 0].tolist())
        chunks.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    arr = np.concatenate(chunks).astype(np.float64) / 255.0
    return Dataset(Tensor._wrap(np.ascontiguousarray(arr)), labels,
                   "cifar10-%s" % split)


def channel_stats(images):
    """Per-channel mean and std for model input standardization."""
    arr = images.data
    mean = arr.mean(axis=(0, 2, 3))
    std = arr.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-8)


# corruption ------------------------------------------------------------------------


def corrupt(images, spec):
    """Additive noise in pixel space, clamped back to [0,1].

    gaussian: x + N(0, sigma^2); shot: Poisson(x*p)/p; speckle: x + x*N(0,
    sigma^2); impulse: a fraction q of pixels replaced by 0 or 1
    equiprobably. Deterministic per spec.seed.
    """
    arr = images.data
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=1.0) > 1.0:
        raise ValueError("corrupt expects images in [0,1]")
    rng = np.random.default_rng(spec.seed)
    strength = spec.strength
    if spec.kind == "gaussian":
        out = arr + rng.normal(0.0, strength, arr.shape) if strength else arr.copy()
    elif spec.kind == "shot":
        out = rng.poisson(arr * strength).astype(np.float64) / strength
    elif spec.kind == "speckle":
        out = arr + arr * rng.normal(0.0, strength, arr.shape) if strength else arr.copy()
    else:
        out = arr.copy()
        replace = rng.random(arr.shape) < strength
        out[replace] = (rng.random(arr.shape) < 0.5).astype(np.float64)[replace]
    return Tensor._wrap(np.clip(out, 0.0, 1.0))


def augment(images, pad_crop=0, hflip=False, rng=None):
    """Random pad-and-crop translation and horizontal flips, per image."""
    if rng is None:
        rng = np.random.default_rng(0)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    arr = images.data.copy()
    n, _, h, w = arr.shape
    if hflip:
        flips = rng.random(n) < 0.5
        arr[flips] = arr[flips, :, :, ::-1]
    if pad_crop:
        p = int(pad_crop)
        padded = np.pad(arr, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        for i in range(n):
            oy, ox = offsets[i]
            arr[i] = padded[i, :, oy:oy + h, ox:ox + w]
    return Tensor._wrap(arr)


# synthetic digit corpus -------------------------------------------------------------

# stroke skeletons in a unit glyph box (x right, y down). Lines carry two
# endpoints, quads three bezier points, arcs a center, two radii, and a
# phase range in half-turns. Every coordinate gets jittered per instance,
# so these are class prototypes rather than templates.
_DIGIT_STROKES = {
    0: [("arc", (0.5, 0.5), (0.27, 0.38), (0.0, 2.0))],
    1: [("line", (0.32, 0.26), (0.52, 0.08)),
        ("line", (0.52, 0.08), (0.5, 0.92))],
    2: [("quad", (0.2, 0.32), (0.5, -0.08), (0.78, 0.32)),
        ("quad", (0.78, 0.32), (0.74, 0.6), (0.2, 0.88)),
        ("line", (0.2, 0.88), (0.82, 0.88))],
    3: [("quad", (0.25, 0.14), (0.86, 0.04), (0.52, 0.46)),
        ("quad", (0.52, 0.46), (0.95, 0.62), (0.24, 0.88))],
    4: [("line", (0.6, 0.08), (0.16, 0.6)),
        ("line", (0.16, 0.6), (0.85, 0.6)),
        ("line", (0.63, 0.34), (0.63, 0.92))],
    5: [("line", (0.76, 0.1), (0.26, 0.12)),
        ("line", (0.26, 0.12), (0.23, 0.46)),
        ("quad", (0.23, 0.46), (0.95, 0.42), (0.6, 0.8)),
        ("quad", (0.6, 0.8), (0.42, 0.95), (0.17, 0.8))],
    6: [("quad", (0.68, 0.08), (0.24, 0.18), (0.26, 0.56)),
        ("arc", (0.47, 0.67), (0.22, 0.22), (0.0, 2.0))],
    7: [("line", (0.16, 0.13), (0.83, 0.13)),
        ("quad", (0.83, 0.13), (0.55, 0.5), (0.35, 0.9))],
    8: [("arc", (0.5, 0.3), (0.2, 0.18), (0.0, 2.0)),
        ("arc", (0.5, 0.69), (0.24, 0.21), (0.0, 2.0))],
    9: [("arc", (0.5, 0.32), (0.21, 0.2), (0.0, 2.0)),
        ("quad", (0.71, 0.35), (0.68, 0.7), (0.42, 0.9))],
}


def _blur3(img):
    # binomial 3x3 smoothing via shifted adds
    padded = np.pad(img, 1)
    acc = 4.0 * padded[1:-1, 1:-1]
    acc += 2.0 * (padded[:-2, 1:-1] + padded[2:, 1:-1]
                  + padded[1:-1, :-2] + padded[1:-1, 2:])
    acc += (padded[:-2, :-2] + padded[:-2, 2:]
            + padded[2:, :-2] + padded[2:, 2:])
    return acc / 16.0


def _stroke_points(stroke, rng):
    """Sample one jittered skeleton stroke as glyph-space points."""
    kind = stroke[0]
    if kind == "arc":
        (cx, cy), (rx, ry), (p0, span) = stroke[1:]
        cx, cy = cx + rng.normal(0, 0.03), cy + rng.normal(0, 0.03)
        rx, ry = rx * rng.uniform(0.85, 1.15), ry * rng.uniform(0.85, 1.15)
        phi = np.pi * (p0 + rng.uniform(-0.1, 0.1)
                       + np.linspace(0.0, span, 40))
        return np.stack([cx + rx * np.cos(phi), cy + ry * np.sin(phi)], axis=1)
    pts = np.array(stroke[1:], dtype=np.float64)
    pts += rng.normal(0, 0.035, pts.shape)
    t = np.linspace(0.0, 1.0, 24)[:, None]
    if kind == "quad":
        p0, p1, p2 = pts
        return ((1 - t) ** 2 * p0 + 2 * t * (1 - t) * p1 + t ** 2 * p2)
    p0, p1 = pts
    return (1 - t) * p0 + t * p1


def _digit_image(digit, rng):
    """One 28x28 rendering: jittered skeleton, random affine, soft strokes."""
    theta = rng.uniform(-0.15, 0.15)
    shear = rng.uniform(-0.3, 0.3)
    sx = 1.0 + rng.uniform(-0.12, 0.12)
    sy = 1.0 + rng.uniform(-0.12, 0.12)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    aff = rot @ np.array([[sx, shear * sx], [0.0, sy]])
    size = rng.uniform(17.0, 21.0)
    center = 13.5 + rng.uniform(-2.5, 2.5, size=2)

    yy, xx = np.mgrid[0:28, 0:28]
    canvas = np.zeros((28, 28))
    radius = rng.uniform(1.0, 1.6)
    for stroke in _DIGIT_STROKES[digit]:
        pts = (_stroke_points(stroke, rng) - 0.5) @ aff.T * size + center
        d2 = ((xx[None] - pts[:, 0, None, None]) ** 2
              + (yy[None] - pts[:, 1, None, None]) ** 2)
        dist = np.sqrt(d2.min(axis=0))
        ink = np.clip((radius - dist) / 0.9 + 1.0, 0.0, 1.0)
        canvas = np.maximum(canvas, ink * rng.uniform(0.85, 1.0))
    return np.clip(_blur3(canvas) * rng.uniform(0.9, 1.0), 0.0, 1.0)


def _write_idx(path, magic, dims, payload):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">%dI" % len(dims), *dims))
        fh.write(payload.tobytes())


def synthesize_digits(root, train_n=12000, test_n=2000, seed=0):
    """Write a jittered seven-segment digit corpus as IDX files under root.

    Produces the four standard MNIST file names so load_mnist reads the
    result unchanged. Deterministic per seed.
    """
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n, prefix in (("train", train_n, "train"), ("test", test_n, "t10k")):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        images = np.empty((n, 28, 28), dtype=np.uint8)
        for i in range(n):
            images[i] = np.round(255.0 * _digit_image(int(labels[i]), rng))
        _write_idx(os.path.join(root, "%s-images-idx3-ubyte" % prefix),
                   2051, (n, 28, 28), images)
        _write_idx(os.path.join(root, "%s-labels-idx1-ubyte" % prefix),
                   2049, (n,), labels)
    return root
