"""Synthetic heterogeneous segmentation tasks, dataset container, metrics."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

FAMILIES = ("blobs", "strips", "rings")
BACKGROUND_LEVEL = 0.25
CONTRAST = 0.4


@dataclass(frozen=True)
class ClientSpec:
    family: str = "blobs"
    shift: tuple[float, ...] = (0.0,)
    noise: float = 0.06
    density: float = 2.0
    class_prior: float = 0.9  # probability that an image contains any object

    def __post_init__(self):
        shift = self.shift if isinstance(self.shift, (list, tuple)) else (self.shift,)
        object.__setattr__(self, "shift", tuple(float(s) for s in shift))
        if self.family not in FAMILIES:
            raise ConfigError(f"data.clients.family must be one of {FAMILIES}, got {self.family!r}")
        if self.noise < 0 or self.density < 0 or not 0 <= self.class_prior <= 1:
            raise ConfigError("data.clients: noise and density must be >= 0, class_prior in [0, 1]")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    clients: tuple[ClientSpec, ...]
    image_size: int = 32
    channels: int = 1
    num_classes: int = 2
    n_train: int = 64
    n_test: int = 32
    radius: tuple[float, float] = (4.0, 8.0)
    seed: int = 0

    def __post_init__(self):
        clients = tuple(c if isinstance(c, ClientSpec) else ClientSpec(**c) for c in self.clients)
        object.__setattr__(self, "clients", clients)
        object.__setattr__(self, "radius", tuple(float(r) for r in self.radius))
        if len(clients) < 2:
            raise ConfigError("data.clients needs at least 2 clients")
        if len(set(clients)) != len(clients):
            raise ConfigError("data.clients: every client spec must differ in at least one field")
        for c in clients:
            if len(c.shift) not in (1, self.channels):
                raise ConfigError(f"data.clients.shift needs 1 or {self.channels} values")
        if self.n_train < 1 or self.n_test < 0:
            raise ConfigError("data.n_train must be >= 1 and data.n_test >= 0")
        if self.num_classes < 2 or self.channels < 1 or self.image_size < 4:
            raise ConfigError("data: num_classes >= 2, channels >= 1, image_size >= 4")

    @property
    def num_clients(self):
        return len(self.clients)


def default_task_spec(seed=0, **overrides) -> SyntheticTaskSpec:
    """Three clients that differ in shape family, intensity shift and noise."""
    clients = (
        ClientSpec("blobs", (0.0,), 0.06, 2.0, 0.9),
        ClientSpec("strips", (0.12,), 0.08, 2.0, 0.9),
        ClientSpec("rings", (-0.08,), 0.06, 1.5, 0.9),
    )
    return SyntheticTaskSpec(clients=clients, seed=seed, **overrides)


def noisy_client_task_spec(seed=0, noisy_client=2, factor=4.0, **overrides) -> SyntheticTaskSpec:
    """The default task with one client's noise level multiplied by ``factor``."""
    base = default_task_spec(seed, **overrides)
    clients = [replace(c, noise=0.06) for c in base.clients]
    clients[noisy_client] = replace(clients[noisy_client], noise=0.06 * factor)
    return replace(base, clients=tuple(clients))


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W] float32 in [0, 1]
    mask: np.ndarray  # [H, W] uint8 labels


@dataclass
class ClientDataset:
    train_images: np.ndarray
    train_masks: np.ndarray
    test_images: np.ndarray
    test_masks: np.ndarray

    @property
    def n_train(self):
        return len(self.train_images)

    @property
    def n_test(self):
        return len(self.test_images)

    @property
    def train(self):
        return [Sample(i, m) for i, m in zip(self.train_images, self.train_masks)]

    @property
    def test(self):
        return [Sample(i, m) for i, m in zip(self.test_images, self.test_masks)]

    @classmethod
    def from_samples(cls, train, test, shape):
        c, h, w = shape
        return cls(
            np.stack([s.image for s in train]) if train else np.zeros((0, c, h, w), np.float32),
            np.stack([s.mask for s in train]) if train else np.zeros((0, h, w), np.uint8),
            np.stack([s.image for s in test]) if test else np.zeros((0, c, h, w), np.float32),
            np.stack([s.mask for s in test]) if test else np.zeros((0, h, w), np.uint8),
        )

    def equal(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f)) and
                   getattr(self, f).dtype == getattr(other, f).dtype
                   for f in ("train_images", "train_masks", "test_images", "test_masks"))


# ---------------------------------------------------------------------------
# rasterisation


@dataclass(frozen=True)
class Shape:
    kind: str  # "ellipse", "strip" or "ring"
    cx: float
    cy: float
    a: float  # semi-axis / half-length / outer radius
    b: float  # semi-axis / half-width / inner radius
    angle: float = 0.0
    label: int = 1


def rasterize(shape: Shape, size: int) -> np.ndarray:
    """Boolean raster sampled at integer pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - shape.cx, yy - shape.cy
    c, s = np.cos(shape.angle), np.sin(shape.angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if shape.kind == "ellipse":
        return (u / shape.a) ** 2 + (v / shape.b) ** 2 <= 1.0
    if shape.kind == "strip":
        return (np.abs(u) <= shape.a) & (np.abs(v) <= shape.b)
    if shape.kind == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= shape.a ** 2) & (r2 >= shape.b ** 2)
    raise ConfigError(f"unknown shape kind {shape.kind!r}")


def _random_shape(rng, family, size, radius, num_classes):
    lo, hi = radius
    cx, cy = rng.uniform(0, size - 1, size=2)
    label = int(rng.integers(1, num_classes))
    angle = rng.uniform(0, np.pi)
    if family == "blobs":
        return Shape("ellipse", cx, cy, rng.uniform(lo, hi), rng.uniform(lo, hi), angle, label)
    if family == "strips":
        return Shape("strip", cx, cy, rng.uniform(1.5 * lo, 2.0 * hi), rng.uniform(1.5, 3.0), angle, label)
    outer = rng.uniform(lo + 1.0, hi + 2.0)
    return Shape("ring", cx, cy, outer, outer - rng.uniform(2.5, 4.0), 0.0, label)


def render_sample(shapes, client: ClientSpec, spec: SyntheticTaskSpec, rng) -> Sample:
    """Draw ``shapes`` (later ones on top), add the client's shift and noise."""
    size = spec.image_size
    mask = np.zeros((size, size), np.uint8)
    for sh in shapes:
        mask[rasterize(sh, size)] = sh.label
    level = BACKGROUND_LEVEL + CONTRAST * mask.astype(np.float64) / (spec.num_classes - 1)
    shift = np.broadcast_to(np.asarray(client.shift), (spec.channels,))
    noise = rng.normal(0.0, 1.0, size=(spec.channels, size, size)) * client.noise
    image = level[None] + shift[:, None, None] + noise
    return Sample(np.clip(image, 0.0, 1.0).astype(np.float32), mask)


def _draw_samples(rng, n, client, spec):
    out = []
    for _ in range(n):
        count = int(rng.poisson(client.density)) if rng.random() < client.class_prior else 0
        shapes = [_random_shape(rng, client.family, spec.image_size, spec.radius, spec.num_classes)
                  for _ in range(count)]
        out.append(render_sample(shapes, client, spec, rng))
    return out


def generate_client_dataset(spec: SyntheticTaskSpec, k: int, seed=None) -> ClientDataset:
    """Deterministic train/test split for client ``k``."""
    if not 0 <= k < spec.num_clients:
        raise ConfigError(f"client index {k} outside [0, {spec.num_clients})")
    seed = spec.seed if seed is None else seed
    client = spec.clients[k]
    shape = (spec.channels, spec.image_size, spec.image_size)
    train = _draw_samples(np.random.default_rng([seed, k, 0]), spec.n_train, client, spec)
    test = _draw_samples(np.random.default_rng([seed, k, 1]), spec.n_test, client, spec)
    return ClientDataset.from_samples(train, test, shape)


def generate_task(spec: SyntheticTaskSpec, seed=None) -> list[ClientDataset]:
    return [generate_client_dataset(spec, k, seed) for k in range(spec.num_clients)]


# ---------------------------------------------------------------------------
# metrics


def iou(pred, gt, positive=1) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred == positive, gt == positive
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def overall_accuracy(pred, gt) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"overall_accuracy: shape mismatch {pred.shape} vs {gt.shape}")
    return np.count_nonzero(pred == gt) / pred.size


# ---------------------------------------------------------------------------
# FEDEU-DS container

DS_MAGIC = b"FEDEU-DS"
DS_VERSION = 1


def write_dataset(path, clients: list[ClientDataset]):
    if not clients:
        raise FormatError("dataset must contain at least one client")
    buf = bytearray(DS_MAGIC)
    buf += struct.pack("<HH", DS_VERSION, len(clients))
    for ds in clients:
        buf += struct.pack("<II", ds.n_train, ds.n_test)
        for images, masks in ((ds.train_images, ds.train_masks), (ds.test_images, ds.test_masks)):
            for img, mask in zip(images, masks):
                c, h, w = img.shape
                buf += struct.pack("<HHH", c, h, w)
                buf += np.ascontiguousarray(img, dtype="<f4").tobytes()
                buf += np.ascontiguousarray(mask, dtype=np.uint8).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_dataset(path) -> list[ClientDataset]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != DS_MAGIC:
        raise FormatError(f"{path}: bad magic", 0)
    version, count = struct.unpack("<HH", take(4, "header"))
    if version != DS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)
    if count == 0:
        raise FormatError(f"{path}: empty client list", 10)
    clients = []
    for _ in range(count):
        n_train, n_test = struct.unpack("<II", take(8, "client header"))
        splits = []
        for n in (n_train, n_test):
            samples = []
            for _ in range(n):
                c, h, w = struct.unpack("<HHH", take(6, "sample dims"))
                img = np.frombuffer(take(4 * c * h * w, "image"), dtype="<f4").reshape(c, h, w)
                mask = np.frombuffer(take(h * w, "mask"), dtype=np.uint8).reshape(h, w)
                samples.append(Sample(img.astype(np.float32), mask.copy()))
            splits.append(samples)
        shape = (splits[0] or splits[1])[0].image.shape if (splits[0] or splits[1]) else (1, 1, 1)
        clients.append(ClientDataset.from_samples(splits[0], splits[1], shape))
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last client", pos)
    return clients
