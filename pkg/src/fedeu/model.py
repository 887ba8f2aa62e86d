"""Encoder / adapter / CFE / decoder segmentation network with two heads.

The encoder is a stack of stride-2 3x3 convolutions whose weights are frozen
after initialisation. Each stage is followed by a trainable bottleneck
adapter (1x1 down, ReLU, 1x1 up, residual). The CFE block gates the output
of one chosen stage. A U-shaped decoder with skip connections feeds a
segmentation head and an evidential (Dirichlet evidence) head.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from types import MappingProxyType

import numpy as np

from . import cfe
from . import tensor as T
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .tensor import Tensor


class Group(IntEnum):
    FROZEN = 0
    ADAPTER = 1
    CFE = 2
    DECODER = 3
    SEG_HEAD = 4
    EU_HEAD = 5
    PSI = 6  # reserved for client-state checkpoints


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 2
    widths: tuple[int, ...] = (16, 32, 64)
    adapter_bottleneck: int = 8
    cfe_stage: int = 3
    num_clients: int = 3
    evidence_activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        self.validate()

    def validate(self):
        if self.in_channels < 1:
            raise ConfigError("network.in_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("network.num_classes must be >= 2")
        if not self.widths or any(w < 2 for w in self.widths):
            raise ConfigError("network.widths must be a non-empty list of widths >= 2")
        if self.adapter_bottleneck < 1:
            raise ConfigError("network.adapter_bottleneck must be >= 1")
        if len(self.image_size) != 2:
            raise ConfigError("network.image_size must be [H, W]")
        div = 2 ** len(self.widths)
        if any(s < div or s % div for s in self.image_size):
            raise ConfigError(f"network.image_size {self.image_size} must be divisible by {div}")
        if not 1 <= self.cfe_stage <= len(self.widths):
            raise ConfigError(f"network.cfe_stage must lie in [1, {len(self.widths)}]")
        if self.num_clients < 1:
            raise ConfigError("network.num_clients must be >= 1")
        if self.evidence_activation not in ("softplus", "exp", "relu"):
            raise ConfigError("network.evidence_activation must be softplus, exp or relu")

    @property
    def n_stages(self):
        return len(self.widths)

    @property
    def cfe_width(self):
        return self.widths[self.cfe_stage - 1]


class ParameterSet:
    """Named float32 arrays, each tagged with one immutable group."""

    def __init__(self, arrays, groups, config=None):
        if set(arrays) != set(groups):
            raise ConfigError("every parameter needs exactly one group")
        self.arrays = dict(arrays)
        self.groups = MappingProxyType({n: Group(g) for n, g in groups.items()})
        self.config = config

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def __contains__(self, name):
        return name in self.arrays

    def names(self, *groups):
        return [n for n in self.arrays if self.groups[n] in groups]

    def subset(self, *groups):
        return {n: self.arrays[n] for n in self.names(*groups)}

    def copy(self):
        return ParameterSet({n: a.copy() for n, a in self.arrays.items()}, self.groups, self.config)

    def with_values(self, updates):
        """A copy with ``updates`` substituted (arrays are copied)."""
        out = self.copy()
        for n, v in updates.items():
            if n not in out.arrays:
                raise KeyError(n)
            if np.shape(v) != out.arrays[n].shape:
                raise ShapeError(f"{n}: shape {np.shape(v)} != {out.arrays[n].shape}")
            out.arrays[n] = np.array(v, dtype=np.float32)
        return out

    def count(self, *groups):
        names = self.names(*groups) if groups else list(self.arrays)
        return int(sum(self.arrays[n].size for n in names))

    def equal(self, other, *groups):
        names = self.names(*groups) if groups else list(self.arrays)
        return all(np.array_equal(self.arrays[n], other.arrays[n]) for n in names)


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_network(cfg: NetworkConfig, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    arrays, groups = {}, {}

    def add(name, arr, group):
        arrays[name] = arr
        groups[name] = group

    def conv(name, cout, cin, k, group, zero=False):
        w = np.zeros((cout, cin, k, k), np.float32) if zero else _kaiming(rng, (cout, cin, k, k), cin * k * k)
        add(name + ".weight", w, group)
        add(name + ".bias", np.zeros(cout, np.float32), group)

    def linear(name, fin, fout, group):
        add(name + ".weight", _kaiming(rng, (fin, fout), fin), group)
        add(name + ".bias", np.zeros(fout, np.float32), group)

    cin = cfg.in_channels
    for s, w in enumerate(cfg.widths, start=1):
        conv(f"enc{s}", w, cin, 3, Group.FROZEN)
        conv(f"adapter{s}.down", cfg.adapter_bottleneck, w, 1, Group.ADAPTER)
        conv(f"adapter{s}.up", w, cfg.adapter_bottleneck, 1, Group.ADAPTER, zero=True)
        cin = w

    cw = cfg.cfe_width
    linear(cfe.EMBED1, cfg.num_clients, cw, Group.CFE)
    linear(cfe.EMBED2, cw, cw, Group.CFE)
    linear(cfe.GATE_EMBED, cw, cw, Group.CFE)
    linear(cfe.GATE_DESC, cw, cw, Group.CFE)

    widths = cfg.widths
    for s in range(cfg.n_stages - 1, 0, -1):
        conv(f"dec{s}", widths[s - 1], widths[s] + widths[s - 1], 3, Group.DECODER)
    conv("dec0", widths[0], widths[0] + cfg.in_channels, 3, Group.DECODER)

    conv("seg_head", cfg.num_classes, widths[0], 1, Group.SEG_HEAD)
    conv("eu_head", cfg.num_classes, widths[0], 1, Group.EU_HEAD)
    return ParameterSet(arrays, groups, cfg)


def expected_parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count for ``build_network(cfg)``."""
    total, cin = 0, cfg.in_channels
    b = cfg.adapter_bottleneck
    for w in cfg.widths:
        total += w * cin * 9 + w
        total += b * w + b + w * b + w
        cin = w
    cw, k = cfg.cfe_width, cfg.num_clients
    total += k * cw + cw + 3 * (cw * cw + cw)
    ws = cfg.widths
    for s in range(1, len(ws)):
        total += ws[s - 1] * (ws[s] + ws[s - 1]) * 9 + ws[s - 1]
    total += ws[0] * (ws[0] + cfg.in_channels) * 9 + ws[0]
    total += 2 * (cfg.num_classes * ws[0] + cfg.num_classes)
    return total


def trainable_subset(params: ParameterSet, kind: str) -> list[str]:
    """Parameters that each loss term may update.

    ``seg`` excludes the EU head, ``eu`` excludes the segmentation head; both
    exclude the frozen encoder.
    """
    if kind == "seg":
        excluded = (Group.FROZEN, Group.EU_HEAD)
    elif kind == "eu":
        excluded = (Group.FROZEN, Group.SEG_HEAD)
    else:
        raise ValueError(f"loss kind must be 'seg' or 'eu', got {kind!r}")
    return [n for n in params if params.groups[n] not in excluded]


@dataclass
class ForwardOutput:
    seg_logits: Tensor
    evidence: Tensor
    leaves: dict = field(default_factory=dict)


def _layer(name, fn, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(f"layer '{name}': {exc}") from None


def _conv(p, name, x, stride=1, padding=1):
    return T.conv2d(x, p[name + ".weight"], p[name + ".bias"], stride=stride, padding=padding)


def _adapter(p, s, x):
    h = T.relu(_conv(p, f"adapter{s}.down", x, padding=0))
    return T.add(x, _conv(p, f"adapter{s}.up", h, padding=0))


def _evidence(kind, x):
    if kind == "softplus":
        return T.softplus(x)
    if kind == "exp":
        return T.exp(x)
    return T.relu(x)


def forward(params, batch, client_embedding, *, trainable=(), overrides=None,
            use_cfe=True, cfg=None) -> ForwardOutput:
    """Run the network on ``batch`` [B, C_in, H, W].

    ``trainable`` names become gradient leaves (returned in ``leaves``).
    ``overrides`` maps parameter names to Tensors used in place of the stored
    arrays, which lets callers differentiate through derived parameters.
    """
    cfg = cfg or params.config
    if cfg is None:
        raise ConfigError("forward needs a NetworkConfig")
    batch = T.as_tensor(batch)
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels or batch.shape[2:] != cfg.image_size:
        raise ShapeError(f"batch shape {batch.shape} does not match network "
                         f"({cfg.in_channels}, {cfg.image_size})")
    emb = T.as_tensor(client_embedding)
    if emb.shape != (cfg.num_clients,):
        raise ShapeError(f"client embedding length {emb.shape} != ({cfg.num_clients},)")

    overrides = overrides or {}
    trainable = set(trainable)
    leaves, p = {}, {}
    for name, arr in params.arrays.items():
        if name in overrides:
            p[name] = overrides[name]
        elif name in trainable:
            leaves[name] = p[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            p[name] = Tensor(arr, name=name)

    h, skips = batch, []
    for s in range(1, cfg.n_stages + 1):
        h = _layer(f"enc{s}", lambda x: T.relu(_conv(p, f"enc{s}", x, stride=2)), h)
        h = _layer(f"adapter{s}", lambda x: _adapter(p, s, x), h)
        if use_cfe and s == cfg.cfe_stage:
            h = _layer("cfe", cfe.cfe_block, h, emb, p)
        skips.append(h)

    d = skips[-1]
    for s in range(cfg.n_stages - 1, 0, -1):
        up = T.concat([T.upsample_nearest(d, 2), skips[s - 1]], axis=1)
        d = _layer(f"dec{s}", lambda x: T.relu(_conv(p, f"dec{s}", x)), up)
    up = T.concat([T.upsample_nearest(d, 2), batch], axis=1)
    d = _layer("dec0", lambda x: T.relu(_conv(p, "dec0", x)), up)

    seg = _layer("seg_head", lambda x: _conv(p, "seg_head", x, padding=0), d)
    ev = _layer("eu_head", lambda x: _evidence(cfg.evidence_activation,
                                                _conv(p, "eu_head", x, padding=0)), d)
    return ForwardOutput(seg, ev, leaves)


# ---------------------------------------------------------------------------
# checkpoint container

PS_MAGIC = b"FEDEU-PS"
PS_VERSION = 1


def write_checkpoint(path, entries):
    """Write ``(name, group, array)`` triples in the FEDEU-PS container."""
    buf = bytearray(PS_MAGIC)
    buf += struct.pack("<H", PS_VERSION)
    for name, group, arr in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", int(group), arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != PS_MAGIC:
        raise FormatError(f"{path}: bad magic", 0)
    if len(data) < 10:
        raise FormatError(f"{path}: truncated header", len(data))
    (version,) = struct.unpack_from("<H", data, 8)
    if version != PS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)
    pos, entries = 10, []

    def need(n):
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated entry", pos)

    while pos < len(data):
        need(2)
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen + 2)
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: parameter name is not UTF-8", pos) from None
        pos += nlen
        group_at = pos
        group, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        pos += nbytes
        try:
            group = Group(group)
        except ValueError:
            raise FormatError(f"{path}: unknown group tag {group}", group_at) from None
        entries.append((name, group, arr.astype(np.float32)))
    return entries


def save_parameters(path, params: ParameterSet, psi=None):
    entries = [(n, params.groups[n], params.arrays[n]) for n in params]
    for n, arr in (psi or {}).items():
        entries.append(("psi/" + n, Group.PSI, arr))
    write_checkpoint(path, entries)


def load_parameters(path, config=None):
    """Inverse of :func:`save_parameters`; returns ``(params, psi)``."""
    arrays, groups, psi = {}, {}, {}
    for name, group, arr in read_checkpoint(path):
        if group == Group.PSI:
            psi[name.removeprefix("psi/")] = arr
        else:
            arrays[name], groups[name] = arr, group
    return ParameterSet(arrays, groups, config), psi
