"""U-Net backbone with PET-driven attention-gated skip connections.

The attention subnetwork is a second U-Net of identical topology that maps
its input modality to a single nonnegative spatial map.  The map is resized
to each skip connection's resolution and multiplied into the skip features
before concatenation with the decoder stream.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .seeding import stream
from .tensor import (
    ShapeError,
    Tensor,
    ValidationError,
    bilinear_resize,
    broadcast_mul,
    concat_channels,
    conv2d,
    conv_transpose2d,
    maxpool2d,
    relu,
    softmax_channels,
)

BACKBONE_INPUTS = ("ct", "pet", "petct")
MSAM_INPUTS = ("off", "pet", "petct")


class ConfigError(ValueError):
    """Raised for invalid model/experiment configurations."""


@dataclass(frozen=True)
class ModelConfig:
    backbone_input: str = "ct"
    msam_input: str = "pet"
    depth: int = 3
    base_width: int = 16
    input_size: tuple = (64, 64)
    classes: int = 2

    def __post_init__(self):
        if self.backbone_input not in BACKBONE_INPUTS:
            raise ConfigError(f"backbone_input must be one of {BACKBONE_INPUTS}")
        if self.msam_input not in MSAM_INPUTS:
            raise ConfigError(f"msam_input must be one of {MSAM_INPUTS}")
        if self.classes != 2:
            raise ConfigError("only 2-class segmentation is supported")
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError("depth and base_width must be positive")
        h, w = self.input_size
        object.__setattr__(self, "input_size", (int(h), int(w)))
        step = 2 ** self.depth
        if h % step or w % step:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^depth = {step}"
            )

    @property
    def msam_enabled(self):
        return self.msam_input != "off"

    def backbone_channels(self):
        return 2 if self.backbone_input == "petct" else 1

    def msam_channels(self):
        return 2 if self.msam_input == "petct" else 1


class NetworkParams:
    """Ordered named parameter tensors plus the config that shaped them."""

    def __init__(self, config, tensors):
        self.config = config
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def count(self):
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype):
        """Copy with all parameters cast to dtype (for verification runs)."""
        return NetworkParams(
            self.config,
            [(n, Tensor(t.data.astype(dtype), requires_grad=True)) for n, t in self.items()],
        )


def _he_conv(rng, cout, cin, k):
    std = math.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(np.float32)


def _he_convt(rng, cin, cout):
    std = math.sqrt(2.0 / (cin * 4))
    return rng.normal(0.0, std, size=(cin, cout, 2, 2)).astype(np.float32)


def _init_unet(rng, prefix, in_ch, depth, base_width, out_ch):
    """He-normal weights, zero biases, in a fixed draw order."""
    widths = [base_width * (2 ** i) for i in range(depth + 1)]
    params = []

    def add_conv(name, cout, cin, k):
        params.append((f"{prefix}/{name}/w", Tensor(_he_conv(rng, cout, cin, k), requires_grad=True)))
        params.append((f"{prefix}/{name}/b", Tensor(np.zeros(cout, np.float32), requires_grad=True)))

    ch = in_ch
    for i in range(depth):
        add_conv(f"enc{i}/conv0", widths[i], ch, 3)
        add_conv(f"enc{i}/conv1", widths[i], widths[i], 3)
        ch = widths[i]
    add_conv("bottleneck/conv0", widths[depth], ch, 3)
    add_conv("bottleneck/conv1", widths[depth], widths[depth], 3)
    for i in reversed(range(depth)):
        params.append((f"{prefix}/up{i}/w", Tensor(_he_convt(rng, widths[i + 1], widths[i]), requires_grad=True)))
        params.append((f"{prefix}/up{i}/b", Tensor(np.zeros(widths[i], np.float32), requires_grad=True)))
        add_conv(f"dec{i}/conv0", widths[i], 2 * widths[i], 3)
        add_conv(f"dec{i}/conv1", widths[i], widths[i], 3)
    add_conv("head", out_ch, widths[0], 1)
    return params


def build_model(config, seed):
    """Deterministic parameter initialization for the configured network.

    The backbone and attention subnetworks draw from independent labeled
    sub-streams of the seed, so the backbone values do not depend on
    whether the attention subnetwork exists.
    """
    tensors = _init_unet(
        stream(seed, "init/backbone"),
        "backbone",
        config.backbone_channels(),
        config.depth,
        config.base_width,
        config.classes,
    )
    if config.msam_enabled:
        tensors += _init_unet(
            stream(seed, "init/msam"),
            "msam",
            config.msam_channels(),
            config.depth,
            config.base_width,
            1,
        )
    return NetworkParams(config, tensors)


def _unet_forward(params, prefix, x, depth, gate=None):
    skips = []
    h = x
    for i in range(depth):
        h = relu(conv2d(h, params[f"{prefix}/enc{i}/conv0/w"], params[f"{prefix}/enc{i}/conv0/b"]))
        h = relu(conv2d(h, params[f"{prefix}/enc{i}/conv1/w"], params[f"{prefix}/enc{i}/conv1/b"]))
        skips.append(h)
        h = maxpool2d(h)
    h = relu(conv2d(h, params[f"{prefix}/bottleneck/conv0/w"], params[f"{prefix}/bottleneck/conv0/b"]))
    h = relu(conv2d(h, params[f"{prefix}/bottleneck/conv1/w"], params[f"{prefix}/bottleneck/conv1/b"]))
    for i in reversed(range(depth)):
        h = conv_transpose2d(h, params[f"{prefix}/up{i}/w"], params[f"{prefix}/up{i}/b"])
        s = skips[i]
        if gate is not None:
            s = gate(s)
        h = concat_channels(s, h)
        h = relu(conv2d(h, params[f"{prefix}/dec{i}/conv0/w"], params[f"{prefix}/dec{i}/conv0/b"]))
        h = relu(conv2d(h, params[f"{prefix}/dec{i}/conv1/w"], params[f"{prefix}/dec{i}/conv1/b"]))
    return conv2d(h, params[f"{prefix}/head/w"], params[f"{prefix}/head/b"])


def gate_skip(skip, attn_map):
    """Scale skip features by the attention map resized to their resolution."""
    resized = bilinear_resize(attn_map, skip.shape[2:])
    return broadcast_mul(skip, resized)


def msam_forward(params, msam_in):
    """Nonnegative single-channel attention map at full input resolution."""
    config = params.config
    if not config.msam_enabled:
        raise ConfigError("attention subnetwork is disabled in this configuration")
    msam_in = T._as_tensor(msam_in)
    expect = config.msam_channels()
    if msam_in.ndim != 4 or msam_in.shape[1] != expect:
        raise ShapeError(
            f"attention input must be [N,{expect},H,W], got {msam_in.shape}"
        )
    return relu(_unet_forward(params, "msam", msam_in, config.depth))


# Scoped attention override: tests inject a fixed map in place of the
# attention subnetwork output to probe the gating path in isolation.
_ATTENTION_OVERRIDE = []


@contextlib.contextmanager
def inject_attention_override(attn_map):
    attn_map = T._as_tensor(attn_map)
    if attn_map.ndim != 4 or attn_map.shape[1] != 1:
        raise ShapeError(f"override map must be [N,1,H,W], got {attn_map.shape}")
    _ATTENTION_OVERRIDE.append(attn_map)
    try:
        yield attn_map
    finally:
        _ATTENTION_OVERRIDE.pop()


def _assemble(config, kind, pet, ct):
    if kind == "ct":
        return ct
    if kind == "pet":
        return pet
    return concat_channels(pet, ct)  # PET first


def forward_graph(params, pet, ct):
    """Differentiable forward pass.

    Returns (logits Tensor [N,2,H,W], attention Tensor [N,1,H,W] or None).
    """
    config = params.config
    pet = T._as_tensor(pet)
    ct = T._as_tensor(ct)
    if pet.shape != ct.shape:
        raise ValidationError(f"PET shape {pet.shape} != CT shape {ct.shape}")
    if pet.ndim != 4 or pet.shape[1] != 1:
        raise ShapeError(f"modality inputs must be [N,1,H,W], got {pet.shape}")

    attention = None
    gate = None
    if config.msam_enabled:
        if _ATTENTION_OVERRIDE:
            attention = _ATTENTION_OVERRIDE[-1]
            if attention.shape[0] != pet.shape[0] or attention.shape[2:] != pet.shape[2:]:
                raise ShapeError(
                    f"override map shape {attention.shape} incompatible with input {pet.shape}"
                )
        else:
            attention = msam_forward(params, _assemble(config, config.msam_input, pet, ct))
        amap = attention
        gate = lambda skip: gate_skip(skip, amap)
    elif _ATTENTION_OVERRIDE:
        raise ConfigError("attention override supplied but the attention subnetwork is disabled")

    logits = _unet_forward(params, "backbone", _assemble(config, config.backbone_input, pet, ct), config.depth, gate)
    return logits, attention


def model_forward(params, pet, ct):
    """Per-pixel class probabilities (plus the attention map when enabled)."""
    logits, attention = forward_graph(params, pet, ct)
    probs = softmax_channels(logits.data)
    return probs, None if attention is None else attention.data


def predict_mask(probs):
    """Tumor label where the tumor-class probability exceeds 0.5; ties -> background."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"expected probabilities [N,2,H,W], got {probs.shape}")
    return (probs[:, 1:2] > 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"MSAMCKPT"
_VERSION = 1


class CheckpointError(IOError):
    """Raised for unreadable, corrupt, or incompatible checkpoint files."""


def _pack_array(buf, arr):
    data = np.ascontiguousarray(arr, dtype="<f4")
    buf += struct.pack("<B", data.ndim)
    for d in data.shape:
        buf += struct.pack("<I", d)
    buf += data.tobytes()


def save_checkpoint(path, params, meta=None, optimizer_state=None):
    """Versioned binary container: config, f32 parameter tensors, optional
    optimizer accumulators, CRC-32 trailer."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _VERSION)
    header = json.dumps(
        {"model": asdict(params.config), "meta": meta or {}}, sort_keys=True
    ).encode()
    buf += struct.pack("<I", len(header))
    buf += header
    buf += struct.pack("<I", len(params.tensors))
    for name, t in params.items():
        nb = name.encode()
        buf += struct.pack("<H", len(nb))
        buf += nb
        _pack_array(buf, t.data)
    if optimizer_state is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1)
        buf += struct.pack("<Q", optimizer_state["t"])
        for name in params.names():
            _pack_array(buf, optimizer_state["m"][name])
            _pack_array(buf, optimizer_state["v"][name])
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    with open(path, "wb") as f:
        f.write(bytes(buf))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def array(self):
        ndim = self.unpack("<B")
        shape = tuple(self.unpack("<I") for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()


def load_checkpoint(path):
    """Returns (NetworkParams, meta dict, optimizer_state or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    r = _Reader(body)
    r.take(len(_MAGIC))
    version = r.unpack("<I")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(r.take(r.unpack("<I")).decode())
    model_kwargs = dict(header["model"])
    model_kwargs["input_size"] = tuple(model_kwargs["input_size"])
    config = ModelConfig(**model_kwargs)
    nparams = r.unpack("<I")
    tensors = []
    for _ in range(nparams):
        name = r.take(r.unpack("<H")).decode()
        tensors.append((name, Tensor(r.array(), requires_grad=True)))
    params = NetworkParams(config, tensors)
    optimizer_state = None
    if r.unpack("<B"):
        t_step = r.unpack("<Q")
        m, v = {}, {}
        for name, _ in tensors:
            m[name] = r.array()
            v[name] = r.array()
        optimizer_state = {"t": t_step, "m": m, "v": v}
    return params, header["meta"], optimizer_state
