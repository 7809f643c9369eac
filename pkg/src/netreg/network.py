"""Pyramidal velocity network optimized per image pair.

Each level runs at extent * 0.5^(N - i) and contains an encoder (channel
lift plus one 2x reduction), a stack of pre-activation residual blocks
at the reduced grid, a decoder conv, an upsampling step back to the
level grid, one skip connection from the encoder, and a 3-channel head
that is zero-initialized so a fresh network emits the zero velocity.

Finer levels see the moving image already warped by the upsampled
coarser field and predict a residual velocity that is composed on top.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (Tensor, add, conv3, conv3_transpose, leaky_relu, max_pool2,
                       trilinear_resize)
from .field import compose, exp_velocity, resize_volume, upsample_field, warp

DOWN_MODES = ("strided_conv", "max_pool")
UP_MODES = ("transpose_conv", "trilinear")


class CheckpointError(ValueError):
    """Malformed NPRM1 checkpoint file."""


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    residual_blocks_per_level: int = 4
    use_residual_connections: bool = True
    down_mode: str = "strided_conv"
    up_mode: str = "transpose_conv"
    activation_slope: float = 0.2
    seed: int = 0
    two_channel_input: bool = False

    def validate(self):
        if not 1 <= self.depth <= 4:
            raise ValueError(f"depth must be in 1..4, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.residual_blocks_per_level < 1:
            raise ValueError(f"residual_blocks_per_level must be >= 1, got {self.residual_blocks_per_level}")
        if self.down_mode not in DOWN_MODES:
            raise ValueError(f"down_mode must be one of {DOWN_MODES}, got {self.down_mode!r}")
        if self.up_mode not in UP_MODES:
            raise ValueError(f"up_mode must be one of {UP_MODES}, got {self.up_mode!r}")
        if not 0.0 < self.activation_slope < 1.0:
            raise ValueError(f"activation_slope must be in (0, 1), got {self.activation_slope}")
        return self


class Network:
    """Parameter store: one ordered dict of named Tensors per level."""

    def __init__(self, config: NetConfig, levels: list[dict[str, Tensor]]):
        self.config = config
        self.levels = levels
        self.level_frozen = [False] * config.depth

    def parameters(self) -> list[Tensor]:
        return [p for lvl in self.levels for p in lvl.values()]

    def level_parameters(self, level: int) -> list[Tensor]:
        return list(self.levels[level - 1].values())

    def named_parameters(self):
        for i, lvl in enumerate(self.levels, start=1):
            for name, p in lvl.items():
                yield f"level{i}.{name}", p


def _he(rng, shape, slope, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def build(config: NetConfig) -> Network:
    """Deterministic construction; the field head starts at exactly zero."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    c = config.base_channels
    slope = config.activation_slope
    levels = []
    for _ in range(config.depth):
        p: dict[str, Tensor] = {}
        p["enc_w"] = _he(rng, (c, 1, 3, 3, 3), slope)
        p["enc_b"] = _zeros((c,))
        if config.two_channel_input:
            p["enc_wf"] = _he(rng, (c, 1, 3, 3, 3), slope)
            p["enc_bf"] = _zeros((c,))
        if config.down_mode == "strided_conv":
            p["down_w"] = _he(rng, (c, c, 3, 3, 3), slope)
            p["down_b"] = _zeros((c,))
        for k in range(config.residual_blocks_per_level):
            p[f"block{k}_w1"] = _he(rng, (c, c, 3, 3, 3), slope)
            p[f"block{k}_b1"] = _zeros((c,))
            p[f"block{k}_w2"] = _he(rng, (c, c, 3, 3, 3), slope)
            p[f"block{k}_b2"] = _zeros((c,))
        p["dec_w"] = _he(rng, (c, c, 3, 3, 3), slope)
        p["dec_b"] = _zeros((c,))
        if config.up_mode == "transpose_conv":
            p["up_w"] = _he(rng, (c, c, 2, 2, 2), slope)
        p["head_w"] = _zeros((3, c, 3, 3, 3))
        p["head_b"] = _zeros((3,))
        levels.append(p)
    return Network(config, levels)


def parameter_census(net: Network) -> dict:
    per_level = [sum(p.data.size for p in lvl.values()) for lvl in net.levels]
    return {"total": int(sum(per_level)), "per_level": [int(n) for n in per_level]}


def _as_input_tensor(x, name) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        arr = np.asarray(x, dtype=np.float32)
        t = Tensor(arr[None] if arr.ndim == 3 else arr)
    if t.data.ndim != 4 or t.data.shape[0] != 1:
        raise ValueError(f"{name} must be a single-channel (1, Z, Y, X) volume, got {t.data.shape}")
    return t


def forward_level(net: Network, level: int, moving_at_level, coarser_field=None,
                  fixed_at_level=None) -> Tensor:
    """Run one pyramid level on the (already warped) moving image."""
    cfg = net.config
    if not 1 <= level <= cfg.depth:
        raise ValueError(f"level must be in 1..{cfg.depth}, got {level}")
    if (coarser_field is None) != (level == 1):
        raise ValueError("coarser_field must be given exactly for levels above 1")
    x = _as_input_tensor(moving_at_level, "moving_at_level")
    ext = x.data.shape[1:]
    if any(e % 2 for e in ext):
        raise ValueError(f"level extents must be even, got {ext}")
    if coarser_field is not None:
        cf = coarser_field.data if isinstance(coarser_field, Tensor) else np.asarray(coarser_field)
        if cf.shape[1:] != ext:
            raise ValueError(f"coarser_field extents {cf.shape[1:]} do not match input extents {ext}")
    if cfg.two_channel_input and fixed_at_level is None:
        raise ValueError("two_channel_input networks need fixed_at_level")

    p = net.levels[level - 1]
    slope = cfg.activation_slope
    e_pre = conv3(x, p["enc_w"], p["enc_b"])
    if cfg.two_channel_input:
        f = _as_input_tensor(fixed_at_level, "fixed_at_level")
        e_pre = add(e_pre, conv3(f, p["enc_wf"], p["enc_bf"]))
    e = leaky_relu(e_pre, slope)
    if cfg.down_mode == "strided_conv":
        h = leaky_relu(conv3(e, p["down_w"], p["down_b"], stride=2), slope)
    else:
        h = max_pool2(e)
    for k in range(cfg.residual_blocks_per_level):
        t = conv3(leaky_relu(h, slope), p[f"block{k}_w1"], p[f"block{k}_b1"])
        t = conv3(leaky_relu(t, slope), p[f"block{k}_w2"], p[f"block{k}_b2"])
        h = add(h, t) if cfg.use_residual_connections else t
    d = leaky_relu(conv3(h, p["dec_w"], p["dec_b"]), slope)
    if cfg.up_mode == "transpose_conv":
        u = conv3_transpose(d, p["up_w"])
    else:
        u = trilinear_resize(d, 2.0)
    s = add(u, e)
    return conv3(s, p["head_w"], p["head_b"])


def image_pyramid(vol: np.ndarray, depth: int) -> list[np.ndarray]:
    """Level images, finest last; each level halves the previous extents."""
    vol = np.asarray(vol, dtype=np.float32)
    levels = [vol]
    for _ in range(depth - 1):
        levels.append(resize_volume(levels[-1], 0.5))
    levels.reverse()
    return levels


def validate_extents(extents, depth: int):
    if any(e % 2 ** depth for e in extents):
        raise ValueError(f"extents {tuple(extents)} must be divisible by 2^depth = {2 ** depth}")


def pyramid_field(net: Network, moving, up_to_level: int | None = None,
                  squaring_steps: int = 7, moving_levels=None, fixed_levels=None) -> Tensor:
    """Coarse-to-fine field: refine the upsampled coarser field per level.

    Truncation via up_to_level returns the field on that level's grid.
    """
    cfg = net.config
    last = cfg.depth if up_to_level is None else up_to_level
    if not 1 <= last <= cfg.depth:
        raise ValueError(f"up_to_level must be in 1..{cfg.depth}, got {up_to_level}")
    if moving_levels is None:
        moving = np.asarray(moving, dtype=np.float32)
        validate_extents(moving.shape, cfg.depth)
        moving_levels = image_pyramid(moving, cfg.depth)
    if cfg.two_channel_input and fixed_levels is None:
        raise ValueError("two_channel_input networks need fixed_levels")

    def fx(i):
        return fixed_levels[i - 1] if cfg.two_channel_input else None

    v1 = forward_level(net, 1, moving_levels[0], None, fixed_at_level=fx(1))
    phi = exp_velocity(v1, squaring_steps)
    for i in range(2, last + 1):
        phi = upsample_field(phi)
        m_i = Tensor(np.asarray(moving_levels[i - 1], dtype=np.float32)[None])
        wm = warp(m_i, phi)
        v_i = forward_level(net, i, wm, phi, fixed_at_level=fx(i))
        phi = compose(phi, exp_velocity(v_i, squaring_steps))
    return phi


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_network(net: Network, path):
    """NPRM1: magic, config echo, float count, blank line, raw parameter data."""
    n = sum(p.data.size for p in net.parameters())
    with open(path, "wb") as fh:
        fh.write(b"NPRM1\n")
        fh.write(b"config: " + json.dumps(asdict(net.config), sort_keys=True).encode() + b"\n")
        fh.write(b"params: %d\n" % n)
        fh.write(b"\n")
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_network(path) -> Network:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != b"NPRM1\n":
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected NPRM1")
        cfg_line = fh.readline().decode()
        if not cfg_line.startswith("config: "):
            raise CheckpointError(f"{path}: missing config line")
        try:
            cfg = NetConfig(**json.loads(cfg_line[len("config: "):]))
        except (json.JSONDecodeError, TypeError) as exc:
            raise CheckpointError(f"{path}: unreadable config ({exc})") from exc
        cnt_line = fh.readline().decode()
        if not cnt_line.startswith("params: "):
            raise CheckpointError(f"{path}: missing params line")
        declared = int(cnt_line[len("params: "):])
        if fh.readline() not in (b"\n", b"\r\n"):
            raise CheckpointError(f"{path}: missing blank separator line")
        net = build(cfg)
        total = sum(p.data.size for p in net.parameters())
        if declared != total:
            raise CheckpointError(f"{path}: declares {declared} floats, config implies {total}")
        payload = fh.read()
    if len(payload) != 4 * total:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, expected {4 * total}")
    off = 0
    for p in net.parameters():
        nb = 4 * p.data.size
        p.data = np.frombuffer(payload[off:off + nb], dtype="<f4").reshape(p.data.shape).copy()
        off += nb
    return net
