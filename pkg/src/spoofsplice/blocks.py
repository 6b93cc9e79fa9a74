"""Composite blocks: squeeze-and-excitation, SE-Res2Net and Conformer.

Blocks are plain functions over a flat parameter mapping.  ``init_*``
functions create the parameters (He-uniform weights, zero biases, unit
norm scales) under a name prefix, and BN running statistics live in a
separate ``buffers`` mapping that train-mode forwards update in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = Dict[str, Tensor]
Buffers = Dict[str, np.ndarray]


class BlockConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeRes2NetBlockConfig:
    in_channels: int
    mid_channels: int  # width of each of the `scale` groups
    out_channels: int
    scale: int = 4
    se_reduction: int = 16
    stride: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.scale < 2:
            raise BlockConfigError("Res2Net scale must be >= 2")
        if min(self.in_channels, self.mid_channels, self.out_channels) < 1:
            raise BlockConfigError("channel counts must be positive")
        if self.out_channels % self.se_reduction:
            raise BlockConfigError(
                f"se_reduction {self.se_reduction} must divide out_channels {self.out_channels}")

    @property
    def width(self) -> int:
        return self.mid_channels * self.scale

    @property
    def strided(self) -> bool:
        return tuple(self.stride) != (1, 1)

    @property
    def projection(self) -> bool:
        return self.strided or self.in_channels != self.out_channels


@dataclass(frozen=True)
class ConformerConfig:
    d_model: int = 256
    heads: int = 32
    head_size: int = 16
    conv_kernel: int = 32
    dropout: float = 0.2
    ffn_residual_factor: float = 0.5
    ffn_expansion: int = 2

    def __post_init__(self):
        if self.conv_kernel < 1:
            raise BlockConfigError("conv_kernel must be >= 1")
        if not 0 <= self.dropout < 1:
            raise BlockConfigError("dropout must be in [0, 1)")
        if not 0 < self.ffn_residual_factor <= 1:
            raise BlockConfigError("ffn_residual_factor must be in (0, 1]")


# -- parameter initialization -------------------------------------------

@dataclass
class ParamFactory:
    rng: np.random.Generator
    dtype: type = np.float32
    params: Params = field(default_factory=dict)
    buffers: Buffers = field(default_factory=dict)

    def _add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True, name=name)

    def he_uniform(self, name, shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        self._add(name, self.rng.uniform(-limit, limit, size=shape))

    def zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def ones(self, name, shape):
        self._add(name, np.ones(shape))

    def conv(self, name, kh, kw, cin, cout):
        self.he_uniform(name, (kh, kw, cin, cout), kh * kw * cin)

    def dense(self, name, d_in, d_out, bias=True):
        self.he_uniform(name + ".w", (d_in, d_out), d_in)
        if bias:
            self.zeros(name + ".b", (d_out,))

    def batch_norm(self, name, c):
        self.ones(name + ".gamma", (c,))
        self.zeros(name + ".beta", (c,))
        self.buffers[name + ".mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[name + ".var"] = np.ones(c, dtype=self.dtype)

    def layer_norm(self, name, d):
        self.ones(name + ".gamma", (d,))
        self.zeros(name + ".beta", (d,))


def init_se(f: ParamFactory, prefix: str, channels: int, reduction: int) -> None:
    f.dense(prefix + ".fc1", channels, channels // reduction)
    f.dense(prefix + ".fc2", channels // reduction, channels)


def init_se_res2net(f: ParamFactory, prefix: str, cfg: SeRes2NetBlockConfig) -> None:
    f.conv(prefix + ".conv1", 1, 1, cfg.in_channels, cfg.width)
    f.batch_norm(prefix + ".bn1", cfg.width)
    first = 1 if cfg.strided else 2
    for i in range(first, cfg.scale + 1):
        f.conv(f"{prefix}.group{i}.conv", 3, 3, cfg.mid_channels, cfg.mid_channels)
        f.batch_norm(f"{prefix}.group{i}.bn", cfg.mid_channels)
    f.conv(prefix + ".conv3", 1, 1, cfg.width, cfg.out_channels)
    f.batch_norm(prefix + ".bn3", cfg.out_channels)
    init_se(f, prefix + ".se", cfg.out_channels, cfg.se_reduction)
    if cfg.projection:
        f.conv(prefix + ".shortcut.conv", 1, 1, cfg.in_channels, cfg.out_channels)
        f.batch_norm(prefix + ".shortcut.bn", cfg.out_channels)


def init_ffn(f: ParamFactory, prefix: str, cfg: ConformerConfig) -> None:
    f.layer_norm(prefix + ".ln", cfg.d_model)
    f.dense(prefix + ".fc1", cfg.d_model, cfg.ffn_expansion * cfg.d_model)
    f.dense(prefix + ".fc2", cfg.ffn_expansion * cfg.d_model, cfg.d_model)


def init_conformer(f: ParamFactory, prefix: str, cfg: ConformerConfig) -> None:
    d, inner = cfg.d_model, cfg.heads * cfg.head_size
    init_ffn(f, prefix + ".ffn1", cfg)
    f.layer_norm(prefix + ".mhsa.ln", d)
    for proj in ("q", "k", "v"):
        f.dense(f"{prefix}.mhsa.{proj}", d, inner)
    f.dense(prefix + ".mhsa.o", inner, d)
    f.layer_norm(prefix + ".conv.ln", d)
    f.dense(prefix + ".conv.pw1", d, 2 * d)
    f.he_uniform(prefix + ".conv.dw", (cfg.conv_kernel, d), cfg.conv_kernel)
    f.batch_norm(prefix + ".conv.bn", d)
    f.dense(prefix + ".conv.pw2", d, d)
    init_ffn(f, prefix + ".ffn2", cfg)
    f.layer_norm(prefix + ".ln_out", d)


# -- forward -------------------------------------------------------------

def _bn(x, p, b, name, mode):
    return ad.batch_norm(x, p[name + ".gamma"], p[name + ".beta"],
                         b[name + ".mean"], b[name + ".var"], mode)


def _ln(x, p, name):
    return ad.layer_norm(x, p[name + ".gamma"], p[name + ".beta"])


def _dense(x, p, name):
    return ad.dense(x, p[name + ".w"], p[name + ".b"])


def se_block(x: Tensor, p: Params, prefix: str, return_scale: bool = False):
    """Rescale channels of ``x[B,H,W,C]`` by a pooled sigmoid gate."""
    z = ad.global_avg_pool_2d(x)
    gate = ad.sigmoid(_dense(ad.relu(_dense(z, p, prefix + ".fc1")), p, prefix + ".fc2"))
    bsz, c = gate.shape
    out = ad.mul(x, ad.reshape(gate, (bsz, 1, 1, c)))
    return (out, gate) if return_scale else out


def se_res2net_block(x: Tensor, p: Params, b: Buffers, prefix: str, cfg: SeRes2NetBlockConfig,
                     mode: str = "train") -> Tensor:
    if x.shape[-1] != cfg.in_channels:
        raise ad.ShapeError(f"{prefix}: expected {cfg.in_channels} channels, got {x.shape[-1]}")
    h = ad.relu(_bn(ad.conv2d(x, p[prefix + ".conv1"]), p, b, prefix + ".bn1", mode))
    groups = ad.split(h, cfg.scale, axis=-1)

    def group_conv(i, inp):
        y = ad.conv2d(inp, p[f"{prefix}.group{i}.conv"], stride=cfg.stride)
        return ad.relu(_bn(y, p, b, f"{prefix}.group{i}.bn", mode))

    if cfg.strided:
        # spatial sizes differ after striding, so groups cannot be chained
        ys = [group_conv(i, g) for i, g in enumerate(groups, 1)]
    else:
        ys = [groups[0]]
        for i in range(2, cfg.scale + 1):
            ys.append(group_conv(i, ad.add(groups[i - 1], ys[-1])))
    h = _bn(ad.conv2d(ad.concat(ys, axis=-1), p[prefix + ".conv3"]), p, b, prefix + ".bn3", mode)
    h = se_block(h, p, prefix + ".se")
    if cfg.projection:
        short = ad.conv2d(x, p[prefix + ".shortcut.conv"], stride=cfg.stride)
        short = _bn(short, p, b, prefix + ".shortcut.bn", mode)
    else:
        short = x
    return ad.relu(ad.add(h, short))


def _dropout(x, cfg, mode, rng):
    if mode != "train" or cfg.dropout == 0:
        return x
    return ad.dropout(x, cfg.dropout, mode, int(rng.integers(2 ** 63)))


def feed_forward(x: Tensor, p: Params, prefix: str, cfg: ConformerConfig, mode: str,
                 rng: Optional[np.random.Generator]) -> Tensor:
    h = ad.swish(_dense(_ln(x, p, prefix + ".ln"), p, prefix + ".fc1"))
    h = _dropout(h, cfg, mode, rng)
    return _dropout(_dense(h, p, prefix + ".fc2"), cfg, mode, rng)


def conv_module(x: Tensor, p: Params, b: Buffers, prefix: str, cfg: ConformerConfig, mode: str,
                rng: Optional[np.random.Generator]) -> Tensor:
    h = ad.glu(_dense(_ln(x, p, prefix + ".ln"), p, prefix + ".pw1"))
    h = ad.depthwise_conv1d(h, p[prefix + ".dw"])
    h = ad.swish(_bn(h, p, b, prefix + ".bn", mode))
    return _dropout(_dense(h, p, prefix + ".pw2"), cfg, mode, rng)


def attention(x: Tensor, p: Params, prefix: str, cfg: ConformerConfig) -> Tensor:
    n = prefix
    return ad.mhsa(_ln(x, p, n + ".ln"), cfg.heads, cfg.head_size,
                   p[n + ".q.w"], p[n + ".q.b"], p[n + ".k.w"], p[n + ".k.b"],
                   p[n + ".v.w"], p[n + ".v.b"], p[n + ".o.w"], p[n + ".o.b"])


def conformer_block(x: Tensor, p: Params, b: Buffers, prefix: str, cfg: ConformerConfig,
                    mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Macaron Conformer block over ``x[B,T,d_model]``.

    ``rng`` supplies dropout seeds in train mode.
    """
    if x.shape[-1] != cfg.d_model:
        raise ad.ShapeError(f"{prefix}: expected d_model={cfg.d_model}, got {x.shape[-1]}")
    if rng is None:
        rng = np.random.default_rng(0)
    half = cfg.ffn_residual_factor
    y = ad.add(x, ad.scale(feed_forward(x, p, prefix + ".ffn1", cfg, mode, rng), half))
    y = ad.add(y, attention(y, p, prefix + ".mhsa", cfg))
    y = ad.add(y, conv_module(y, p, b, prefix + ".conv", cfg, mode, rng))
    y = ad.add(y, ad.scale(feed_forward(y, p, prefix + ".ffn2", cfg, mode, rng), half))
    return _ln(y, p, prefix + ".ln_out")
