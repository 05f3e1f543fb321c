"""Desk-scale networks: synthesis and registration U-Nets, plus ResNet-style
encoders for rigid registration and the discriminator.

Shared construction rules: double 3x3 convolutions on each resolution,
stride-2 kernel-2 convolutions between resolutions (transposed on the way
up), skip connections by channel concatenation. The synthesis network uses
group normalization and leaky ReLU (slope 0.01); the velocity-field U-Nets
use plain ReLU and no normalization, with zero-initialized output heads so
training starts from identity deformations. Encoders downsample once per
stage, end in global average pooling and a linear map, and the discriminator
additionally runs every weight through spectral normalization. The rigid
encoder gets two channels of [-1, 1] image coordinates so pooling does not
erase rotations.

``forward(..., frozen=True)`` applies a network with detached parameters;
the trainer uses it to keep discriminator gradients out of generator steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .deform import RigidParams


def default_groups(channels: int) -> int:
    # one group (the layer-norm special case) keeps cross-channel intensity
    # relations intact, which desk-scale synthesis needs; per-channel groups
    # wash them out and stall training
    del channels
    return 1


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv:
    def __init__(self, rng, cin, cout, k, stride=1, padding=0, zero_init=False, spectral=False):
        if zero_init:
            w = np.zeros((cout, cin, k, k))
            b = np.zeros(cout)
        else:
            w = _uniform(rng, (cout, cin, k, k), cin * k * k)
            b = _uniform(rng, (cout,), cin * k * k)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        self.stride, self.padding = stride, padding
        self.sn = T.PowerIterState() if spectral else None

    def forward(self, x, frozen=False):
        w = self.w if self.sn is None else T.spectral_normalize(self.w, self.sn, update=not frozen)
        b = self.b
        if frozen:
            w, b = w.detach(), b.detach()
        return T.conv2d(x, w, b, self.stride, self.padding)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]

    def states(self, prefix):
        return [(f"{prefix}.u", self.sn)] if self.sn is not None else []


class ConvTranspose:
    def __init__(self, rng, cin, cout, k=2, stride=2):
        self.w = Tensor(_uniform(rng, (cin, cout, k, k), cin * k * k), requires_grad=True)
        self.b = Tensor(_uniform(rng, (cout,), cin * k * k), requires_grad=True)
        self.stride = stride

    def forward(self, x, frozen=False):
        w, b = (self.w.detach(), self.b.detach()) if frozen else (self.w, self.b)
        return T.conv_transpose2d(x, w, b, self.stride)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]

    def states(self, prefix):
        return []


class DenseHead:
    def __init__(self, rng, nin, nout, zero_init=False, spectral=False):
        w = np.zeros((nout, nin)) if zero_init else _uniform(rng, (nout, nin), nin)
        b = np.zeros(nout) if zero_init else _uniform(rng, (nout,), nin)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(b, requires_grad=True)
        self.sn = T.PowerIterState() if spectral else None

    def forward(self, x, frozen=False):
        w = self.w if self.sn is None else T.spectral_normalize(self.w, self.sn, update=not frozen)
        b = self.b
        if frozen:
            w, b = w.detach(), b.detach()
        return T.dense(x, w, b)

    def named(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]

    def states(self, prefix):
        return [(f"{prefix}.u", self.sn)] if self.sn is not None else []


class GroupNorm:
    def __init__(self, channels, groups=None):
        self.groups = default_groups(channels) if groups is None else groups
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def forward(self, x, frozen=False):
        g, b = (self.gamma.detach(), self.beta.detach()) if frozen else (self.gamma, self.beta)
        return T.group_norm(x, self.groups, g, b)

    def named(self, prefix):
        return [(f"{prefix}.g", self.gamma), (f"{prefix}.b", self.beta)]

    def states(self, prefix):
        return []


def _act(x, activation, slope):
    return T.leaky_relu(x, slope if activation == "leaky" else 0.0)


class DoubleConv:
    """Two 3x3 convolutions with optional group norm, activation after each."""

    def __init__(self, rng, cin, cout, norm, activation, slope, spectral=False):
        self.c1 = Conv(rng, cin, cout, 3, 1, 1, spectral=spectral)
        self.c2 = Conv(rng, cout, cout, 3, 1, 1, spectral=spectral)
        self.n1 = GroupNorm(cout) if norm == "group" else None
        self.n2 = GroupNorm(cout) if norm == "group" else None
        self.activation, self.slope = activation, slope

    def forward(self, x, frozen=False):
        h = self.c1.forward(x, frozen)
        if self.n1 is not None:
            h = self.n1.forward(h, frozen)
        h = _act(h, self.activation, self.slope)
        h = self.c2.forward(h, frozen)
        if self.n2 is not None:
            h = self.n2.forward(h, frozen)
        return _act(h, self.activation, self.slope)

    def modules(self):
        return [m for m in (self.c1, self.n1, self.c2, self.n2) if m is not None]


@dataclass
class UnetSpec:
    in_channels: int
    out_channels: int
    encoder_features: list = field(default_factory=lambda: [16, 32, 64, 64])
    norm: str = "none"  # "group" | "none"
    activation: str = "relu"  # "leaky" | "relu"
    leaky_slope: float = 0.01
    zero_init_head: bool = False

    def __post_init__(self):
        if len(self.encoder_features) < 2:
            raise ValueError("U-Net needs at least two resolutions")


class UNet:
    """Encoder-decoder with skip connections; decoder features mirror the
    encoder in reverse order; output head is a 1x1 convolution."""

    def __init__(self, spec: UnetSpec, rng):
        self.spec = spec
        f = spec.encoder_features
        mk = lambda cin, cout: DoubleConv(rng, cin, cout, spec.norm, spec.activation, spec.leaky_slope)
        self.enc = [mk(spec.in_channels, f[0])]
        self.down = []
        for i in range(1, len(f)):
            self.down.append(Conv(rng, f[i - 1], f[i], 2, 2, 0))
            self.enc.append(mk(f[i], f[i]))
        self.up, self.dec = [], []
        for i in range(len(f) - 2, -1, -1):
            self.up.append(ConvTranspose(rng, f[i + 1], f[i]))
            self.dec.append(mk(2 * f[i], f[i]))
        self.head = Conv(rng, f[0], spec.out_channels, 1, 1, 0, zero_init=spec.zero_init_head)

    def forward(self, x: Tensor, frozen=False) -> Tensor:
        levels = len(self.spec.encoder_features)
        h, w = x.shape[1], x.shape[2]
        divisor = 2 ** (levels - 1)
        if h % divisor or w % divisor:
            raise ValueError(f"extents {(h, w)} not divisible by {divisor}")
        skips = []
        z = self.enc[0].forward(x, frozen)
        skips.append(z)
        for down, enc in zip(self.down, self.enc[1:]):
            z = enc.forward(down.forward(z, frozen), frozen)
            skips.append(z)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            z = up.forward(z, frozen)
            z = T.concat([z, skip])
            z = dec.forward(z, frozen)
        return self.head.forward(z, frozen)

    def _walk(self):
        mods = []
        for i, e in enumerate(self.enc):
            for j, m in enumerate(e.modules()):
                mods.append((f"enc{i}.{j}", m))
        for i, d in enumerate(self.down):
            mods.append((f"down{i}", d))
        for i, u in enumerate(self.up):
            mods.append((f"up{i}", u))
        for i, d in enumerate(self.dec):
            for j, m in enumerate(d.modules()):
                mods.append((f"dec{i}.{j}", m))
        mods.append(("head", self.head))
        return mods

    def named_params(self, prefix=""):
        return [(f"{prefix}{pn}", p) for name, m in self._walk() for pn, p in m.named(name)]

    def params(self):
        return [p for _, p in self.named_params()]

    def power_states(self, prefix=""):
        return [(f"{prefix}{sn}", s) for name, m in self._walk() for sn, s in m.states(name)]


class ResBlock:
    """Two 3x3 convolutions with an identity shortcut (1x1 projection when
    the channel count changes)."""

    def __init__(self, rng, cin, cout, activation, slope, spectral):
        self.c1 = Conv(rng, cin, cout, 3, 1, 1, spectral=spectral)
        self.c2 = Conv(rng, cout, cout, 3, 1, 1, spectral=spectral)
        self.proj = Conv(rng, cin, cout, 1, 1, 0, spectral=spectral) if cin != cout else None
        self.activation, self.slope = activation, slope

    def forward(self, x, frozen=False):
        h = _act(self.c1.forward(x, frozen), self.activation, self.slope)
        h = self.c2.forward(h, frozen)
        short = x if self.proj is None else self.proj.forward(x, frozen)
        return _act(h + short, self.activation, self.slope)

    def modules(self):
        return [m for m in (self.c1, self.c2, self.proj) if m is not None]


@lru_cache(maxsize=16)
def _coord_channels(h: int, w: int) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, h)[:, None] * np.ones((1, w))
    xs = np.ones((h, 1)) * np.linspace(-1.0, 1.0, w)[None, :]
    out = np.stack([ys, xs])
    out.setflags(write=False)
    return out


@dataclass
class EncoderSpec:
    in_channels: int
    encoder_features: list = field(default_factory=lambda: [16, 32, 64])
    out_dim: int = 1
    spectral_norm: bool = False
    coord_input: bool = False
    activation: str = "relu"
    leaky_slope: float = 0.01
    zero_init_head: bool = False

    def __post_init__(self):
        if self.out_dim < 1:
            raise ValueError("out_dim must be >= 1")


class Encoder:
    """Strided-downsampling residual encoder -> global average pool -> linear."""

    def __init__(self, spec: EncoderSpec, rng):
        self.spec = spec
        f = spec.encoder_features
        cin = spec.in_channels + (2 if spec.coord_input else 0)
        self.down, self.blocks = [], []
        prev = cin
        for feat in f:
            self.down.append(Conv(rng, prev, feat, 2, 2, 0, spectral=spec.spectral_norm))
            self.blocks.append(ResBlock(rng, feat, feat, spec.activation, spec.leaky_slope, spec.spectral_norm))
            prev = feat
        self.fc = DenseHead(rng, f[-1], spec.out_dim, zero_init=spec.zero_init_head, spectral=spec.spectral_norm)

    def forward(self, x: Tensor, frozen=False) -> Tensor:
        h, w = x.shape[1], x.shape[2]
        divisor = 2 ** len(self.spec.encoder_features)
        if h % divisor or w % divisor or h < divisor or w < divisor:
            raise ValueError(f"extents {(h, w)} unsupported for {len(self.down)} downsamplings")
        if self.spec.coord_input:
            x = T.concat([x, Tensor(_coord_channels(h, w))])
        z = x
        for down, block in zip(self.down, self.blocks):
            z = block.forward(down.forward(z, frozen), frozen)
        return self.fc.forward(T.global_avg_pool(z), frozen)

    def _walk(self):
        mods = []
        for i, (d, b) in enumerate(zip(self.down, self.blocks)):
            mods.append((f"down{i}", d))
            for j, m in enumerate(b.modules()):
                mods.append((f"block{i}.{j}", m))
        mods.append(("fc", self.fc))
        return mods

    def named_params(self, prefix=""):
        return [(f"{prefix}{pn}", p) for name, m in self._walk() for pn, p in m.named(name)]

    def params(self):
        return [p for _, p in self.named_params()]

    def power_states(self, prefix=""):
        return [(f"{prefix}{sn}", s) for name, m in self._walk() for sn, s in m.states(name)]


def rigid_head(raw: Tensor, max_angle: float, max_shift, center) -> RigidParams:
    """Squash a raw 3-vector into bounded rigid parameters; zero input gives
    the identity transform."""
    angle = max_angle * T.tanh(raw[0])
    sy, sx = (max_shift, max_shift) if np.isscalar(max_shift) else max_shift
    ty = sy * T.tanh(raw[1])
    tx = sx * T.tanh(raw[2])
    return RigidParams(angle, (ty, tx), center)


@dataclass
class ModelBundle:
    """Parameter sets for synthesis (f), cross-modality registration (h_rig,
    h_svf), intra-modality registration (g_svf) and the discriminator."""

    f: UNet
    h_rig: Encoder | None = None
    h_svf: UNet | None = None
    g_svf: UNet | None = None
    d: Encoder | None = None
    max_angle: float = math.pi / 6.0
    max_shift: float = 24.0

    def generator_networks(self):
        return [n for n in (self.f, self.h_rig, self.h_svf, self.g_svf) if n is not None]

    def generator_params(self):
        return [p for n in self.generator_networks() for p in n.params()]

    def disc_params(self):
        return [] if self.d is None else self.d.params()

    def named_params(self):
        out = []
        for name, net in (("f", self.f), ("h_rig", self.h_rig), ("h_svf", self.h_svf),
                          ("g_svf", self.g_svf), ("d", self.d)):
            if net is not None:
                out.extend(net.named_params(f"{name}."))
        return out

    def power_states(self):
        out = []
        for name, net in (("f", self.f), ("h_rig", self.h_rig), ("h_svf", self.h_svf),
                          ("g_svf", self.g_svf), ("d", self.d)):
            if net is not None:
                out.extend(net.power_states(f"{name}."))
        return out


def build_models(in_channels: int, label_channels: int, image_size: int, seed: int,
                 features_f=None, features_reg=None, features_rig=None, features_disc=None,
                 registration: bool = True, adversarial_mode: str | None = None) -> ModelBundle:
    """Instantiate the bundle with channel contracts matching the dataset.

    Registration networks see the raw input, the misaligned label and the
    label validity mask concatenated over channels; the intra-modality
    network additionally sees the inverse elastic displacement.
    """
    features_f = features_f or [16, 32, 64, 64]
    features_reg = features_reg or features_f
    features_rig = features_rig or [16, 32, 64]
    features_disc = features_disc or features_rig

    seeds = np.random.SeedSequence(seed).spawn(5)
    rngs = [np.random.default_rng(s) for s in seeds]

    f = UNet(UnetSpec(in_channels, label_channels, list(features_f), norm="group",
                      activation="leaky", leaky_slope=0.01), rngs[0])
    h_rig = h_svf = g_svf = d = None
    if registration:
        reg_in = in_channels + label_channels + 1
        h_rig = Encoder(EncoderSpec(reg_in, list(features_rig), out_dim=3, coord_input=True,
                                    activation="relu", zero_init_head=True), rngs[1])
        h_svf = UNet(UnetSpec(reg_in, 2, list(features_reg), norm="none", activation="relu",
                              zero_init_head=True), rngs[2])
        g_svf = UNet(UnetSpec(2 * label_channels + 2 + 1, 2, list(features_reg), norm="none",
                              activation="relu", zero_init_head=True), rngs[3])
    if adversarial_mode is not None:
        cond = adversarial_mode in ("eq-adv", "def-cond-adv")
        d_in = label_channels + (in_channels if cond else 0)
        d = Encoder(EncoderSpec(d_in, list(features_disc), out_dim=1, spectral_norm=True,
                                activation="leaky", leaky_slope=0.01), rngs[4])
    return ModelBundle(f=f, h_rig=h_rig, h_svf=h_svf, g_svf=g_svf, d=d,
                       max_angle=math.pi / 6.0, max_shift=0.25 * image_size)
