"""Residual classifier with grouped 3x3 convolutions, squeeze-and-excitation and h-swish."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .nn import functional as F
from .nn.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, ReLU,
                        Sigmoid, make_activation)


@dataclass
class ModelConfig:
    input_px: int = 64
    in_channels: int = 3
    stem_width: int = 16
    stage_widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    blocks_per_stage: List[int] = field(default_factory=lambda: [2, 2, 2])
    groups: int = 4
    se_reduction: int = 4
    num_classes: int = 18
    activation: str = "h-swish"
    use_se: bool = True

    def validate(self) -> "ModelConfig":
        if len(self.stage_widths) != len(self.blocks_per_stage) or not self.stage_widths:
            raise ValueError("stage_widths and blocks_per_stage must be non-empty and equal length")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ValueError("every stage needs at least one block")
        for w in self.stage_widths:
            inner = w // 2
            if w % 2 or w % self.groups or inner % self.groups:
                raise ValueError(f"stage width {w} (inner {inner}) not divisible by groups={self.groups}")
            if w % self.se_reduction or inner % self.se_reduction:
                raise ValueError(f"stage width {w} (inner {inner}) not divisible by "
                                 f"se_reduction={self.se_reduction}")
        if self.num_classes < 2 or self.input_px < 1 or self.in_channels < 1:
            raise ValueError("num_classes >= 2, input_px >= 1 and in_channels >= 1 required")
        make_activation(self.activation)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def paper_scale_config() -> ModelConfig:
    """240 px input with ResNet-50-like stage widths."""
    return ModelConfig(input_px=240, stem_width=64, stage_widths=[256, 512, 1024, 2048],
                       blocks_per_stage=[3, 4, 6, 3], groups=32, se_reduction=16)


class SEBlock(Layer):
    """Channel attention: pool -> FC(C -> C/r) -> ReLU -> FC(C/r -> C) -> sigmoid -> rescale."""

    def __init__(self, channels, reduction, rng=None, dtype=np.float32, enabled=True):
        if channels % reduction:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.pool = GlobalAvgPool()
        self.fc1 = Linear(channels, channels // reduction, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.fc2 = Linear(channels // reduction, channels, rng=rng, dtype=dtype)
        self.gate = Sigmoid()
        self.enabled = enabled
        self._cache = None
        self.last_scale = None

    def forward(self, x):
        if not self.enabled:
            return x
        s = self.gate.forward(self.fc2.forward(self.relu.forward(self.fc1.forward(
            self.pool.forward(x)))))
        self.last_scale = s
        self._cache = (x, s)
        return x * s[:, :, None, None]

    def backward(self, dout):
        if not self.enabled:
            return dout
        x, s = self._cache
        dx = dout * s[:, :, None, None]
        ds = (dout * x).sum(axis=(2, 3))
        dpool = self.fc1.backward(self.relu.backward(self.fc2.backward(self.gate.backward(ds))))
        return dx + self.pool.backward(dpool)


class Bottleneck(Layer):
    """1x1 reduce -> grouped 3x3 -> SE -> 1x1 expand, plus identity or projection shortcut."""

    def __init__(self, c_in, width, stride, groups, se_reduction, activation="h-swish",
                 rng=None, dtype=np.float32, use_se=True):
        rng = np.random.default_rng(rng)
        inner = width // 2
        self.conv1 = Conv2d(c_in, inner, 1, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(inner, dtype=dtype)
        self.act1 = make_activation(activation)
        self.conv2 = Conv2d(inner, inner, 3, stride=stride, groups=groups, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(inner, dtype=dtype)
        self.act2 = make_activation(activation)
        self.se = SEBlock(inner, se_reduction, rng=rng, dtype=dtype, enabled=use_se)
        self.conv3 = Conv2d(inner, width, 1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(width, dtype=dtype)
        if stride != 1 or c_in != width:
            self.proj = Conv2d(c_in, width, 1, stride=stride, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(width, dtype=dtype)
        else:
            self.proj = self.proj_bn = None
        self.act_out = make_activation(activation)

    @property
    def _main(self):
        return [self.conv1, self.bn1, self.act1, self.conv2, self.bn2, self.act2,
                self.se, self.conv3, self.bn3]

    def forward(self, x):
        out = x
        for layer in self._main:
            out = layer.forward(out)
        short = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return self.act_out.forward(F.residual_add(out, short))

    def backward(self, dout):
        d = self.act_out.backward(dout)
        dmain = d
        for layer in reversed(self._main):
            dmain = layer.backward(dmain)
        if self.proj is None:
            return dmain + d
        return dmain + self.proj.backward(self.proj_bn.backward(d))


class GSResNet(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.stem_conv = Conv2d(cfg.in_channels, cfg.stem_width, 3, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(cfg.stem_width, dtype=dtype)
        self.stem_act = make_activation(cfg.activation)
        self.blocks = []
        c = cfg.stem_width
        for s, (width, n_blocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
            for b in range(n_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append(Bottleneck(c, width, stride, cfg.groups, cfg.se_reduction,
                                              cfg.activation, rng=rng, dtype=dtype,
                                              use_se=cfg.use_se))
                c = width
        self.pool = GlobalAvgPool()
        self.head = Linear(c, cfg.num_classes, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return self.head.weight.value.dtype

    def forward(self, x):
        cfg = self.config
        expect = (cfg.in_channels, cfg.input_px, cfg.input_px)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ValueError(f"expected input (N, {expect[0]}, {expect[1]}, {expect[2]}), "
                             f"got {x.shape}")
        out = self.stem_act.forward(self.stem_bn.forward(self.stem_conv.forward(x)))
        for block in self.blocks:
            out = block.forward(out)
        return self.head.forward(self.pool.forward(out))

    def backward(self, dlogits):
        d = self.pool.backward(self.head.backward(dlogits))
        for block in reversed(self.blocks):
            d = block.backward(d)
        return self.stem_conv.backward(self.stem_bn.backward(self.stem_act.backward(d)))

    def state_dict(self) -> dict:
        """Parameters then BN running statistics, keyed by stable dotted ids."""
        state = {name: p.value for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.value.shape}")
            p.value = np.array(state[name], dtype=p.value.dtype)
            p.zero_grad()
        for name, buf in buffers.items():
            np.copyto(buf, state[name])


def build_model(cfg: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32) -> GSResNet:
    return GSResNet(cfg or ModelConfig(), seed=seed, dtype=dtype)


def count_parameters(model: Layer) -> int:
    return sum(p.size for p in model.parameters())


def closed_form_parameter_count(cfg: ModelConfig) -> int:
    """Parameter count from layer shapes alone (weights + biases + BN affine)."""
    def conv(c_in, c_out, k, g=1):
        return c_out * (c_in // g) * k * k + c_out

    def bn(c):
        return 2 * c

    def fc(i, o):
        return i * o + o

    total = conv(cfg.in_channels, cfg.stem_width, 3) + bn(cfg.stem_width)
    c = cfg.stem_width
    for s, (width, n_blocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage)):
        inner = width // 2
        for b in range(n_blocks):
            stride = 2 if (s > 0 and b == 0) else 1
            total += conv(c, inner, 1) + bn(inner)
            total += conv(inner, inner, 3, cfg.groups) + bn(inner)
            r = inner // cfg.se_reduction
            total += fc(inner, r) + fc(r, inner)
            total += conv(inner, width, 1) + bn(width)
            if stride != 1 or c != width:
                total += conv(c, width, 1) + bn(width)
            c = width
    return total + fc(c, cfg.num_classes)
