"""Parameterized building blocks: conv/BN/linear, the MSDA block and ConvLSTM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from smanet import ops
from smanet.ops import ConvSpec
from smanet.tensor import ConfigError, ShapeError, Tensor

DILATION_RATES = (1, 2, 3)


class Module:
    """Attribute-scanning container with dot-separated parameter names."""

    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(prefix + name + "."))
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.named_parameters().values()]))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dilation=1,
                 groups=1, bias=True):
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"groups={groups} must divide in={in_ch} and out={out_ch}")
        self.spec = ConvSpec(stride, padding, dilation, groups)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = _uniform(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in)
        if bias:
            self.bias = _zeros((out_ch,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, getattr(self, "bias", None), self.spec)


class Conv1d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, padding=0):
        self.spec = ConvSpec(1, padding, 1, 1)
        self.weight = _uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel)
        self.bias = _zeros((out_ch,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, self.spec)


class Linear(Module):
    def __init__(self, in_features, out_features, rng):
        self.weight = _uniform(rng, (out_features, in_features), in_features)
        self.bias = _zeros((out_features,))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = _zeros((channels,))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, dilation=1, groups=1):
        # no conv bias: train-mode BN cancels it and it would never receive gradient
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, stride, padding, dilation, groups, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


# ---------------------------------------------------------------- MSDA

@dataclass
class MsdaConfig:
    in_channels: int
    out_channels: int
    se_reduction: int = 4
    dilation_rates: tuple = DILATION_RATES

    def __post_init__(self):
        if tuple(self.dilation_rates) != DILATION_RATES:
            raise ConfigError(f"dilation rates are fixed to {DILATION_RATES}")
        if self.se_reduction < 1 or self.se_reduction > self.out_channels:
            raise ConfigError(f"se_reduction {self.se_reduction} outside [1, {self.out_channels}]")
        if self.out_channels % self.se_reduction:
            raise ConfigError(f"se_reduction {self.se_reduction} does not divide {self.out_channels}")


class DepthwiseBranch(Module):
    """3x3 depthwise atrous convolution with padding = dilation, then BN + ReLU."""

    def __init__(self, channels, dilation, rng):
        self.depthwise = Conv2d(channels, channels, 3, rng, padding=dilation, dilation=dilation,
                                groups=channels, bias=False)
        self.bn = BatchNorm2d(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.depthwise(x)))


class SEGate(Module):
    """Squeeze-and-excitation: GAP -> FC -> ReLU -> FC -> sigmoid channel scale."""

    def __init__(self, channels, reduction, rng):
        if channels % reduction:
            raise ConfigError(f"se_reduction {reduction} does not divide {channels} channels")
        self.fc1 = Linear(channels, channels // reduction, rng)
        self.fc2 = Linear(channels // reduction, channels, rng)

    def scales(self, u: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.relu(self.fc1(ops.global_avg_pool(u)))))

    def __call__(self, u: Tensor) -> Tensor:
        return ops.channel_scale(u, self.scales(u))


class MSDABlock(Module):
    """Pointwise conv, three chained depthwise atrous branches, summed and SE-gated.

    Branch i sees the pointwise output x plus the previous branch output:
    y1 = f1(x), y2 = f2(x + y1), y3 = f3(x + y2).
    """

    def __init__(self, config: MsdaConfig, rng: np.random.Generator):
        self.config = config
        c = config.out_channels
        self.pointwise = Conv2d(config.in_channels, c, 1, rng, bias=False)
        self.pointwise_bn = BatchNorm2d(c)
        self.branch1 = DepthwiseBranch(c, 1, rng)
        self.branch2 = DepthwiseBranch(c, 2, rng)
        self.branch3 = DepthwiseBranch(c, 3, rng)
        self.se = SEGate(c, config.se_reduction, rng)

    def pointwise_features(self, inp: Tensor) -> Tensor:
        return ops.relu(self.pointwise_bn(self.pointwise(inp)))

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        y1 = self.branch1(x)
        y2 = self.branch2(ops.add(x, y1))
        y3 = self.branch3(ops.add(x, y2))
        return y1, y2, y3

    def __call__(self, inp: Tensor) -> Tensor:
        if inp.ndim != 4 or inp.dims[1] != self.config.in_channels:
            raise ShapeError(f"MSDA block expects [N,{self.config.in_channels},H,W], got {inp.dims}")
        x = self.pointwise_features(inp)
        u = ops.add_n(self.branches(x))
        return self.se(u)


# ---------------------------------------------------------------- ConvLSTM

@dataclass
class ConvLstmConfig:
    input_channels: int = 64
    hidden_channels: int = 32
    kernel_size: int = 3
    num_layers: int = 2

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"ConvLSTM kernel_size must be odd, got {self.kernel_size}")
        if min(self.input_channels, self.hidden_channels, self.num_layers) < 1:
            raise ConfigError(f"invalid ConvLSTM config {self}")


@dataclass
class ConvLstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.dims != self.cell.dims:
            raise ShapeError(f"hidden {self.hidden.dims} and cell {self.cell.dims} differ")


class ConvLSTMCell(Module):
    """One ConvLSTM layer; the four gates (i, f, o, g) come from a single convolution
    over the channel concatenation of input and previous hidden state."""

    def __init__(self, in_ch, hidden_ch, kernel, rng, forget_bias=1.0):
        self.hidden_channels = hidden_ch
        self.gates = Conv2d(in_ch + hidden_ch, 4 * hidden_ch, kernel, rng, padding=kernel // 2)
        self.gates.bias.data[hidden_ch:2 * hidden_ch] = forget_bias

    def initial_state(self, x: Tensor) -> ConvLstmState:
        n, _, h, w = x.dims
        zeros = np.zeros((n, self.hidden_channels, h, w), dtype=x.data.dtype)
        return ConvLstmState(Tensor(zeros, dtype=zeros.dtype), Tensor(zeros, dtype=zeros.dtype))

    def step(self, x: Tensor, state: ConvLstmState) -> ConvLstmState:
        if x.dims[0] != state.hidden.dims[0] or x.dims[2:] != state.hidden.dims[2:]:
            raise ShapeError(f"ConvLSTM input {x.dims} does not match state {state.hidden.dims}")
        ch = self.hidden_channels
        z = self.gates(ops.concat([x, state.hidden], axis=1))
        i = ops.sigmoid(ops.slice_axis(z, 1, 0, ch))
        f = ops.sigmoid(ops.slice_axis(z, 1, ch, 2 * ch))
        o = ops.sigmoid(ops.slice_axis(z, 1, 2 * ch, 3 * ch))
        g = ops.tanh(ops.slice_axis(z, 1, 3 * ch, 4 * ch))
        cell = ops.add(ops.mul(f, state.cell), ops.mul(i, g))
        hidden = ops.mul(o, ops.tanh(cell))
        return ConvLstmState(hidden, cell)

    __call__ = step


class ConvLSTM(Module):
    def __init__(self, config: ConvLstmConfig, rng: np.random.Generator):
        self.config = config
        for k in range(config.num_layers):
            in_ch = config.input_channels if k == 0 else config.hidden_channels
            setattr(self, f"layer{k + 1}",
                    ConvLSTMCell(in_ch, config.hidden_channels, config.kernel_size, rng))

    def cells(self) -> list[ConvLSTMCell]:
        return [getattr(self, f"layer{k + 1}") for k in range(self.config.num_layers)]

    def unroll(self, sequence: list[Tensor]) -> list[Tensor]:
        """Top-layer hidden states H_1..H_T, starting from zero states."""
        if not sequence:
            raise ValueError("ConvLSTM needs at least one time step")
        for x in sequence[1:]:
            if x.dims != sequence[0].dims:
                raise ShapeError(f"non-uniform sequence: {x.dims} vs {sequence[0].dims}")
        seq = list(sequence)
        for cell in self.cells():
            state = cell.initial_state(seq[0])
            outputs = []
            for x in seq:
                state = cell.step(x, state)
                outputs.append(state.hidden)
            seq = outputs
        return seq

    __call__ = unroll


@dataclass
class BlockCensus:
    """Analytic parameter counts of one MSDA block."""

    pointwise: int
    branches: list = field(default_factory=list)
    se: int = 0
    bn: int = 0

    @property
    def total(self) -> int:
        return self.pointwise + int(np.sum(self.branches)) + self.se + self.bn


def msda_census(config: MsdaConfig) -> BlockCensus:
    cin, c, r = config.in_channels, config.out_channels, config.se_reduction
    return BlockCensus(
        pointwise=cin * c,
        branches=[c * 9 for _ in DILATION_RATES],
        se=(c * (c // r) + c // r) + (c // r * c + c),
        bn=2 * c * (1 + len(DILATION_RATES)),
    )
