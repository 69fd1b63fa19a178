"""Layer primitives plus the residual (RB) and depthwise-separable (DwSep) blocks.

Parameters live in small dataclasses so a block can be built, inspected and
serialized without a module hierarchy. Forward functions are plain
functions of (input, params, mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> bool:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == TRAIN


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Conv1dParams:
    weight: Tensor  # [out_channels, in_channels // groups, kernel]
    bias: Tensor | None  # [out_channels]; None when a batchnorm follows
    stride: int = 1
    padding: int = 0
    groups: int = 1

    @classmethod
    def init(
        cls,
        rng,
        in_ch: int,
        out_ch: int,
        kernel: int,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        fan_in = (in_ch // groups) * kernel
        return cls(
            weight=Tensor(_uniform(rng, (out_ch, in_ch // groups, kernel), fan_in), requires_grad=True),
            bias=Tensor(_uniform(rng, (out_ch,), fan_in), requires_grad=True) if bias else None,
            padding=padding,
            groups=groups,
        )

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class BatchNorm1dParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, channels: int):
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


# A bias directly ahead of a train-mode batchnorm is cancelled by the mean
# subtraction (zero gradient), so those convolutions are built without one.


@dataclass
class ResidualBlockParams:
    d_in: int
    d_out: int
    d_pool: int
    conv1: Conv1dParams
    bn1: BatchNorm1dParams
    conv2: Conv1dParams
    bn2: BatchNorm1dParams
    identity_conv: Conv1dParams

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, d_pool: int):
        if d_pool < 1:
            raise ValueError(f"d_pool must be >= 1, got {d_pool}")
        return cls(
            d_in=d_in,
            d_out=d_out,
            d_pool=d_pool,
            conv1=Conv1dParams.init(rng, d_in, d_out, 3, padding=1, bias=False),
            bn1=BatchNorm1dParams.init(d_out),
            conv2=Conv1dParams.init(rng, d_out, d_out, 3, padding=1, bias=False),
            bn2=BatchNorm1dParams.init(d_out),
            identity_conv=Conv1dParams.init(rng, d_in, d_out, 1),
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.conv1.named_parameters(f"{prefix}.conv1")
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield from self.conv2.named_parameters(f"{prefix}.conv2")
        yield from self.bn2.named_parameters(f"{prefix}.bn2")
        yield from self.identity_conv.named_parameters(f"{prefix}.identity_conv")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.bn1.named_buffers(f"{prefix}.bn1")
        yield from self.bn2.named_buffers(f"{prefix}.bn2")


@dataclass
class DwSepBlockParams:
    channels: int
    out_channels: int
    depthwise: Conv1dParams
    bn_dw: BatchNorm1dParams
    pointwise: Conv1dParams
    bn_pw: BatchNorm1dParams
    skip: Conv1dParams | None = field(default=None)

    @classmethod
    def init(cls, rng, channels: int, out_channels: int):
        skip = None if channels == out_channels else Conv1dParams.init(rng, channels, out_channels, 1)
        return cls(
            channels=channels,
            out_channels=out_channels,
            depthwise=Conv1dParams.init(
                rng, channels, channels, 3, padding=1, groups=channels, bias=False
            ),
            bn_dw=BatchNorm1dParams.init(channels),
            pointwise=Conv1dParams.init(rng, channels, out_channels, 1, bias=False),
            bn_pw=BatchNorm1dParams.init(out_channels),
            skip=skip,
        )

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.depthwise.named_parameters(f"{prefix}.depthwise")
        yield from self.bn_dw.named_parameters(f"{prefix}.bn_dw")
        yield from self.pointwise.named_parameters(f"{prefix}.pointwise")
        yield from self.bn_pw.named_parameters(f"{prefix}.bn_pw")
        if self.skip is not None:
            yield from self.skip.named_parameters(f"{prefix}.skip")

    def named_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.bn_dw.named_buffers(f"{prefix}.bn_dw")
        yield from self.bn_pw.named_buffers(f"{prefix}.bn_pw")


# ---------------------------------------------------------------------------
# forward functions


def conv1d(x: Tensor, p: Conv1dParams) -> Tensor:
    if x.ndim != 3 or x.shape[1] != p.in_channels:
        raise ShapeError(f"conv1d expects {p.in_channels} input channels, got input shape {x.shape}")
    return T.conv1d(x, p.weight, p.bias, stride=p.stride, padding=p.padding, groups=p.groups)


def batchnorm1d(x: Tensor, p: BatchNorm1dParams, mode: str) -> Tensor:
    training = _check_mode(mode)
    if x.ndim != 3 or x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"batchnorm1d over {p.gamma.shape[0]} channels got input shape {x.shape}")
    return T.batch_norm(
        x, p.gamma, p.beta, p.running_mean, p.running_var, training, p.momentum, p.eps
    )


maxpool1d = T.maxpool1d
global_avgpool = T.global_avgpool


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W^T + b for x: [batch, in], W: [out, in], b: [out]."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear shapes x={x.shape} W={W.shape} b={b.shape} do not match")
    return T.add(T.matmul(x, T.transpose(W)), b)


def residual_block(x: Tensor, p: ResidualBlockParams, mode: str) -> Tensor:
    if x.ndim != 3 or x.shape[1] != p.d_in:
        raise ShapeError(f"residual block expects {p.d_in} channels, got input shape {x.shape}")
    h = T.relu(batchnorm1d(conv1d(x, p.conv1), p.bn1, mode))
    h = batchnorm1d(conv1d(h, p.conv2), p.bn2, mode)
    h = T.relu(T.add(h, conv1d(x, p.identity_conv)))
    return maxpool1d(h, p.d_pool)


def dwsep_block(x: Tensor, p: DwSepBlockParams, mode: str) -> Tensor:
    if x.ndim != 3 or x.shape[1] != p.channels:
        raise ShapeError(f"DwSep block expects {p.channels} channels, got input shape {x.shape}")
    h = T.relu(batchnorm1d(conv1d(x, p.depthwise), p.bn_dw, mode))
    h = batchnorm1d(conv1d(h, p.pointwise), p.bn_pw, mode)
    skip = x if p.skip is None else conv1d(x, p.skip)
    return T.relu(T.add(h, skip))
