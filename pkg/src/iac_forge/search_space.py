"""Candidate-operation vocabulary and cell DAG combinatorics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import InvalidArgumentError


class OpKind(enum.IntEnum):
    ZERO = 0
    IDENTITY = 1
    MAX_POOL_3X3 = 2
    AVG_POOL_3X3 = 3
    SEP_CONV_3X3 = 4
    SEP_CONV_5X5 = 5
    DIL_CONV_3X3 = 6
    DIL_CONV_5X5 = 7

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def from_label(cls, label):
        try:
            return cls[label.upper()]
        except KeyError:
            raise InvalidArgumentError(f"unknown operation {label!r}") from None


PARAMETER_FREE = frozenset(
    {OpKind.ZERO, OpKind.IDENTITY, OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3}
)


class EdgeNorm(str, enum.Enum):
    PCDARTS = "pcdarts"
    TAN_RESCALED = "tan_rescaled"


def candidate_ops():
    return list(OpKind)


def edge_count(n_inputs, n_nodes):
    if n_inputs < 1 or n_nodes < 1:
        raise InvalidArgumentError(
            f"n_inputs and n_nodes must be positive, got {n_inputs}, {n_nodes}"
        )
    return sum(n_inputs + j for j in range(n_nodes))


@dataclass(frozen=True)
class SearchSpaceConfig:
    n_nodes: int = 4
    n_inputs: int = 2
    ops: tuple = field(default_factory=lambda: tuple(OpKind))
    K: int = 4
    edge_norm_mode: EdgeNorm = EdgeNorm.TAN_RESCALED

    def __post_init__(self):
        if self.n_nodes < 1:
            raise InvalidArgumentError("n_nodes must be >= 1")
        if self.n_inputs != 2:
            raise InvalidArgumentError("a cell always has exactly 2 inputs")
        if self.K < 1:
            raise InvalidArgumentError("K must be >= 1")
        ops = tuple(OpKind(o) for o in self.ops)
        if not ops or len(set(ops)) != len(ops):
            raise InvalidArgumentError("ops must be non-empty and duplicate-free")
        object.__setattr__(self, "ops", ops)
        object.__setattr__(self, "edge_norm_mode", EdgeNorm(self.edge_norm_mode))

    @property
    def n_edges(self):
        return edge_count(self.n_inputs, self.n_nodes)

    def node_arity(self, j):
        return self.n_inputs + j

    def node_edge_offset(self, j):
        """Index of node ``j``'s first incoming edge in the flat edge list."""
        return sum(self.n_inputs + i for i in range(j))

    def edges(self):
        """Yield ``(edge_index, node, source)`` in canonical order."""
        e = 0
        for j in range(self.n_nodes):
            for src in range(self.n_inputs + j):
                yield e, j, src
                e += 1

    def to_dict(self):
        return {
            "n_nodes": self.n_nodes,
            "n_inputs": self.n_inputs,
            "ops": [int(o) for o in self.ops],
            "K": self.K,
            "edge_norm_mode": self.edge_norm_mode.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_nodes=d["n_nodes"],
            n_inputs=d.get("n_inputs", 2),
            ops=tuple(d["ops"]),
            K=d["K"],
            edge_norm_mode=d["edge_norm_mode"],
        )


class Zero(nn.Module):
    def forward(self, x):
        return x.mul(0.0)


class Identity(nn.Module):
    def forward(self, x):
        return x


def _relu_dw_pw_bn(channels, kernel, dilation):
    pad = dilation * (kernel - 1) // 2
    return [
        nn.ReLU(inplace=False),
        nn.Conv2d(channels, channels, kernel, padding=pad, dilation=dilation,
                  groups=channels, bias=False),
        nn.Conv2d(channels, channels, 1, bias=False),
        nn.BatchNorm2d(channels, affine=True),
    ]


class SepConv(nn.Sequential):
    """Two stacked ReLU -> depthwise kxk -> pointwise 1x1 -> BN blocks."""

    def __init__(self, channels, kernel):
        super().__init__(*_relu_dw_pw_bn(channels, kernel, 1),
                         *_relu_dw_pw_bn(channels, kernel, 1))


class DilConv(nn.Sequential):
    def __init__(self, channels, kernel, dilation=2):
        super().__init__(*_relu_dw_pw_bn(channels, kernel, dilation))


def init_conv_weights(module, generator):
    """Fan-in-scaled uniform init for every conv in ``module``, driven by ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
    return module


def instantiate_op(kind, channels, generator=None):
    """Build the module for ``kind`` mapping (N, C, H, W) to the same shape."""
    if channels < 1:
        raise InvalidArgumentError(f"channels must be >= 1, got {channels}")
    try:
        kind = OpKind(kind)
    except ValueError:
        raise InvalidArgumentError(f"unknown operation kind {kind!r}") from None
    if kind is OpKind.ZERO:
        op = Zero()
    elif kind is OpKind.IDENTITY:
        op = Identity()
    elif kind is OpKind.MAX_POOL_3X3:
        op = nn.MaxPool2d(3, stride=1, padding=1)
    elif kind is OpKind.AVG_POOL_3X3:
        op = nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    elif kind is OpKind.SEP_CONV_3X3:
        op = SepConv(channels, 3)
    elif kind is OpKind.SEP_CONV_5X5:
        op = SepConv(channels, 5)
    elif kind is OpKind.DIL_CONV_3X3:
        op = DilConv(channels, 3)
    else:
        op = DilConv(channels, 5)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    return init_conv_weights(op, generator)


def op_param_count(kind, channels):
    """Closed-form trainable parameter count of ``instantiate_op(kind, channels)``."""
    kind = OpKind(kind)
    if kind in PARAMETER_FREE:
        return 0
    k = 3 if kind in (OpKind.SEP_CONV_3X3, OpKind.DIL_CONV_3X3) else 5
    block = channels * k * k + channels * channels + 2 * channels
    return 2 * block if kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5) else block
