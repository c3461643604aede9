"""The eight candidate edge operations, in Parent and Child flavors.

Parent ops are full precision and follow ReLU-Conv-BN ordering. Child ops
replace every convolution inside an operation by :class:`BinConv2d` and drop
the ReLUs. Pooling, zero and identity are the same in both flavors; pooling is
followed by a non-affine batch norm.
"""

from __future__ import annotations

from enum import Enum, IntEnum

import numpy as np

from .binary import BinConv2d
from .layers import AvgPool3x3, BatchNorm2d, Conv2d, MaxPool3x3, Module, ReLU, Sequential
from .tensor import ConvSpec, ShapeError


class OpKind(IntEnum):
    ZERO = 0
    IDENTITY = 1
    DIL_CONV_3X3 = 2
    DIL_CONV_5X5 = 3
    MAX_POOL_3X3 = 4
    AVG_POOL_3X3 = 5
    SEP_CONV_3X3 = 6
    SEP_CONV_5X5 = 7

    @property
    def op_name(self) -> str:
        return _NAMES[self]

    @classmethod
    def from_name(cls, name: str) -> "OpKind":
        try:
            return _BY_NAME[name]
        except KeyError:
            raise ValueError(f"unknown operation name {name!r}; expected one of {sorted(_BY_NAME)}") from None

    @property
    def is_conv(self) -> bool:
        return self in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5, OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5)


_NAMES = {
    OpKind.ZERO: "none",
    OpKind.IDENTITY: "skip_connect",
    OpKind.DIL_CONV_3X3: "dil_conv_3x3",
    OpKind.DIL_CONV_5X5: "dil_conv_5x5",
    OpKind.MAX_POOL_3X3: "max_pool_3x3",
    OpKind.AVG_POOL_3X3: "avg_pool_3x3",
    OpKind.SEP_CONV_3X3: "sep_conv_3x3",
    OpKind.SEP_CONV_5X5: "sep_conv_5x5",
}
_BY_NAME = {v: k for k, v in _NAMES.items()}
ALL_OPS = tuple(OpKind)


class Flavor(str, Enum):
    PARENT = "parent"
    CHILD = "child"


def conv(spec: ConvSpec, flavor: Flavor, rng: np.random.Generator) -> Module:
    """A convolution layer of the given flavor. Both flavors draw identical latent weights."""
    return BinConv2d(spec, rng) if flavor is Flavor.CHILD else Conv2d(spec, rng)


def conv_unit(layers: list[Module], flavor: Flavor, bn_channels: int | None) -> Sequential:
    """Prefix a ReLU for the Parent flavor and append BN when requested."""
    body = ([ReLU()] if flavor is Flavor.PARENT else []) + layers
    if bn_channels is not None:
        body.append(BatchNorm2d(bn_channels))
    return Sequential(*body)


class Zero(Module):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x, training=True):
        self._shape = x.shape
        return np.zeros_like(x[:, :, :: self.stride, :: self.stride])

    def backward(self, grad):
        return np.zeros(self._shape, dtype=grad.dtype)


class Identity(Module):
    def forward(self, x, training=True):
        return x

    def backward(self, grad):
        return grad


class EdgeOp(Module):
    """One candidate operation on a cell edge."""

    def __init__(self, kind: OpKind, flavor: Flavor, channels: int, stride: int, body: Module):
        self.kind = kind
        self.flavor = flavor
        self.channels = channels
        self.stride = stride
        self.body = body

    def forward(self, x, training=True):
        if x.shape[1] != self.channels:
            raise ShapeError(f"edge op {self.kind.op_name}", "input channels", self.channels, x.shape[1])
        return self.body.forward(x, training)

    def backward(self, grad):
        return self.body.backward(grad)

    def conv_weight_count(self) -> int:
        return sum(
            p.data.size for _, m in self.named_modules(everything=True) if isinstance(m, (Conv2d, BinConv2d))
            for _, p in m.own_parameters()
        )

    def __repr__(self):
        return f"EdgeOp({self.kind.op_name}, {self.flavor.value}, C={self.channels}, stride={self.stride})"


def _dw_pw(c: int, k: int, stride: int, dilation: int, flavor: Flavor, rng) -> list[Module]:
    return [
        conv(ConvSpec(c, c, k, stride, dilation, groups=c), flavor, rng),
        conv(ConvSpec(c, c, 1), flavor, rng),
    ]


def make_edge_op(kind: OpKind, flavor: Flavor, channels: int, stride: int, rng) -> EdgeOp:
    """Build ``kind`` for a cell of width ``channels``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed. Twins built from
    equal seeds hold identical latent weights.
    """
    if stride not in (1, 2):
        raise ValueError(f"invalid stride {stride} for {OpKind(kind).op_name}")
    kind = OpKind(kind)
    flavor = Flavor(flavor)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c = channels
    if kind is OpKind.ZERO:
        body = Zero(stride)
    elif kind is OpKind.IDENTITY:
        if stride == 1:
            body = Identity()
        else:
            body = conv_unit([conv(ConvSpec(c, c, 1, stride=2), flavor, rng)], flavor, c)
    elif kind in (OpKind.MAX_POOL_3X3, OpKind.AVG_POOL_3X3):
        pool = MaxPool3x3(stride) if kind is OpKind.MAX_POOL_3X3 else AvgPool3x3(stride)
        body = Sequential(pool, BatchNorm2d(c, affine=False))
    elif kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        k = 3 if kind is OpKind.DIL_CONV_3X3 else 5
        body = conv_unit(_dw_pw(c, k, stride, 2, flavor, rng), flavor, c)
    else:
        k = 3 if kind is OpKind.SEP_CONV_3X3 else 5
        body = Sequential(
            conv_unit(_dw_pw(c, k, stride, 1, flavor, rng), flavor, c),
            conv_unit(_dw_pw(c, k, 1, 1, flavor, rng), flavor, c),
        )
    return EdgeOp(kind, flavor, c, stride, body)


def edge_forward(op: EdgeOp, x: np.ndarray, training: bool = True) -> np.ndarray:
    return op.forward(x, training)


def output_shape(kind: OpKind, stride: int, shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    """Static output shape of any op: channels preserved, spatial ceil-halved at stride 2."""
    n, c, h, w = shape
    if stride == 1:
        return shape
    return (n, c, -(-h // 2), -(-w // 2))
