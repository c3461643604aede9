"""Stateful layers wrapping the primitives in :mod:`cpnas.tensor`.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in ``backward``. Layers compose with
:class:`Sequential`; a module's parameters are discovered by walking its
attributes.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ConvSpec, Parameter

# Set by efficiency.trace(); conv/linear layers append (layer, in_shape, out_shape).
_trace: list | None = None


def _record(layer, x_shape, out_shape):
    if _trace is not None:
        _trace.append((layer, tuple(x_shape), tuple(out_shape)))


class Module:
    training: bool = True

    def forward(self, x, training: bool = True):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, x, training: bool = True):
        return self.forward(x, training)

    def children(self, everything: bool = False) -> Iterator[tuple[str, "Module"]]:
        """Direct submodules. Modules holding inactive alternatives (the
        supernet's mixed edges) yield only the active one unless ``everything``."""
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield f"{name}.{key}", item

    def named_modules(self, prefix: str = "", everything: bool = False) -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children(everything):
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name, everything)

    def own_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value

    def named_parameters(self, prefix: str = "", everything: bool = False) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix, everything):
            for name, p in mod.own_parameters():
                yield (f"{mod_name}.{name}" if mod_name else name), p

    def parameters(self, everything: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters(everything=everything)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for mod_name, mod in self.named_modules(everything=True):
            pre = f"{mod_name}." if mod_name else ""
            for name, p in mod.own_parameters():
                out[pre + name] = p.data.copy()
            for name, buf in mod.own_buffers():
                out[pre + name] = buf.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for mod_name, mod in self.named_modules(everything=True):
            pre = f"{mod_name}." if mod_name else ""
            for name, p in mod.own_parameters():
                p.data[...] = state[pre + name]
            for name, _ in mod.own_buffers():
                mod.set_buffer(name, state[pre + name])

    def own_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)


def kaiming(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    """Full-precision convolution (bias-free)."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        self.weight = Parameter(kaiming(rng, spec.weight_shape))
        self._cache = None

    def forward(self, x, training=True):
        T._check_conv(x, self.weight.data, self.spec)
        out, cols = T._conv_forward(x, self.weight.data, self.spec)
        self._cache = (x, cols)
        _record(self, x.shape, out.shape)
        return out

    def backward(self, grad):
        x, cols = self._cache
        gx, gw = T.conv2d_backward(grad, x, self.weight.data, self.spec, cols=cols)
        self.weight.grad += gw
        self._cache = None
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True, eps: float = 1e-5, momentum: float = 0.1):
        self.state = BatchNormState(channels, eps=eps, momentum=momentum, affine=affine)
        self._cache = None

    def own_parameters(self):
        if self.state.affine:
            yield "gamma", self.state.gamma
            yield "beta", self.state.beta

    def own_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def set_buffer(self, name, value):
        setattr(self.state, name, np.array(value, dtype=T.get_dtype()))

    def forward(self, x, training=True):
        out, self._cache = T.batch_norm(x, self.state, training)
        return out

    def backward(self, grad):
        gx = T.batch_norm_backward(grad, self.state, self._cache)
        self._cache = None
        return gx


class ReLU(Module):
    def forward(self, x, training=True):
        self._x = x
        return T.relu(x)

    def backward(self, grad):
        return T.relu_backward(grad, self._x)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x, training=True):
        self._x = x
        out = T.linear_forward(x, self.weight.data, self.bias.data)
        _record(self, x.shape, out.shape)
        return out

    def backward(self, grad):
        gx, gw, gb = T.linear_backward(grad, self._x, self.weight.data)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


class MaxPool3x3(Module):
    def __init__(self, stride: int = 1):
        self.stride = stride

    def forward(self, x, training=True):
        self._x = x
        return T.max_pool3x3(x, self.stride)

    def backward(self, grad):
        return T.max_pool3x3_backward(grad, self._x, self.stride)


class AvgPool3x3(Module):
    def __init__(self, stride: int = 1):
        self.stride = stride

    def forward(self, x, training=True):
        self._shape = x.shape
        return T.avg_pool3x3(x, self.stride)

    def backward(self, grad):
        return T.avg_pool3x3_backward(grad, self._shape, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x, training=True):
        self._shape = x.shape
        return T.global_avg_pool(x)

    def backward(self, grad):
        return T.global_avg_pool_backward(grad, self._shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad
