"""Parameterised layers built on :mod:`sharpcos.functional`.

The four feature extractors (``Conv2d``, ``CosSim2d``, ``SharpCosSim2d``,
``SharpenedSDP2d``) take the same constructor arguments and draw their kernel
from the same generator in the same order, so swapping one for another keeps
the initial kernel values byte-identical.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

Q_INIT = 0.1


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for name, m in self._modules.items():
            yield from m.named_modules(prefix + name + ".")

    def train(self, mode: bool = True) -> Module:
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _FeatureExtractor(Module):
    """Shared kernel setup: weight ~ U(-a, a), a = 1/sqrt(fan_in)."""

    kind = ""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Parameter(_uniform(rng, bound, shape, dtype))
        # drawn for every kind so the generator state after construction matches
        self._bias_init = _uniform(rng, bound, (out_channels,), dtype)

    def extra_repr(self) -> str:
        return (f"{self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
                f"stride={self.stride}, padding={self.padding}")


class Conv2d(_FeatureExtractor):
    kind = "conv"

    def __init__(self, *args, bias: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.bias = Parameter(self._bias_init) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


def parse_p_mode(p_mode) -> float | None:
    """``"learned"`` -> None; ``"fixed:2.0"``, ``("fixed", 2.0)`` or a number -> that value."""
    if p_mode is None or p_mode == "learned":
        return None
    if isinstance(p_mode, (int, float)):
        value = float(p_mode)
    elif isinstance(p_mode, (tuple, list)) and len(p_mode) == 2 and p_mode[0] == "fixed":
        value = float(p_mode[1])
    elif isinstance(p_mode, str) and p_mode.startswith("fixed"):
        try:
            value = float(p_mode.split(":", 1)[1].strip("() "))
        except (IndexError, ValueError):
            raise ConfigError(f"bad p_mode {p_mode!r}", key="p_mode") from None
    else:
        raise ConfigError(f"bad p_mode {p_mode!r}", key="p_mode")
    if not value > 0:
        raise ConfigError(f"fixed p must be positive, got {value}", key="p_mode")
    return value


class _Sharpened(_FeatureExtractor):
    """Extractor with a per-output-channel exponent ``p = exp(p_raw)``."""

    def __init__(self, *args, p_mode="learned", **kwargs):
        super().__init__(*args, **kwargs)
        dtype = self.weight.dtype
        self.p_fixed = parse_p_mode(p_mode)
        if self.p_fixed is None:
            self.p_raw = Parameter(np.zeros(self.out_channels, dtype=dtype))
        else:
            self.p_raw = None

    @property
    def p(self) -> Tensor:
        if self.p_fixed is None:
            return T.exp(self.p_raw)
        return Tensor(np.full(self.out_channels, self.p_fixed, dtype=self.weight.dtype))

    def p_values(self) -> np.ndarray:
        return self.p.data.copy()


class SharpCosSim2d(_Sharpened):
    """Sharpened cosine similarity layer (no bias).

    ``q = softplus(q_raw)`` is one learned scalar initialised to 0.1, unless
    ``q_fixed`` pins it (``q_fixed=0`` recovers the unstabilised form).
    """

    kind = "scs"

    def __init__(self, *args, q_init: float = Q_INIT, q_fixed: float | None = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.q_fixed = q_fixed
        if q_fixed is None:
            self.q_raw = Parameter(np.array([F.softplus_inverse(q_init)], dtype=self.weight.dtype))
        else:
            if q_fixed < 0:
                raise ConfigError("q must be non-negative", key="q_fixed")
            self.q_raw = None

    @property
    def q(self) -> Tensor:
        if self.q_fixed is None:
            return T.softplus(self.q_raw)
        return Tensor(np.array([self.q_fixed], dtype=self.weight.dtype))

    def forward(self, x):
        return F.scs2d(x, self.weight, self.p, self.q, self.stride, self.padding)


class CosSim2d(SharpCosSim2d):
    """Cosine similarity with ``p`` pinned to 1."""

    kind = "cossim"

    def __init__(self, *args, **kwargs):
        kwargs["p_mode"] = 1.0
        super().__init__(*args, **kwargs)

    def forward(self, x):
        return F.cossim2d(x, self.weight, self.q, self.stride, self.padding)


class SharpenedSDP2d(_Sharpened):
    kind = "sdp"

    def forward(self, x):
        return F.sdp2d(x, self.weight, self.p, self.stride, self.padding)


EXTRACTORS = {
    "conv": Conv2d,
    "cossim": CosSim2d,
    "scs": SharpCosSim2d,
    "sdp": SharpenedSDP2d,
}


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Identity(Module):
    def forward(self, x):
        return x


class MaxPool2d(Module):
    def __init__(self, window: int = 2, stride: int | None = None):
        super().__init__()
        self.window, self.stride = window, stride

    def forward(self, x):
        return F.maxpool2d(x, self.window, self.stride)


class MaxAbsPool2d(MaxPool2d):
    def forward(self, x):
        return F.maxabspool2d(x, self.window, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return F.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        super().__init__()
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (out_features, in_features), dtype))
        b = _uniform(rng, bound, (out_features,), dtype)
        self.bias = Parameter(b) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class AdaptiveAvgPool2d(Module):
    def __init__(self, out_hw=(1, 1)):
        super().__init__()
        self.out_hw = tuple(out_hw)

    def forward(self, x):
        return F.adaptive_avgpool2d(x, self.out_hw)


class Flatten(Module):
    def forward(self, x):
        return T.flatten(x)
