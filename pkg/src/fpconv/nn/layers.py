"""Parameter containers.

``Module`` discovers parameters, buffers and children by walking instance
attributes, so a subclass only has to assign them in ``__init__``. Names are
dotted attribute paths (``block.fpconv.dist_mlp.0.weight``).
"""

from __future__ import annotations

import math
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from fpconv.errors import ShapeMismatch
from fpconv.nn import functional as F
from fpconv.nn.tensor import Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = F.LEAKY_SLOPE) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def Parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{key}.")

    def named_parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for prefix, mod in self.named_modules():
            for key, value in mod._children():
                if isinstance(value, Tensor) and value.requires_grad:
                    out[prefix + key] = value
        return dict(sorted(out.items()))

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for prefix, mod in self.named_modules():
            for key, arr in mod._buffers().items():
                out[prefix + key] = arr
        return dict(sorted(out.items()))

    def _buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def _set_buffer(self, key: str, value: np.ndarray) -> None:
        raise KeyError(key)

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for key, arr in mod._buffers().items():
                mod._set_buffer(key, arr.astype(dtype))
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.float64

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        state.update({name: arr.copy() for name, arr in self.named_buffers().items()})
        return dict(sorted(state.items()))

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        mods = dict(self.named_modules())
        expected = set(params) | set(self.named_buffers())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ShapeMismatch(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, value in state.items():
            if name in params:
                p = params[name]
                if p.shape != tuple(value.shape):
                    raise ShapeMismatch(f"{name}: checkpoint shape {tuple(value.shape)} vs model {p.shape}")
                p.data = np.asarray(value, dtype=p.dtype).copy()
            else:
                prefix, _, key = name.rpartition(".")
                mod = mods[prefix + "." if prefix else ""]
                cur = mod._buffers()[key]
                if cur.shape != tuple(value.shape):
                    raise ShapeMismatch(f"{name}: checkpoint shape {tuple(value.shape)} vs model {cur.shape}")
                mod._set_buffer(key, np.asarray(value, dtype=cur.dtype).copy())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = F.RunningStats(channels)

    def _buffers(self):
        return {"running_mean": self.stats.mean, "running_var": self.stats.var}

    def _set_buffer(self, key, value):
        if key == "running_mean":
            self.stats.mean = value
        elif key == "running_var":
            self.stats.var = value
        else:
            raise KeyError(key)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.training, self.stats)


class SharedMLP(Module):
    """Per-point ``Linear -> BatchNorm -> LeakyReLU`` over the trailing axis.

    With ``activation=False`` the layer ends after batch norm, which is how
    residual branches are closed before the shortcut add.
    """

    def __init__(self, in_features: int, out_features: int, rng, activation: bool = True):
        self.linear = Linear(in_features, out_features, rng, bias=False)
        self.bn = BatchNorm(out_features)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.linear(x))
        return F.leaky_relu(y) if self.activation else y


class Conv2d(Module):
    def __init__(self, kernel_size: int, in_channels: int, out_channels: int, rng, padding: int = 0, bias: bool = True):
        fan_in = kernel_size * kernel_size * in_channels
        self.kernel = Parameter(kaiming_uniform(rng, (kernel_size, kernel_size, in_channels, out_channels), fan_in))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.padding, self.bias)


def zero_(param: Optional[Tensor]) -> None:
    if param is not None:
        param.data[...] = 0.0
