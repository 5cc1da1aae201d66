"""Parameterised layers on top of the autodiff ops."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Attribute-walking container: tensors with ``requires_grad`` are parameters,
    ``buffers`` holds non-trainable arrays (batch-norm running statistics)."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in getattr(self, "buffers", {}).items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by name, as live arrays."""
        out = {k: p.data for k, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        from .errors import ContractViolation

        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            extra = sorted(set(arrays) - expected)
            raise ContractViolation(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in arrays.items():
            target = params[name].data if name in params else buffers[name]
            if value.shape != target.shape:
                raise ContractViolation(
                    f"parameter {name} has shape {value.shape}, model expects {target.shape}")
        for name, value in arrays.items():
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype)
            else:
                buffers[name][...] = value


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or ad.get_default_dtype()
        kh, kw = kernel
        self.stride = tuple(stride)
        self.weight = _uniform(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype)
        self.bias = _uniform(rng, (out_ch,), in_ch * kh * kw, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or ad.get_default_dtype()
        kh, kw = kernel
        self.stride = tuple(stride)
        fan_in = in_ch * kh * kw // max(1, stride[0] * stride[1])
        self.weight = _uniform(rng, (in_ch, out_ch, kh, kw), fan_in, dtype)
        self.bias = _uniform(rng, (out_ch,), fan_in, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=None):
        dtype = dtype or ad.get_default_dtype()
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batchnorm2d(x, self.gamma, self.beta, self.buffers["running_mean"],
                              self.buffers["running_var"], training=self.training)


class Linear(Module):
    def __init__(self, in_features, out_features, rng=None, dtype=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = dtype or ad.get_default_dtype()
        self.weight = _uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = _uniform(rng, (out_features,), in_features, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)
