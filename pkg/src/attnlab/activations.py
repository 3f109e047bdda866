"""Positivity transforms that can stand in for ``exp`` before row normalization."""
from __future__ import annotations

import enum
import math

import torch

from .errors import NumericError


class ActivationKind(str, enum.Enum):
    EXP = "exp"
    RELU = "relu"
    RELU_SQUARED = "relu2"
    RELU6 = "relu6"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    MISH = "mish"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, name: str) -> "ActivationKind":
        key = name.strip().lower().replace("_", "").replace("-", "")
        aliases = {"e^x": "exp", "relusquared": "relu2", "squaredrelu": "relu2", "linear": "identity", "none": "identity"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown activation {name!r}")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softplus_forward(x: torch.Tensor) -> torch.Tensor:
    """log(1 + e^x) without overflow.

    Equal to x + log1p(exp(-x)) for x > 0 and log1p(exp(x)) otherwise; both
    branches share the form max(x, 0) + log1p(exp(-|x|)).
    """
    return torch.relu(x) + torch.log1p(torch.exp(-x.abs()))


class _Softplus(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return softplus_forward(x)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * torch.sigmoid(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    """Overflow-safe softplus whose gradient is sigmoid(x), bounded by one."""
    return _Softplus.apply(x)


def checked_exp(x: torch.Tensor) -> torch.Tensor:
    y = torch.exp(x)
    if not torch.isfinite(y).all():
        mag = float(x.detach().abs().max())
        raise NumericError(f"exp overflow: input magnitude {mag:.6g}", mag)
    return y


def apply(kind: ActivationKind, x: torch.Tensor) -> torch.Tensor:
    if kind is ActivationKind.EXP:
        return checked_exp(x)
    if kind is ActivationKind.RELU:
        return torch.relu(x)
    if kind is ActivationKind.RELU_SQUARED:
        r = torch.relu(x)
        return r * r
    if kind is ActivationKind.RELU6:
        return x.clamp(min=0.0, max=6.0)
    if kind is ActivationKind.GELU:
        return 0.5 * x * (1.0 + torch.erf(x * _INV_SQRT2))
    if kind is ActivationKind.SIGMOID:
        return torch.sigmoid(x)
    if kind is ActivationKind.SOFTPLUS:
        return softplus(x)
    if kind is ActivationKind.MISH:
        return x * torch.tanh(softplus(x))
    if kind is ActivationKind.IDENTITY:
        return x
    raise ValueError(f"unhandled activation {kind}")


def derivative(kind: ActivationKind, x: torch.Tensor) -> torch.Tensor:
    """Closed-form elementwise derivative; kinks take the right-hand value."""
    if kind is ActivationKind.EXP:
        return checked_exp(x)
    if kind is ActivationKind.RELU:
        return (x >= 0).to(x.dtype)
    if kind is ActivationKind.RELU_SQUARED:
        return 2.0 * torch.relu(x)
    if kind is ActivationKind.RELU6:
        return ((x >= 0) & (x < 6)).to(x.dtype)
    if kind is ActivationKind.GELU:
        cdf = 0.5 * (1.0 + torch.erf(x * _INV_SQRT2))
        pdf = _INV_SQRT2PI * torch.exp(-0.5 * x * x)
        return cdf + x * pdf
    if kind is ActivationKind.SIGMOID:
        s = torch.sigmoid(x)
        return s * (1.0 - s)
    if kind is ActivationKind.SOFTPLUS:
        return torch.sigmoid(x)
    if kind is ActivationKind.MISH:
        t = torch.tanh(softplus(x))
        return t + x * (1.0 - t * t) * torch.sigmoid(x)
    if kind is ActivationKind.IDENTITY:
        return torch.ones_like(x)
    raise ValueError(f"unhandled activation {kind}")
