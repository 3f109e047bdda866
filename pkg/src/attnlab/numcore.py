"""Dense float64 tensor helpers and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects in float64; torch autograd supplies
the reverse-mode gradients and :func:`grad_check` validates them against
central differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch

from .errors import DimensionError, NumericError

DTYPE = torch.float64
DEFAULT_EPS = 1e-12


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def l1_normalize_rows(a: torch.Tensor, eps: float = DEFAULT_EPS, return_flags: bool = False):
    """Divide each row (last axis) by the sum of its absolute values.

    Rows whose absolute sum is below ``eps`` come back unchanged; with
    ``return_flags`` a boolean mask of those rows is returned as well.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    s = a.abs().sum(dim=-1, keepdim=True)
    degenerate = s < eps
    out = a * torch.where(degenerate, torch.ones_like(s), s).reciprocal()
    if return_flags:
        return out, degenerate.squeeze(-1)
    return out


def l2_normalize_rows(a: torch.Tensor, eps: float = DEFAULT_EPS, return_flags: bool = False):
    """Scale each row to unit Euclidean norm; rows with norm < eps pass through."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    degenerate = n < eps
    out = a * torch.where(degenerate, torch.ones_like(n), n).reciprocal()
    if return_flags:
        return out, degenerate.squeeze(-1)
    return out


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_diff: float
    max_rel_diff: float
    param_count: int

    def passed(self, rel_tol: float) -> bool:
        return self.max_rel_diff < rel_tol


def _rel_diff(analytic: torch.Tensor, numeric: torch.Tensor, floor: float) -> float:
    # Scale by the tensor's largest gradient, not per element: entries near zero
    # would otherwise turn O(h^2) truncation error into huge ratios.
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare autograd's gradient of scalar ``f`` at ``x`` with central differences.

    ``max_rel_diff`` is the largest absolute difference within a tensor divided
    by ``max(max|analytic|, max|numeric|, floor)`` for that tensor, maximized
    over tensors; an all-zero gradient on both sides counts as agreement.
    """
    leaf = x.detach().clone().to(DTYPE).requires_grad_(True)
    return grad_check_params(lambda: f(leaf), [leaf], h=h, floor=floor)


def grad_check_params(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                      h: float = 1e-5, floor: float = 1e-8) -> GradCheckReport:
    """Gradient check over every element of every tensor in ``params``.

    ``loss_fn`` is re-evaluated after in-place perturbation of each element, so
    it must read the parameters by reference.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    _require_finite(loss, "f(x)")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    max_abs = 0.0
    max_rel = 0.0
    count = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            numeric = torch.empty_like(gflat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = loss_fn()
                flat[i] = orig - h
                fm = loss_fn()
                flat[i] = orig
                _require_finite(fp, "f(x+h)")
                _require_finite(fm, "f(x-h)")
                numeric[i] = (fp - fm) / (2 * h)
            max_abs = max(max_abs, (gflat - numeric).abs().max().item())
            max_rel = max(max_rel, _rel_diff(gflat, numeric, floor))
            count += flat.numel()
    return GradCheckReport(max_abs_diff=max_abs, max_rel_diff=max_rel, param_count=count)


def _require_finite(value: torch.Tensor, where: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite value at {where}", float(value.detach().abs().max()))


def all_finite(tensors: Iterable[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
