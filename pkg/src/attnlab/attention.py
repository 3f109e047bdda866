"""Causal attention mechanisms: softmax, the generalized phi + l1 family,
sigmoid attention variants, length-scaled softplus attention (LSSA) and the
ReLU^p re-weighting stage that turns LSSA into LSSAR.

Every function accepts ``(..., L, d)`` inputs and returns ``(scores, out)``
with ``scores`` of shape ``(..., L, L)`` and ``out = scores @ V``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import torch

from . import activations
from .activations import ActivationKind
from .errors import DimensionError, NumericError, ParameterError
from .numcore import DEFAULT_EPS, DTYPE, l1_normalize_rows, l2_normalize_rows


class Mechanism(str, enum.Enum):
    SOFTMAX = "softmax"
    GENERALIZED = "generalized"
    SIGMOID = "sigmoid"
    LSSA = "lssa"


class SigmoidBias(str, enum.Enum):
    NEG_LOG_L = "neglogl"
    NEG_LOG_N = "neglogn"
    NONE = "none"


class SoftmaxMode(str, enum.Enum):
    INVERSE = "inverse"
    RECENTRED = "recentred"
    RECENTRED_L1 = "recentred_l1"


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class AttentionSpec:
    mechanism: Mechanism = Mechanism.SOFTMAX
    phi: ActivationKind = ActivationKind.EXP
    l1_normalize: bool = True
    reweight_p: Optional[float] = None
    sigmoid_bias: SigmoidBias = SigmoidBias.NONE
    protected_rows: int = 3
    softmax_mode: Optional[SoftmaxMode] = None

    def __post_init__(self):
        if self.reweight_p is not None and not self.reweight_p >= 1:
            raise ParameterError(f"reweight_p must be >= 1, got {self.reweight_p}")
        if self.protected_rows < 0:
            raise ParameterError("protected_rows must be >= 0")
        if self.softmax_mode is not None and self.mechanism is not Mechanism.SOFTMAX:
            raise ParameterError("softmax_mode only applies to the softmax mechanism")

    @property
    def label(self) -> str:
        """Mechanism name without the re-weighting power."""
        m = self.mechanism
        if m is Mechanism.SOFTMAX:
            return "softmax" if self.softmax_mode is None else f"softmax-{self.softmax_mode.value}"
        if m is Mechanism.LSSA:
            return "lssar" if self.reweight_p is not None else "lssa"
        if m is Mechanism.GENERALIZED:
            return f"generalized-{self.phi.value}" + ("" if self.l1_normalize else "-nol1")
        return f"sigmoid-{self.sigmoid_bias.value}" + ("-l1" if self.l1_normalize else "")

    @property
    def display_name(self) -> str:
        if self.reweight_p is None:
            return self.label
        return f"{self.label} (p={self.reweight_p:g})"

    def to_string(self) -> str:
        """Round-trippable compact form accepted by :meth:`parse`."""
        m = self.mechanism
        opts = []
        if m is Mechanism.GENERALIZED:
            opts += [f"phi={self.phi.value}", f"l1={str(self.l1_normalize).lower()}"]
        elif m is Mechanism.SIGMOID:
            opts += [f"bias={self.sigmoid_bias.value}", f"l1={str(self.l1_normalize).lower()}"]
        if self.softmax_mode is not None:
            opts.append(f"mode={self.softmax_mode.value}")
        if self.reweight_p is not None:
            opts.append(f"p={self.reweight_p!r}")
        if self.protected_rows != 3:
            opts.append(f"protected={self.protected_rows}")
        return m.value + (":" + ",".join(opts) if opts else "")

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism.value,
            "phi": self.phi.value,
            "l1_normalize": self.l1_normalize,
            "reweight_p": self.reweight_p,
            "sigmoid_bias": self.sigmoid_bias.value,
            "protected_rows": self.protected_rows,
            "softmax_mode": None if self.softmax_mode is None else self.softmax_mode.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionSpec":
        mode = d.get("softmax_mode")
        p = d.get("reweight_p")
        return cls(
            mechanism=Mechanism(d.get("mechanism", "softmax")),
            phi=ActivationKind.parse(d.get("phi", "exp")),
            l1_normalize=_parse_bool(d.get("l1_normalize", True)),
            reweight_p=None if p is None else float(p),
            sigmoid_bias=SigmoidBias(d.get("sigmoid_bias", "none")),
            protected_rows=int(d.get("protected_rows", 3)),
            softmax_mode=None if mode is None else SoftmaxMode(mode),
        )

    @classmethod
    def parse(cls, text: str) -> "AttentionSpec":
        """Parse ``name[:key=value,...]``.

        Names: softmax, generalized, sigmoid, lssa, lssar (LSSA with p, default
        15). Keys: p, phi, l1, bias, mode, protected.

        >>> AttentionSpec.parse("lssar:p=3").reweight_p
        3.0
        """
        name, _, rest = text.strip().partition(":")
        name = name.strip().lower()
        opts = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            k, eq, v = item.partition("=")
            if not eq:
                raise ValueError(f"bad option {item!r} in {text!r}")
            opts[k.strip().lower()] = v.strip()
        kwargs: dict = {}
        if name == "lssar":
            kwargs["mechanism"] = Mechanism.LSSA
            kwargs["reweight_p"] = 15.0
        elif name in ("softmax", "generalized", "sigmoid", "lssa"):
            kwargs["mechanism"] = Mechanism(name)
        else:
            raise ValueError(f"unknown mechanism {name!r}")
        if name == "generalized":
            kwargs["phi"] = ActivationKind.SOFTPLUS
        if name == "sigmoid":
            kwargs["sigmoid_bias"] = SigmoidBias.NEG_LOG_L
            kwargs["l1_normalize"] = False
        for k, v in opts.items():
            if k == "p":
                kwargs["reweight_p"] = None if v.lower() == "none" else float(v)
            elif k == "phi":
                kwargs["phi"] = ActivationKind.parse(v)
            elif k == "l1":
                kwargs["l1_normalize"] = _parse_bool(v)
            elif k == "bias":
                kwargs["sigmoid_bias"] = SigmoidBias(v.lower().replace("-", "").replace("_", ""))
            elif k == "mode":
                kwargs["softmax_mode"] = SoftmaxMode(v.lower().replace("-", "_"))
            elif k == "protected":
                kwargs["protected_rows"] = int(v)
            else:
                raise ValueError(f"unknown option {k!r} in {text!r}")
        return cls(**kwargs)

    def with_p(self, p: Optional[float]) -> "AttentionSpec":
        return replace(self, reweight_p=p)


SOFTMAX = AttentionSpec()


@dataclass(frozen=True, eq=False)
class StructMatrices:
    """Causal structure for a length-L sequence (rows are 1-based in prose).

    additive_mask: 0 on/below the diagonal, -inf above.
    multiplicative_mask: 1 on/below, 0 above.
    token_count: row i holds i, the number of attended tokens.
    offset: all ones except the first ``protected_rows`` rows, which are 0.
    """

    additive_mask: torch.Tensor
    multiplicative_mask: torch.Tensor
    token_count: torch.Tensor
    offset: torch.Tensor
    causal: torch.Tensor  # boolean view of the multiplicative mask

    @property
    def length(self) -> int:
        return self.token_count.shape[0]


def build_struct_matrices(L: int, protected_rows: Optional[int] = None) -> StructMatrices:
    """Structure matrices for length ``L``; ``protected_rows`` defaults to min(3, L)."""
    if L < 1:
        raise DimensionError(f"sequence length must be >= 1, got {L}")
    if protected_rows is None:
        protected_rows = min(3, L)
    if not 0 <= protected_rows <= L:
        raise ParameterError(f"protected_rows must lie in [0, {L}], got {protected_rows}")
    return _struct_matrices(L, protected_rows)


@lru_cache(maxsize=64)
def _struct_matrices(L: int, protected_rows: int) -> StructMatrices:
    causal = torch.ones(L, L, dtype=torch.bool).tril()
    mult = causal.to(DTYPE)
    add = torch.zeros(L, L, dtype=DTYPE).masked_fill(~causal, float("-inf"))
    n = torch.arange(1, L + 1, dtype=DTYPE).unsqueeze(1).expand(L, L).contiguous()
    off = torch.ones(L, L, dtype=DTYPE)
    off[:protected_rows] = 0.0
    for t in (mult, add, n, off, causal):
        t.requires_grad_(False)
    return StructMatrices(add, mult, n, off, causal)


def _check_qkv(Q, K, V):
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"Q and K widths differ: {tuple(Q.shape)} vs {tuple(K.shape)}")
    if Q.shape[-2] != K.shape[-2] or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"Q, K, V lengths differ: {tuple(Q.shape)}, {tuple(K.shape)}, {tuple(V.shape)}")


def _scaled_logits(Q, K):
    _check_qkv(Q, K, K)
    d = Q.shape[-1]
    return torch.matmul(Q, K.transpose(-1, -2)) / math.sqrt(d)


def _require_finite_logits(logits):
    if not torch.isfinite(logits).all():
        finite = logits[torch.isfinite(logits)]
        mag = float(finite.abs().max()) if finite.numel() else float("inf")
        raise NumericError("non-finite attention logits", mag)


def softmax_scores(Q, K) -> torch.Tensor:
    logits = _scaled_logits(Q, K)
    _require_finite_logits(logits)
    mats = build_struct_matrices(Q.shape[-2])
    z = logits + mats.additive_mask
    z = z - z.amax(dim=-1, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def softmax_attention(Q, K, V):
    _check_qkv(Q, K, V)
    A = softmax_scores(Q, K)
    return A, torch.matmul(A, V)


def recentre_rows(A: torch.Tensor, protected_rows: int = 3) -> torch.Tensor:
    """Subtract each row's mean over its unmasked entries, leaving masked
    entries at zero and the first ``protected_rows`` rows untouched."""
    L = A.shape[-1]
    mats = build_struct_matrices(L, min(protected_rows, L))
    mean = A.sum(dim=-1, keepdim=True) / mats.token_count[:, :1]
    shifted = A - mean * mats.multiplicative_mask
    keep = torch.arange(L).unsqueeze(1) < protected_rows
    return torch.where(keep, A, shifted)


def modified_softmax(Q, K, V, mode: SoftmaxMode, protected_rows: int = 3):
    _check_qkv(Q, K, V)
    A = softmax_scores(Q, K)
    mode = SoftmaxMode(mode)
    if mode is SoftmaxMode.INVERSE:
        A = -A
    else:
        A = recentre_rows(A, protected_rows)
        if mode is SoftmaxMode.RECENTRED_L1:
            A = l1_normalize_rows(A)
    return A, torch.matmul(A, V)


def generalized_attention(Q, K, V, spec: AttentionSpec):
    _check_qkv(Q, K, V)
    logits = _scaled_logits(Q, K)
    _require_finite_logits(logits)
    mats = build_struct_matrices(Q.shape[-2])
    A = activations.apply(spec.phi, logits) * mats.multiplicative_mask
    if spec.l1_normalize:
        A = l1_normalize_rows(A)
    return A, torch.matmul(A, V)


def sigmoid_attention(Q, K, V, spec: AttentionSpec):
    _check_qkv(Q, K, V)
    logits = _scaled_logits(Q, K)
    L = Q.shape[-2]
    mats = build_struct_matrices(L)
    if spec.sigmoid_bias is SigmoidBias.NEG_LOG_L:
        logits = logits - math.log(L)
    elif spec.sigmoid_bias is SigmoidBias.NEG_LOG_N:
        logits = logits - torch.log(mats.token_count)
    A = torch.sigmoid(logits) * mats.multiplicative_mask
    if spec.l1_normalize:
        A = l1_normalize_rows(A)
    return A, torch.matmul(A, V)


def lssa_scale(d: int, L: int) -> torch.Tensor:
    """Per-row factor log(d) * log(N); row 1 is 0."""
    return math.log(d) * torch.log(build_struct_matrices(L).token_count)


def lssa(Q, K, V):
    """Length-scaled softplus attention.

    Cosine similarities of the rows of Q and K, scaled per row by
    log(d) * log(i), passed through softplus, causally masked and
    l1-normalized. No max subtraction is needed anywhere.
    """
    _check_qkv(Q, K, V)
    L, d = Q.shape[-2], Q.shape[-1]
    if d < 2:
        raise DimensionError("LSSA needs d >= 2 so that log d > 0")
    Qn = l2_normalize_rows(Q)
    Kn = l2_normalize_rows(K)
    sim = torch.matmul(Qn, Kn.transpose(-1, -2))
    mats = build_struct_matrices(L)
    A = activations.softplus(lssa_scale(d, L) * sim) * mats.multiplicative_mask
    A = l1_normalize_rows(A)
    return A, torch.matmul(A, V)


def reweight(A: torch.Tensor, p: float, mats: Optional[StructMatrices] = None,
             eps: float = DEFAULT_EPS, return_flags: bool = False):
    """Sharpen row-normalized scores: ReLU(A * N - O)^p, then l1-normalize.

    Rows with nothing left after the ReLU (sum < eps) fall back to the input
    row. Surviving entries are divided by the row maximum before the power so
    large p cannot underflow; the normalized result is unchanged by that.
    """
    if not p >= 1:
        raise ParameterError(f"re-weighting power must be >= 1, got {p}")
    L = A.shape[-1]
    if mats is None:
        mats = build_struct_matrices(L)
    elif mats.length != L:
        raise DimensionError(f"structure matrices are for L={mats.length}, scores have L={L}")
    x = torch.relu(A * mats.token_count - mats.offset)
    total = x.sum(dim=-1, keepdim=True)
    degenerate = total < eps
    peak = x.amax(dim=-1, keepdim=True)
    y = (x * torch.where(degenerate, torch.ones_like(peak), peak).reciprocal()) ** p
    out = y * torch.where(degenerate, torch.ones_like(total), y.sum(dim=-1, keepdim=True)).reciprocal()
    out = torch.where(degenerate, A, out)
    if return_flags:
        return out, degenerate.squeeze(-1)
    return out


def run_attention(Q, K, V, spec: AttentionSpec = SOFTMAX):
    m = spec.mechanism
    if m is Mechanism.SOFTMAX:
        if spec.softmax_mode is None:
            A, _ = softmax_attention(Q, K, V)
        else:
            A, _ = modified_softmax(Q, K, V, spec.softmax_mode, spec.protected_rows)
    elif m is Mechanism.GENERALIZED:
        A, _ = generalized_attention(Q, K, V, spec)
    elif m is Mechanism.SIGMOID:
        A, _ = sigmoid_attention(Q, K, V, spec)
    elif m is Mechanism.LSSA:
        A, _ = lssa(Q, K, V)
    else:
        raise ValueError(f"unhandled mechanism {m}")
    if spec.reweight_p is not None:
        L = A.shape[-1]
        A = reweight(A, spec.reweight_p, build_struct_matrices(L, min(spec.protected_rows, L)))
    return A, torch.matmul(A, V)


def attention_entropy(A: torch.Tensor) -> torch.Tensor:
    P = l1_normalize_rows(A)
    safe = torch.where(P > 0, P, torch.ones_like(P))
    return -(torch.where(P > 0, P * torch.log(safe), torch.zeros_like(P))).sum(dim=-1)


def attention_max_gap(A: torch.Tensor) -> torch.Tensor:
    if A.shape[-1] == 1:
        return torch.ones(A.shape[:-1], dtype=A.dtype)
    top = torch.topk(A, 2, dim=-1).values
    return top[..., 0] - top[..., 1]
