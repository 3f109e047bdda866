"""A tiny pre-norm decoder-only transformer with a pluggable attention layer."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn

from . import activations
from .activations import ActivationKind
from .attention import AttentionSpec, run_attention
from .errors import ConfigError, InputError
from .numcore import DTYPE
from .positional import RopeConfig, ntk_scaled_base, rope_apply

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    mlp_ratio: float = 4.0
    train_len: int = 128
    attention: AttentionSpec = field(default_factory=AttentionSpec)
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("model.vocab_size must be >= 2")
        if self.n_layers < 1:
            raise ConfigError(f"model.n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 1 or self.n_heads < 1:
            raise ConfigError("model.d_model and model.n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if self.head_dim % 2 or self.head_dim < 4:
            raise ConfigError(f"head_dim must be even and >= 4, got {self.head_dim}")
        if self.train_len < 1:
            raise ConfigError("model.train_len must be >= 1")
        if self.mlp_ratio <= 0 or int(round(self.d_model * self.mlp_ratio)) < 1:
            raise ConfigError("model.mlp_ratio must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base, train_len=self.train_len)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
            "train_len": self.train_len,
            "attention": self.attention.to_dict(),
            "rope_base": self.rope_base,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        att = d.pop("attention", None)
        if isinstance(att, str):
            att = AttentionSpec.parse(att)
        elif isinstance(att, dict):
            att = AttentionSpec.from_dict(att)
        elif att is None:
            att = AttentionSpec()
        known = {"vocab_size", "n_layers", "d_model", "n_heads", "mlp_ratio", "train_len", "rope_base", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model field(s): {', '.join(sorted(unknown))}")
        return cls(attention=att, **d)

    def with_attention(self, spec: AttentionSpec) -> "ModelConfig":
        return replace(self, attention=spec)


def param_count(cfg: ModelConfig) -> int:
    d, m = cfg.d_model, cfg.d_mlp
    per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * m + m) + (m * d + d)
    return cfg.vocab_size * d + cfg.n_layers * per_block + 2 * d


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(d, dtype=DTYPE)
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d, dtype=DTYPE)
        self.fc = nn.Linear(d, cfg.d_mlp, dtype=DTYPE)
        self.fc_out = nn.Linear(cfg.d_mlp, d, dtype=DTYPE)

    def forward(self, x, rope_base: float):
        cfg = self.cfg
        B, T, d = x.shape
        H, hd = cfg.n_heads, cfg.head_dim
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(B, T, H, hd).transpose(1, 2)
        k = k.view(B, T, H, hd).transpose(1, 2)
        v = v.view(B, T, H, hd).transpose(1, 2)
        rope = cfg.rope
        q = rope_apply(q, rope, rope_base)
        k = rope_apply(k, rope, rope_base)
        scores, out = run_attention(q, k, v, cfg.attention)
        x = x + self.proj(out.transpose(1, 2).reshape(B, T, d))
        h = activations.apply(ActivationKind.GELU, self.fc(self.ln2(x)))
        return x + self.fc_out(h), scores


class TinyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.wte = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model, dtype=DTYPE)

    def forward(self, tokens: torch.Tensor, eval_len: Optional[int] = None, return_attn: bool = False):
        """Logits for ``tokens`` of shape (T,) or (B, T).

        RoPE uses the NTK base for ``eval_len`` (defaults to the input length).
        With ``return_attn`` the final layer's scores (B, H, T, T) come back too.
        """
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        T = tokens.shape[1]
        eval_len = T if eval_len is None else eval_len
        if T > eval_len:
            raise InputError(f"input length {T} exceeds eval_len {eval_len}")
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.cfg.vocab_size):
            raise InputError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        base = ntk_scaled_base(self.cfg.rope, eval_len)
        x = self.wte(tokens)
        scores = None
        for blk in self.blocks:
            x, scores = blk(x, base)
        logits = self.ln_f(x) @ self.wte.weight.t()
        if squeeze:
            logits = logits.squeeze(0)
            scores = scores.squeeze(0)
        return (logits, scores) if return_attn else logits


@dataclass(eq=False)
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        self._module: Optional[TinyTransformer] = None
        expected = {k: tuple(v.shape) for k, v in _shapes(self.config).items()}
        got = {k: tuple(v.shape) for k, v in self.params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
            raise ConfigError(f"checkpoint tensors do not match config (missing={missing}, extra={extra}, shape={bad})")

    def new_module(self) -> TinyTransformer:
        """A fresh model holding a copy of these parameters."""
        with torch.random.fork_rng():
            m = TinyTransformer(self.config)
        m.load_state_dict(self.params)
        return m

    def module(self) -> TinyTransformer:
        """Shared evaluation-mode model for this checkpoint (built once)."""
        if self._module is None:
            self._module = self.new_module().eval()
        return self._module

    @classmethod
    def from_module(cls, module: TinyTransformer, step: int) -> "Checkpoint":
        params = OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())
        return cls(module.cfg, params, step=step)

    def n_params(self) -> int:
        return sum(t.numel() for t in self.params.values())


def _shapes(cfg: ModelConfig):
    with torch.random.fork_rng():
        with torch.device("meta"):
            m = TinyTransformer(cfg)
    return m.state_dict()


def init(cfg: ModelConfig) -> Checkpoint:
    """Seeded GPT-2-style initialization: N(0, 0.02) weights and embeddings,
    residual output projections at 0.02 / sqrt(2 * n_layers), zero biases,
    unit LayerNorm gains."""
    gen = torch.Generator().manual_seed(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    params = OrderedDict()
    for name, t in _shapes(cfg).items():
        shape = tuple(t.shape)
        if name.endswith("bias"):
            val = torch.zeros(shape, dtype=DTYPE)
        elif ".ln" in name or name.startswith("ln_f"):
            val = torch.ones(shape, dtype=DTYPE)
        else:
            std = resid_std if name.endswith(("proj.weight", "fc_out.weight")) else 0.02
            val = torch.randn(shape, generator=gen, dtype=DTYPE) * std
        params[name] = val
    return Checkpoint(cfg, params, step=0)


def forward(ckpt: Checkpoint, tokens, eval_len: Optional[int] = None, return_attn: bool = False):
    if not isinstance(tokens, torch.Tensor):
        tokens = torch.as_tensor(list(tokens), dtype=torch.long)
    with torch.no_grad():
        return ckpt.module()(tokens.long(), eval_len, return_attn=return_attn)


def loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy via a max-shifted log-softmax."""
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise InputError(f"{logits.shape[0]} logit rows for {targets.shape[0]} targets")
    logp = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -logp.gather(1, targets.unsqueeze(1)).mean()


def encode(text) -> torch.Tensor:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return torch.frombuffer(bytearray(data), dtype=torch.uint8).long()


def decode(tokens: Sequence[int]) -> str:
    return bytes(int(t) for t in tokens).decode("utf-8", errors="replace")
