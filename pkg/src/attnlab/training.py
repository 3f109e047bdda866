"""Deterministic toy-scale training, multi-length evaluation and sweeps."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch

from .attention import AttentionSpec, attention_entropy, attention_max_gap
from .errors import ConfigError, InputError, TrainingAborted
from .model import Checkpoint, ModelConfig, TinyTransformer, init, loss as ce_loss

log = logging.getLogger(__name__)

REPORT_HEADER = ["mechanism", "p", "eval_len", "val_loss", "mean_entropy", "mean_max_gap", "wall_time_s"]

CorpusLike = Union[str, Path, bytes, bytearray, torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 100
    weight_decay: float = 0.1
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    corpus_path: Optional[str] = None
    val_fraction: float = 0.1
    seed: int = 0
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"training.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size must be >= 1")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigError(f"training.val_fraction must lie in (0, 0.5), got {self.val_fraction}")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0 or self.warmup_steps < 0:
            raise ConfigError("training.lr, weight_decay, warmup_steps must be >= 0 and grad_clip > 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("training.betas must be two floats in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr,
            "warmup_steps": self.warmup_steps, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "grad_clip": self.grad_clip,
            "corpus_path": self.corpus_path, "val_fraction": self.val_fraction,
            "seed": self.seed, "min_lr_ratio": self.min_lr_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training field(s): {', '.join(sorted(unknown))}")
        if "betas" in d:
            d["betas"] = tuple(float(b) for b in d["betas"])
        return cls(**d)


def load_corpus(corpus: CorpusLike) -> torch.Tensor:
    """Corpus as a 1-D long tensor of byte values."""
    if isinstance(corpus, torch.Tensor):
        return corpus.long()
    if isinstance(corpus, (bytes, bytearray)):
        data = bytes(corpus)
    else:
        path = Path(corpus)
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read corpus {path}: {exc}") from exc
    if not data:
        raise InputError("corpus is empty")
    return torch.frombuffer(bytearray(data), dtype=torch.uint8).long()


def split_corpus(data: torch.Tensor, val_fraction: float) -> Tuple[torch.Tensor, torch.Tensor]:
    n_val = int(len(data) * val_fraction)
    return data[: len(data) - n_val], data[len(data) - n_val:]


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * lr`` at the last step."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps - 1)
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.min_lr_ratio * cfg.lr
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * frac))


def batch_stream(data: torch.Tensor, seq_len: int, batch_size: int, seed: int):
    """Infinite seeded stream of (inputs, targets) windows."""
    n = len(data) - seq_len - 1
    if n < 1:
        raise InputError(f"corpus of {len(data)} bytes is too short for windows of {seq_len + 1}")
    gen = torch.Generator().manual_seed(seed)
    offsets = torch.arange(seq_len + 1)
    while True:
        starts = torch.randint(0, n + 1, (batch_size,), generator=gen)
        w = data[starts.unsqueeze(1) + offsets]
        yield w[:, :-1], w[:, 1:]


def _optimizer(module: TinyTransformer, cfg: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.lr, betas=cfg.betas, eps=1e-8)


def _max_abs_grad(module: TinyTransformer) -> float:
    vals = [p.grad.abs().max().item() for p in module.parameters() if p.grad is not None]
    return max(vals) if vals else 0.0


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Optional[CorpusLike] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> Tuple[Checkpoint, List[float]]:
    """Train from a seeded initialization and return (checkpoint, per-step loss).

    Raises :class:`TrainingAborted` on a non-finite loss or gradient norm.
    """
    if corpus is None:
        if train_cfg.corpus_path is None:
            raise ConfigError("training.corpus_path is required")
        corpus = train_cfg.corpus_path
    data = load_corpus(corpus)
    if len(data) < 100 * model_cfg.train_len:
        raise InputError(f"corpus has {len(data)} bytes; need at least {100 * model_cfg.train_len} "
                         f"(100 x train_len)")
    train_data, _ = split_corpus(data, train_cfg.val_fraction)

    module = init(model_cfg).new_module()
    module.train()
    opt = _optimizer(module, train_cfg)
    batches = batch_stream(train_data, model_cfg.train_len, train_cfg.batch_size, train_cfg.seed)
    label = model_cfg.attention.display_name
    history: List[float] = []
    for step in range(train_cfg.steps):
        lr = lr_at(step, train_cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        x, y = next(batches)
        opt.zero_grad(set_to_none=True)
        try:
            loss = ce_loss(module(x, model_cfg.train_len), y)
        except ArithmeticError as exc:
            raise TrainingAborted(step, label, _max_abs_grad(module), reason=str(exc)) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(step, label, _max_abs_grad(module))
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(module.parameters(), train_cfg.grad_clip)
        if not math.isfinite(gnorm.item()):
            raise TrainingAborted(step, label, _max_abs_grad(module), reason="non-finite gradient")
        opt.step()
        history.append(value)
        if on_step is not None:
            on_step(step, value)
    module.eval()
    return Checkpoint.from_module(module, step=train_cfg.steps), history


@dataclass(frozen=True)
class EvalResult:
    val_loss: float
    mean_entropy: float
    mean_max_gap: float


def evaluate(ckpt: Checkpoint, eval_len: int, corpus: CorpusLike, max_batches: int = 8,
             batch_tokens: int = 2048) -> EvalResult:
    """Loss over non-overlapping windows of ``eval_len`` input tokens.

    Each batch holds ``max(1, batch_tokens // eval_len)`` windows so every
    length sees roughly the same number of tokens. Entropy and max gap are
    read from the final layer's last query row, averaged over heads and
    windows.
    """
    if eval_len < 2:
        raise InputError("eval_len must be >= 2")
    data = load_corpus(corpus)
    n_windows = (len(data) - 1) // eval_len
    if n_windows < 1:
        raise InputError(f"corpus of {len(data)} bytes is shorter than eval_len + 1 = {eval_len + 1}")
    per_batch = max(1, batch_tokens // eval_len)
    n_windows = min(n_windows, per_batch * max_batches)
    module = ckpt.module()
    total_loss = total_ent = total_gap = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, n_windows, per_batch):
            idx = torch.arange(start, min(start + per_batch, n_windows))
            offs = idx.unsqueeze(1) * eval_len + torch.arange(eval_len + 1)
            w = data[offs]
            logits, scores = module(w[:, :-1], eval_len, return_attn=True)
            b = len(idx)
            total_loss += ce_loss(logits, w[:, 1:]).item() * b
            last = scores[:, :, -1:, :]
            total_ent += attention_entropy(last).mean(dim=(1, 2)).sum().item()
            total_gap += attention_max_gap(last).mean(dim=(1, 2)).sum().item()
            count += b
    return EvalResult(total_loss / count, total_ent / count, total_gap / count)


@dataclass
class ReportRow:
    mechanism: str
    p: Optional[float]
    eval_len: int
    val_loss: float
    mean_entropy: float
    mean_max_gap: float
    wall_time_s: float


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def _parse_opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


@dataclass
class ExperimentReport:
    rows: List[ReportRow] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)
    final_train_loss: dict = field(default_factory=dict)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.mechanism, _fmt(r.p), r.eval_len, _fmt(r.val_loss), _fmt(r.mean_entropy),
                        _fmt(r.mean_max_gap), _fmt(r.wall_time_s)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ExperimentReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != REPORT_HEADER:
            raise InputError(f"unexpected report header {header}")
        rep = cls()
        for rec in reader:
            rep.add(ReportRow(rec[0], _parse_opt_float(rec[1]), int(rec[2]), float(rec[3]), float(rec[4]),
                              float(rec[5]), float(rec[6])))
        return rep

    def groups(self):
        """Rows grouped by (mechanism, p), in first-appearance order."""
        out: dict = {}
        for r in self.rows:
            out.setdefault((r.mechanism, r.p), []).append(r)
        return out

    def lookup(self, mechanism: str, p: Optional[float], eval_len: int) -> ReportRow:
        for r in self.rows:
            if r.mechanism == mechanism and r.p == p and r.eval_len == eval_len:
                return r
        raise KeyError((mechanism, p, eval_len))


def _log_progress(label: str, every: int = 100):
    def on_step(step, value):
        if step % every == 0:
            log.info("%s step %d loss %.4f", label, step, value)
    return on_step


def _run_cell(base_cfg: ModelConfig, train_cfg: TrainConfig, spec: AttentionSpec, eval_lens: Sequence[int],
              corpus: CorpusLike, max_batches: int):
    cfg = base_cfg.with_attention(spec)
    data = load_corpus(corpus)
    _, val = split_corpus(data, train_cfg.val_fraction)
    t0 = time.perf_counter()
    try:
        ckpt, history = train(cfg, train_cfg, data, on_step=_log_progress(spec.display_name))
    except TrainingAborted as exc:
        return None, None, str(exc), time.perf_counter() - t0
    train_time = time.perf_counter() - t0
    results = []
    for L in eval_lens:
        t1 = time.perf_counter()
        try:
            res = evaluate(ckpt, L, val, max_batches=max_batches)
        except ArithmeticError as exc:
            res = EvalResult(float("nan"), float("nan"), float("nan"))
            results.append((L, res, time.perf_counter() - t1, f"{spec.display_name} eval at {L}: {exc}"))
            continue
        results.append((L, res, time.perf_counter() - t1, None))
    return results, history[-1], None, train_time


def sweep(base_cfg: ModelConfig, train_cfg: TrainConfig, mechanisms: Sequence[AttentionSpec],
          eval_lens: Sequence[int], corpus: Optional[CorpusLike] = None, max_batches: int = 8,
          jobs: int = 1, on_row: Optional[Callable[[ReportRow], None]] = None) -> ExperimentReport:
    """Train one model per mechanism (same seeds and data order) and evaluate
    each at every length. Aborted runs become NaN rows plus a diagnostic.

    ``wall_time_s`` is the cell's evaluation time; the training time of the
    mechanism is added to its first row.
    """
    if not eval_lens:
        raise ConfigError("eval_lens must be nonempty")
    if any(L < 2 for L in eval_lens):
        raise ConfigError("every eval length must be >= 2")
    eval_lens = sorted(set(int(L) for L in eval_lens))
    if corpus is None:
        if train_cfg.corpus_path is None:
            raise ConfigError("training.corpus_path is required")
        corpus = train_cfg.corpus_path
    if not isinstance(corpus, torch.Tensor):
        corpus = load_corpus(corpus)
    args = [(base_cfg, train_cfg, spec, eval_lens, corpus, max_batches) for spec in mechanisms]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell_star, args))
    else:
        outcomes = [_run_cell(*a) for a in args]

    report = ExperimentReport()
    nan = float("nan")
    for spec, (results, final_loss, abort, train_time) in zip(mechanisms, outcomes):
        if results is None:
            report.diagnostics.append(abort)
            log.warning("%s", abort)
            for i, L in enumerate(eval_lens):
                row = ReportRow(spec.label, spec.reweight_p, L, nan, nan, nan, train_time if i == 0 else 0.0)
                report.add(row)
                if on_row:
                    on_row(row)
            continue
        report.final_train_loss[spec.display_name] = final_loss
        for i, (L, res, dt, diag) in enumerate(results):
            if diag:
                report.diagnostics.append(diag)
            row = ReportRow(spec.label, spec.reweight_p, L, res.val_loss, res.mean_entropy, res.mean_max_gap,
                            dt + (train_time if i == 0 else 0.0))
            report.add(row)
            if on_row:
                on_row(row)
    return report


def _run_cell_star(a):
    return _run_cell(*a)
