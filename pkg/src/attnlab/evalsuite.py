"""Passkey retrieval harness and training-free attention smoothing probes."""
from __future__ import annotations

import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple, Union

import torch

from .attention import AttentionSpec, attention_entropy, attention_max_gap, run_attention
from .errors import InputError
from .model import Checkpoint, forward
from .numcore import DTYPE

FILLER = b"The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. "
PROMPT = b"What is the pass key? The pass key is "
KEY_DIGITS = 5
MIN_CTX = 128


@dataclass(frozen=True)
class PasskeySample:
    tokens: bytes
    passkey: int
    key_span: Tuple[int, int]
    prompt_span: Tuple[int, int]
    seed: int

    @property
    def answer(self) -> bytes:
        return str(self.passkey).encode("ascii")


def _key_sentence(passkey: int) -> bytes:
    return b"The pass key is " + str(passkey).encode("ascii") + b". Remember it. "


def _filler(n: int, phase: int = 0) -> bytes:
    reps = (n + phase) // len(FILLER) + 2
    return (FILLER * reps)[phase:phase + n]


def generate_passkey(ctx_len: int, seed: int) -> PasskeySample:
    """Distractor text of exactly ``ctx_len`` bytes with one key sentence at a
    uniformly drawn offset, ending in the answer prompt."""
    key_len = len(_key_sentence(10000))
    if ctx_len < MIN_CTX or ctx_len < key_len + len(PROMPT):
        raise InputError(f"ctx_len {ctx_len} is too small (minimum {MIN_CTX})")
    rng = random.Random(f"passkey:{ctx_len}:{seed}")
    passkey = rng.randint(10 ** (KEY_DIGITS - 1), 10 ** KEY_DIGITS - 1)
    room = ctx_len - key_len - len(PROMPT)
    pos = rng.randint(0, room)
    key = _key_sentence(passkey)
    tokens = _filler(pos) + key + _filler(room - pos, phase=pos % len(FILLER)) + PROMPT
    start = pos + len(b"The pass key is ")
    return PasskeySample(
        tokens=tokens,
        passkey=passkey,
        key_span=(start, start + KEY_DIGITS),
        prompt_span=(ctx_len - len(PROMPT), ctx_len),
        seed=seed,
    )


# A predictor maps a 1-D token tensor to (len, vocab) logits.
Predictor = Callable[[torch.Tensor], torch.Tensor]


def checkpoint_predictor(ckpt: Checkpoint, eval_len: int) -> Predictor:
    return lambda toks: forward(ckpt, toks, eval_len)


def greedy_decode(predict: Predictor, tokens: bytes, n: int) -> List[int]:
    seq = torch.tensor(list(tokens), dtype=torch.long)
    out = []
    for _ in range(n):
        logits = predict(seq)[-1]
        if not torch.isfinite(logits).all():
            raise ArithmeticError("non-finite logits during decoding")
        nxt = int(torch.argmax(logits))
        out.append(nxt)
        seq = torch.cat([seq, torch.tensor([nxt])])
    return out


@dataclass
class PasskeyResult:
    ctx_len: int
    trials: int
    correct: int
    diagnostics: List[str]

    @property
    def accuracy(self) -> float:
        return self.correct / self.trials


def _trial(predict: Predictor, ctx_len: int, seed: int):
    sample = generate_passkey(ctx_len, seed)
    try:
        got = greedy_decode(predict, sample.tokens, KEY_DIGITS)
    except ArithmeticError as exc:
        return False, f"ctx_len={ctx_len} seed={seed}: {exc}"
    return bytes(got) == sample.answer, None


def trial_seeds(seed: int, trials: int) -> List[int]:
    return [seed * 1_000_003 + t for t in range(trials)]


def passkey_accuracy(model: Union[Checkpoint, Callable[[int], Predictor]], ctx_lens: Sequence[int],
                     trials: int = 100, seed: int = 0, jobs: int = 1) -> List[PasskeyResult]:
    """Exact-match accuracy of greedy 5-digit decoding at each context length.

    ``model`` is a checkpoint or a factory ``eval_len -> predictor`` (handy
    for stubs). The NTK base is set for the full decoded length.
    """
    if trials < 1:
        raise InputError("trials must be >= 1")
    results = []
    for L in ctx_lens:
        eval_len = L + KEY_DIGITS
        predict = checkpoint_predictor(model, eval_len) if isinstance(model, Checkpoint) else model(eval_len)
        seeds = trial_seeds(seed, trials)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(lambda s: _trial(predict, L, s), seeds))
        else:
            outcomes = [_trial(predict, L, s) for s in seeds]
        correct = sum(ok for ok, _ in outcomes)
        diags = [d for _, d in outcomes if d]
        results.append(PasskeyResult(L, trials, correct, diags))
    return results


def oracle_predictor(vocab_size: int = 256) -> Predictor:
    """Stub that reads the key out of the context and always answers it."""
    marker = b"The pass key is "

    def predict(seq: torch.Tensor) -> torch.Tensor:
        data = bytes(seq.tolist())
        start = data.find(marker) + len(marker)
        answered = len(data) - data.rfind(PROMPT) - len(PROMPT)
        nxt = data[start + answered]
        logits = torch.zeros(len(data), vocab_size, dtype=DTYPE)
        logits[-1, nxt] = 1.0
        return logits

    return predict


def constant_predictor(byte: int = ord("0"), vocab_size: int = 256) -> Predictor:
    def predict(seq: torch.Tensor) -> torch.Tensor:
        logits = torch.zeros(len(seq), vocab_size, dtype=DTYPE)
        logits[:, byte] = 1.0
        return logits

    return predict


def smoothing_probe(spec: AttentionSpec, d: int, lens: Sequence[int], samples: int = 16,
                    seed: int = 0) -> List[Tuple[int, float, float]]:
    """Mean last-row entropy and max gap on Gaussian Q, K for each length.

    Returns ``[(L, mean_entropy, mean_max_gap), ...]``.
    """
    if not lens:
        raise InputError("lens must be nonempty")
    if d < 2:
        raise InputError("d must be >= 2")
    out = []
    for L in lens:
        gen = torch.Generator().manual_seed(seed * 7919 + L)
        Q = torch.randn(samples, L, d, generator=gen, dtype=DTYPE)
        K = torch.randn(samples, L, d, generator=gen, dtype=DTYPE)
        V = torch.zeros(samples, L, 1, dtype=DTYPE)
        with torch.no_grad():
            A, _ = run_attention(Q, K, V, spec)
        last = A[:, -1:, :]
        out.append((L, attention_entropy(last).mean().item(), attention_max_gap(last).mean().item()))
    return out

