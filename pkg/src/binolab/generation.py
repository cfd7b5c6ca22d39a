"""Autoregressive sampling from the performer adapter.

Sampling is a pure function of (weights, prompt, config): next-token draws
use inverse-CDF sampling on one uniform from a counter-based stream, so a
given seed always reproduces the same continuation regardless of what else
ran first. No tape is active during generation, so nothing is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import EOS, TokenSeq
from .errors import ConfigError, SequenceLengthError
from .model import TransformerLM, forward
from .rng import stream


@dataclass(frozen=True)
class SamplerConfig:
    max_new_tokens: int = 64
    temperature: float = 1.0
    top_k: int = 0  # 0 disables the filter
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")


def sample_next(logits_row: np.ndarray, temperature: float, top_k: int, u: float) -> int:
    """Draw one token id from a logits row using a single uniform u in [0, 1).

    temperature 0 (or top_k 1) is greedy argmax; otherwise optionally keep
    the top_k logits, then inverse-CDF sample the tempered softmax.
    """
    x = np.asarray(logits_row, dtype=np.float64)
    if temperature == 0.0 or top_k == 1:
        return int(np.argmax(x))
    if top_k > 0 and top_k < x.size:
        keep = np.argsort(-x, kind="stable")[:top_k]
        filtered = np.full_like(x, -np.inf)
        filtered[keep] = x[keep]
        x = filtered
    x = x / temperature
    x = x - x.max()
    p = np.exp(x)
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), u, side="right"))


def generate(
    model: TransformerLM,
    prompt: TokenSeq | list[int],
    cfg: SamplerConfig,
    adapter_role: str | None = "performer",
    rng: np.random.Generator | None = None,
) -> TokenSeq:
    """Sampled continuation of `prompt`; stops early on EOS (not appended)."""
    tokens = list(prompt.tokens if isinstance(prompt, TokenSeq) else prompt)
    if not tokens:
        raise ConfigError("prompt must be non-empty")
    if len(tokens) + cfg.max_new_tokens > model.config.context_len:
        raise SequenceLengthError(
            f"prompt {len(tokens)} + max_new_tokens {cfg.max_new_tokens} "
            f"exceeds context {model.config.context_len}"
        )
    if rng is None:
        rng = stream(cfg.seed, "generate")
    prompt_len = len(tokens)
    for _ in range(cfg.max_new_tokens):
        logits = forward(model, adapter_role, tokens)
        u = float(rng.random())
        nxt = sample_next(logits.data[-1], cfg.temperature, cfg.top_k, u)
        if nxt == EOS:
            break
        tokens.append(nxt)
    return TokenSeq(tokens=tokens, origin="generated", prompt_len=prompt_len)
