"""Perplexity-ratio scoring of a sequence under the observer/performer pair.

Scored positions: for a sequence of length L with prompt_len p, targets
p'..L-1 are scored where p' = max(p, 1) — the first token has no
conditioning context, and prompt tokens condition but are never scored.
All quantities are in nats per scored token. The ratio's denominator is
guarded: |log XPPL| below eps_denom raises instead of returning an
unbounded value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import TokenSeq
from .errors import DegenerateDenominator, ScoringError, ShapeError
from .model import TransformerLM, forward

EPS_DENOM = 1e-6


@dataclass(frozen=True)
class BinocularsScore:
    log_ppl: float
    log_xppl: float
    score: float
    seq_len: int


def scored_start(s: TokenSeq | list[int]) -> int:
    p = s.prompt_len if isinstance(s, TokenSeq) else 0
    return max(p, 1)


def _check_pair(observer_logits: nx.Tensor, performer_logits: nx.Tensor) -> None:
    if observer_logits.shape != performer_logits.shape:
        raise ShapeError(
            f"observer {observer_logits.shape} vs performer {performer_logits.shape}"
        )


def _aligned_rows(logits: nx.Tensor, length: int, start: int) -> nx.Tensor:
    if logits.data.ndim != 2 or logits.shape[0] != length:
        raise ShapeError(f"logits {logits.shape} do not match sequence length {length}")
    if length - start < 1:
        raise ScoringError(f"no scored positions (length {length}, start {start})")
    return nx.slice_axis0(logits, start - 1, length - 1)


def log_perplexity_graph(observer_logits: nx.Tensor, s: TokenSeq) -> nx.Tensor:
    """Mean negative log-probability of the actual next tokens (scalar tensor)."""
    start = scored_start(s)
    rows = _aligned_rows(observer_logits, len(s), start)
    return nx.cross_entropy(nx.log_softmax(rows), s.tokens[start:])


def log_perplexity(observer_logits: nx.Tensor, s: TokenSeq) -> float:
    return log_perplexity_graph(observer_logits, s).item()


def cross_perplexity_graph(
    observer_logits: nx.Tensor, performer_logits: nx.Tensor, prompt_len: int = 0
) -> nx.Tensor:
    """Mean cross-entropy from observer's to performer's next-token
    distribution, log-space with explicit exp of the observer log-probs."""
    _check_pair(observer_logits, performer_logits)
    length = observer_logits.shape[0]
    start = max(prompt_len, 1)
    obs_rows = _aligned_rows(observer_logits, length, start)
    perf_rows = _aligned_rows(performer_logits, length, start)
    obs_p = nx.exp(nx.log_softmax(obs_rows))
    perf_lp = nx.log_softmax(perf_rows)
    return nx.mean(nx.mul(nx.sum_(nx.mul(obs_p, perf_lp), axis=-1), -1.0))


def cross_perplexity(
    observer_logits: nx.Tensor, performer_logits: nx.Tensor, prompt_len: int = 0
) -> float:
    return cross_perplexity_graph(observer_logits, performer_logits, prompt_len).item()


def score_from_logits(
    observer_logits: nx.Tensor,
    performer_logits: nx.Tensor,
    s: TokenSeq,
    numerator: str = "observer",
    eps_denom: float = EPS_DENOM,
) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """(log_ppl, log_xppl, score) as scalar tensors, differentiable when taped.

    numerator selects which model's log-perplexity forms the ratio's top;
    "observer" is the definitional choice, "performer" the algorithmic
    alternative.
    """
    _check_pair(observer_logits, performer_logits)
    if numerator == "observer":
        lp = log_perplexity_graph(observer_logits, s)
    elif numerator == "performer":
        lp = log_perplexity_graph(performer_logits, s)
    else:
        raise ShapeError(f"numerator must be observer or performer, got {numerator!r}")
    xp = cross_perplexity_graph(observer_logits, performer_logits, s.prompt_len)
    denom = xp.item()
    if not np.isfinite(denom) or abs(denom) < eps_denom:
        raise DegenerateDenominator(f"|log XPPL| = {abs(denom):.3e} < {eps_denom}")
    return lp, xp, nx.div(lp, xp)


def binoculars_score(
    model: TransformerLM, s: TokenSeq, numerator: str = "observer"
) -> BinocularsScore:
    """Score one sequence with the attached observer/performer adapters."""
    obs = forward(model, "observer", s)
    perf = forward(model, "performer", s)
    lp, xp, ratio = score_from_logits(obs, perf, s, numerator=numerator)
    return BinocularsScore(
        log_ppl=lp.item(), log_xppl=xp.item(), score=ratio.item(), seq_len=len(s)
    )
