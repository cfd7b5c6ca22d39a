"""Objective formulations and the adapter-training loop.

Seven selectable objective variants cover the published formulas and their
appendix alternatives. ``constrained_separation`` (the default) minimizes
the real-vs-generated score separation subject to a fluency budget enforced
by a barrier on the task loss; ``eq1``/``alg1`` are the min-max form as
printed; ``hybrid``, ``separate``, ``xppl_align`` and ``xppl_align_flipped``
are the alternative formulations. Split variants (``separate``,
``xppl_align``) alternate a performer phase and an observer phase per step,
each treating the other model's logits as constants.

Generated tokens are constants: no gradient flows through the sampling
choice, only through scoring of the fixed tokens.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .binoculars import (
    cross_perplexity_graph,
    log_perplexity,
    log_perplexity_graph,
    score_from_logits,
)
from .checkpoint import save_checkpoint
from .data import Corpus, TokenSeq, sample_batch
from .errors import ConfigError, DegenerateDenominator, NumericalError, ScoringError
from .generation import SamplerConfig, generate
from .model import TransformerLM, forward
from .rng import stream

logger = logging.getLogger(__name__)

JOINT_VARIANTS = ("eq1", "alg1", "constrained_separation", "hybrid", "xppl_align_flipped")
SPLIT_VARIANTS = ("separate", "xppl_align")
VARIANTS = JOINT_VARIANTS + SPLIT_VARIANTS
BARRIERS = ("none", "exponential", "quadratic")

# exp barrier is clamped at exp(_EXP_CLAMP) to keep float32 buffers finite
_EXP_CLAMP = 50.0

METRICS_HEADER = ["step", "task_loss", "b_real", "b_gen", "barrier", "total", "skipped"]


@dataclass(frozen=True)
class TrainingConfig:
    lambda_: float = 1e-2
    l0: float | str = "auto"
    barrier: str = "exponential"
    objective_variant: str = "constrained_separation"
    learning_rate: float = 1e-3
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    gen_len: int = 48
    gen_temperature: float = 1.0
    gen_top_k: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError("lambda must be >= 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.objective_variant not in VARIANTS:
            raise ConfigError(f"unknown objective_variant {self.objective_variant!r}")
        if self.barrier not in BARRIERS:
            raise ConfigError(f"unknown barrier {self.barrier!r}")
        if self.objective_variant == "constrained_separation" and self.barrier == "none":
            raise ConfigError("constrained_separation requires an exponential or quadratic barrier")
        if self.objective_variant != "constrained_separation" and self.barrier != "none":
            raise ConfigError(f"{self.objective_variant} embeds no constraint; set barrier=none")
        if isinstance(self.l0, str) and self.l0 != "auto":
            raise ConfigError("l0 must be a number or 'auto'")


@dataclass
class LossBreakdown:
    """Per-step averages. For the xppl variants the b_real/b_gen slots carry
    the cross-perplexity values (the scores are never formed there)."""

    task_loss: float
    b_real: float
    b_gen: float
    barrier_value: float
    total: float
    step: int
    skipped: int = 0


def task_loss(performer_logits: nx.Tensor, s: TokenSeq) -> nx.Tensor:
    """Mean next-token cross-entropy of the performer on s (scalar tensor).

    Same position alignment as the observer's log-perplexity, applied to
    the performer's logits.
    """
    return log_perplexity_graph(performer_logits, s)


def barrier_exp(task: nx.Tensor | float, l0: float) -> nx.Tensor:
    """exp(task - l0): tiny while fluent, steep once the budget is exceeded."""
    t = nx.sub(task, l0)
    if float(np.max(t.data)) > _EXP_CLAMP:
        logger.warning("exponential barrier clamped at exp(%.0f)", _EXP_CLAMP)
        t = nx.clip_max(t, _EXP_CLAMP)
    return nx.exp(t)


def barrier_quad(task: nx.Tensor | float, l0: float) -> nx.Tensor:
    """max(task - l0, 0)^2: exterior point — zero value and gradient inside."""
    r = nx.relu(nx.sub(task, l0))
    return nx.mul(r, r)


def _barrier(task: nx.Tensor, l0: float, kind: str) -> nx.Tensor:
    if kind == "exponential":
        return barrier_exp(task, l0)
    if kind == "quadratic":
        return barrier_quad(task, l0)
    raise ConfigError(f"unknown barrier {kind!r}")


@dataclass
class LossParts:
    """Inputs to the loss composition; tensors while training, plain floats
    acceptable for standalone evaluation of the formulas."""

    task: nx.Tensor | float
    b_real: nx.Tensor | float | None = None
    b_gen: nx.Tensor | float | None = None
    xppl_real: nx.Tensor | float | None = None
    xppl_gen: nx.Tensor | float | None = None


@dataclass
class ComposedLoss:
    total: nx.Tensor | None = None       # joint variants
    performer: nx.Tensor | None = None   # split variants
    observer: nx.Tensor | None = None
    barrier: nx.Tensor | None = None

    def total_value(self) -> float:
        if self.total is not None:
            return self.total.item()
        return self.performer.item() + self.observer.item()


def compose_total_loss(parts: LossParts, cfg: TrainingConfig, l0: float = 0.0) -> ComposedLoss:
    """Assemble the scalar objective(s) for the configured variant."""
    v = cfg.objective_variant
    lam = cfg.lambda_
    task = nx._as_tensor(parts.task)

    def need(name):
        val = getattr(parts, name)
        if val is None:
            raise ConfigError(f"variant {v} needs {name}")
        return nx._as_tensor(val)

    if v in ("eq1", "alg1"):
        total = nx.sub(task, nx.mul(nx.add(need("b_real"), need("b_gen")), lam))
        return ComposedLoss(total=total)
    if v == "constrained_separation":
        bar = _barrier(task, l0, cfg.barrier)
        sep = nx.sub(need("b_real"), need("b_gen"))
        return ComposedLoss(total=nx.add(bar, nx.mul(sep, lam)), barrier=bar)
    if v == "hybrid":
        total = nx.add(nx.sub(task, nx.mul(need("b_real"), lam)), need("b_gen"))
        return ComposedLoss(total=total)
    if v == "xppl_align_flipped":
        total = nx.add(nx.sub(task, nx.mul(need("xppl_real"), lam)), need("xppl_gen"))
        return ComposedLoss(total=total)
    if v == "separate":
        perf = nx.sub(task, nx.mul(need("b_real"), lam))
        return ComposedLoss(performer=perf, observer=need("b_gen"))
    if v == "xppl_align":
        perf = nx.add(task, need("xppl_real"))
        return ComposedLoss(performer=perf, observer=nx.mul(need("xppl_gen"), -1.0))
    raise ConfigError(f"unknown objective_variant {v!r}")


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Moments are kept in float64 regardless of the model width so barrier
    spikes cannot overflow the second moment.
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.data.shape, dtype=np.float64) for p in self.params]

    def step(self, grad_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) * grad_scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps))
            if self.weight_decay:
                upd = upd + self.lr * self.weight_decay * p.data.astype(np.float64)
            p.data = (p.data.astype(np.float64) - upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainState:
    opt_joint: AdamW | None = None
    opt_performer: AdamW | None = None
    opt_observer: AdamW | None = None
    l0_ema: float | None = None
    l0_frozen: float | None = None
    skipped_total: int = 0
    processed_total: int = 0
    last_breakdown: LossBreakdown | None = None

    def all_optimizers(self) -> list[AdamW]:
        return [o for o in (self.opt_joint, self.opt_performer, self.opt_observer) if o]


L0_WARMUP_STEPS = 50
L0_EMA_DECAY = 0.99


def init_train_state(model: TransformerLM, cfg: TrainingConfig) -> TrainState:
    for role in ("performer", "observer"):
        if role not in model.adapters:
            raise ConfigError(f"model is missing the {role} adapter")
    perf = model.adapters["performer"].tensors()
    obs = model.adapters["observer"].tensors()
    state = TrainState()
    if cfg.objective_variant in SPLIT_VARIANTS:
        state.opt_performer = AdamW(perf, cfg.learning_rate, weight_decay=cfg.weight_decay)
        state.opt_observer = AdamW(obs, cfg.learning_rate, weight_decay=cfg.weight_decay)
    else:
        state.opt_joint = AdamW(perf + obs, cfg.learning_rate, weight_decay=cfg.weight_decay)
    if isinstance(cfg.l0, (int, float)):
        state.l0_frozen = float(cfg.l0)
    return state


def _effective_l0(
    model: TransformerLM, batch: list[TokenSeq], cfg: TrainingConfig, state: TrainState, step: int
) -> float:
    """Fluency budget: fixed number, or EMA of base-model task loss over the
    first L0_WARMUP_STEPS steps, frozen afterwards."""
    if cfg.barrier == "none":
        return 0.0
    if state.l0_frozen is not None:
        return state.l0_frozen
    vals = [log_perplexity(forward(model, None, s), s) for s in batch]
    batch_ce = float(np.mean(vals))
    if state.l0_ema is None:
        state.l0_ema = batch_ce
    else:
        state.l0_ema = L0_EMA_DECAY * state.l0_ema + (1.0 - L0_EMA_DECAY) * batch_ce
    if step + 1 >= L0_WARMUP_STEPS:
        state.l0_frozen = state.l0_ema
    return state.l0_ema


def generate_for_training(
    model: TransformerLM, s_real: TokenSeq, cfg: TrainingConfig, step: int, seq_index: int
) -> TokenSeq:
    """Sample a continuation of s_real's opening tokens from the performer."""
    if cfg.gen_len < 1:
        raise ConfigError("gen_len must be >= 1")
    prompt_len = min(32, len(s_real) // 2)
    prompt = s_real.tokens[: max(prompt_len, 1)]
    scfg = SamplerConfig(
        max_new_tokens=cfg.gen_len,
        temperature=cfg.gen_temperature,
        top_k=cfg.gen_top_k,
        seed=cfg.seed,
    )
    rng = stream(cfg.seed, "generate", step, seq_index)
    return generate(model, prompt, scfg, adapter_role="performer", rng=rng)


def _joint_parts(model: TransformerLM, s_real: TokenSeq, s_gen: TokenSeq, cfg: TrainingConfig):
    """Forwards and loss parts for joint variants (all recorded)."""
    perf_real = forward(model, "performer", s_real)
    obs_real = forward(model, "observer", s_real)
    perf_gen = forward(model, "performer", s_gen)
    obs_gen = forward(model, "observer", s_gen)
    task = task_loss(perf_real, s_real)
    if cfg.objective_variant == "xppl_align_flipped":
        xr = cross_perplexity_graph(obs_real, perf_real, s_real.prompt_len)
        xg = cross_perplexity_graph(obs_gen, perf_gen, s_gen.prompt_len)
        return LossParts(task=task, xppl_real=xr, xppl_gen=xg), (xr, xg)
    _, _, b_r = score_from_logits(obs_real, perf_real, s_real)
    _, _, b_g = score_from_logits(obs_gen, perf_gen, s_gen)
    return LossParts(task=task, b_real=b_r, b_gen=b_g), (b_r, b_g)


def _nan_guard(value: float, step: int, context: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss at step {step} ({context}): {value}")


def train_step(
    model: TransformerLM,
    batch: list[TokenSeq],
    cfg: TrainingConfig,
    step: int,
    state: TrainState,
) -> LossBreakdown:
    """One optimization step over a batch; returns the averaged breakdown.

    Sequences whose score denominator degenerates are skipped and counted.
    Both adapter sets are updated from the same total except in the split
    variants, which alternate performer and observer phases.
    """
    l0 = _effective_l0(model, batch, cfg, state, step)
    pairs = []
    for idx, s_real in enumerate(batch):
        pairs.append((s_real, generate_for_training(model, s_real, cfg, step, idx)))

    if cfg.objective_variant in SPLIT_VARIANTS:
        bd = _split_step(model, pairs, cfg, step, state, l0)
    else:
        bd = _joint_step(model, pairs, cfg, step, state, l0)
    state.processed_total += len(batch)
    state.skipped_total += bd.skipped
    state.last_breakdown = bd
    return bd


def _joint_step(model, pairs, cfg, step, state, l0) -> LossBreakdown:
    opt = state.opt_joint
    opt.zero_grad()
    sums = np.zeros(5)
    used = 0
    skipped = 0
    for s_real, s_gen in pairs:
        try:
            with nx.Tape() as tape:
                parts, _ = _joint_parts(model, s_real, s_gen, cfg)
                composed = compose_total_loss(parts, cfg, l0)
                total = composed.total
                _nan_guard(total.item(), step, cfg.objective_variant)
                nx.backward(total, tape)
        except (DegenerateDenominator, ScoringError) as e:
            logger.info("step %d: skipped sequence (%s)", step, e)
            skipped += 1
            continue
        b_real = parts.b_real if parts.b_real is not None else parts.xppl_real
        b_gen = parts.b_gen if parts.b_gen is not None else parts.xppl_gen
        bar = composed.barrier.item() if composed.barrier is not None else 0.0
        sums += (parts.task.item(), b_real.item(), b_gen.item(), bar, total.item())
        used += 1
    if used:
        opt.step(grad_scale=1.0 / used)
        avg = sums / used
    else:
        avg = sums
    return LossBreakdown(*avg, step=step, skipped=skipped)


def _split_step(model, pairs, cfg, step, state, l0) -> LossBreakdown:
    """Alternating phases; the inactive model's logits are computed untaped
    so its parameters receive no gradient at all."""
    xppl = cfg.objective_variant == "xppl_align"
    skip = set()
    sums = np.zeros(5)

    # performer phase: task on s_real plus the real-sequence coupling term
    state.opt_performer.zero_grad()
    used_p = 0
    for i, (s_real, _) in enumerate(pairs):
        obs_const = forward(model, "observer", s_real)  # untaped: constant
        try:
            with nx.Tape() as tape:
                perf_real = forward(model, "performer", s_real)
                task = task_loss(perf_real, s_real)
                if xppl:
                    coupling = cross_perplexity_graph(obs_const, perf_real, s_real.prompt_len)
                    parts = LossParts(task=task, xppl_real=coupling)
                else:
                    _, _, coupling = score_from_logits(obs_const, perf_real, s_real)
                    parts = LossParts(task=task, b_real=coupling)
                composed = compose_total_loss(parts, cfg, l0)
                _nan_guard(composed.performer.item(), step, "performer phase")
                nx.backward(composed.performer, tape)
        except (DegenerateDenominator, ScoringError) as e:
            logger.info("step %d: skipped sequence in performer phase (%s)", step, e)
            skip.add(i)
            continue
        sums[0] += task.item()
        sums[1] += coupling.item()
        sums[4] += composed.performer.item()
        used_p += 1
    if used_p:
        state.opt_performer.step(grad_scale=1.0 / used_p)

    # observer phase: the generated-sequence term only
    state.opt_observer.zero_grad()
    used_o = 0
    for i, (_, s_gen) in enumerate(pairs):
        if i in skip:
            continue
        perf_const = forward(model, "performer", s_gen)  # untaped: constant
        try:
            with nx.Tape() as tape:
                obs_gen = forward(model, "observer", s_gen)
                if xppl:
                    term = cross_perplexity_graph(obs_gen, perf_const, s_gen.prompt_len)
                    parts = LossParts(task=0.0, xppl_gen=term)
                else:
                    _, _, term = score_from_logits(obs_gen, perf_const, s_gen)
                    parts = LossParts(task=0.0, b_gen=term)
                composed = compose_total_loss(parts, cfg, l0)
                _nan_guard(composed.observer.item(), step, "observer phase")
                nx.backward(composed.observer, tape)
        except (DegenerateDenominator, ScoringError) as e:
            logger.info("step %d: skipped sequence in observer phase (%s)", step, e)
            skip.add(i)
            continue
        sums[2] += term.item()
        sums[4] += composed.observer.item()
        used_o += 1
    if used_o:
        state.opt_observer.step(grad_scale=1.0 / used_o)

    n_p = max(used_p, 1)
    n_o = max(used_o, 1)
    return LossBreakdown(
        task_loss=sums[0] / n_p,
        b_real=sums[1] / n_p,
        b_gen=sums[2] / n_o,
        barrier_value=0.0,
        total=sums[4] / n_p,
        step=step,
        skipped=len(skip),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    model: TransformerLM,
    corpus: Corpus,
    cfg: TrainingConfig,
    out_dir: str,
    checkpoint_every: int = 0,
) -> dict:
    """Run the full loop; writes metrics.csv, periodic and final checkpoints.

    Fully deterministic given (corpus, config, seed). Aborts with a
    diagnostic dump on non-finite loss; fails if more than 5% of sequences
    were skipped.
    """
    os.makedirs(out_dir, exist_ok=True)
    state = init_train_state(model, cfg)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    rows: list[LossBreakdown] = []
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for step in range(cfg.steps):
            batch = sample_batch(corpus, cfg.batch_size, cfg.seed, step)
            try:
                bd = train_step(model, batch, cfg, step, state)
            except NumericalError as e:
                dump = os.path.join(out_dir, "diagnostics.json")
                with open(dump, "w") as dfh:
                    json.dump(
                        {
                            "step": step,
                            "error": str(e),
                            "last_breakdown": vars(state.last_breakdown)
                            if state.last_breakdown
                            else None,
                        },
                        dfh,
                        indent=2,
                    )
                logger.error("aborted: %s (diagnostics in %s)", e, dump)
                raise
            writer.writerow(
                [bd.step, _fmt(bd.task_loss), _fmt(bd.b_real), _fmt(bd.b_gen),
                 _fmt(bd.barrier_value), _fmt(bd.total), bd.skipped]
            )
            rows.append(bd)
            if checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < cfg.steps:
                save_checkpoint(model, os.path.join(out_dir, f"step_{step + 1:06d}.ckpt"))
    ckpt_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(model, ckpt_path)
    if state.processed_total and state.skipped_total > 0.05 * state.processed_total:
        raise NumericalError(
            f"{state.skipped_total}/{state.processed_total} sequences skipped (> 5%)"
        )
    return {"metrics_path": metrics_path, "checkpoint_path": ckpt_path, "rows": rows,
            "l0": state.l0_frozen if state.l0_frozen is not None else state.l0_ema}


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-3
    batch_size: int = 4
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def pretrain(
    model: TransformerLM,
    corpus: Corpus,
    cfg: PretrainConfig,
    out_dir: str,
    checkpoint_every: int = 0,
) -> dict:
    """Plain next-token training of the base weights (no adapters).

    The result becomes the frozen base for watermark training; a random
    base would make perplexity signals meaningless.
    """
    os.makedirs(out_dir, exist_ok=True)
    model.set_base_trainable(True)
    opt = AdamW(model.base_tensors(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    metrics_path = os.path.join(out_dir, "pretrain_loss.csv")
    losses: list[float] = []
    try:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for step in range(cfg.steps):
                batch = sample_batch(corpus, cfg.batch_size, cfg.seed, step)
                opt.zero_grad()
                total = 0.0
                for s in batch:
                    with nx.Tape() as tape:
                        loss = task_loss(forward(model, None, s), s)
                        val = loss.item()
                        _nan_guard(val, step, "pretrain")
                        nx.backward(loss, tape)
                    total += val
                opt.step(grad_scale=1.0 / len(batch))
                mean_loss = total / len(batch)
                writer.writerow([step, _fmt(mean_loss)])
                losses.append(mean_loss)
                if checkpoint_every and (step + 1) % checkpoint_every == 0 and step + 1 < cfg.steps:
                    save_checkpoint(model, os.path.join(out_dir, f"base_{step + 1:06d}.ckpt"))
    finally:
        model.set_base_trainable(False)
    ckpt_path = os.path.join(out_dir, "base.ckpt")
    save_checkpoint(model, ckpt_path)
    return {"metrics_path": metrics_path, "checkpoint_path": ckpt_path, "losses": losses}
