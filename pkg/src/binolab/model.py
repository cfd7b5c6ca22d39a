"""Tiny decoder-only transformer with a frozen base and swappable LoRA adapters.

Architecture (documented here because it is an implementation choice, not a
contract): learned positional embeddings, pre-norm blocks with RMSNorm,
multi-head causal self-attention, GELU MLP, no biases anywhere, untied
output head. Two adapter sets may be attached — a text-generating
``performer`` and a detecting ``observer`` — each a low-rank delta on the
attention projections; exactly one (or none) is active per forward call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import TokenSeq
from .errors import ConfigError, SequenceLengthError
from .rng import stream

PROJECTIONS = ("query", "key", "value", "output")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    context_len: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.context_len < 2:
            raise ConfigError("context_len must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("model dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    targets: tuple[str, ...] = PROJECTIONS

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("LoRA alpha must be > 0")
        object.__setattr__(self, "targets", tuple(self.targets))
        if not self.targets:
            raise ConfigError("LoRA target set must be non-empty")
        for t in self.targets:
            if t not in PROJECTIONS:
                raise ConfigError(f"unknown LoRA target {t!r}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    """Per-layer, per-projection low-rank factors A [r, d_in] and B [d_out, r].

    B starts at zero so a fresh adapter is an exact no-op on the forward.
    """

    role: str
    config: LoraConfig
    params: dict[str, nx.Tensor] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, nx.Tensor]]:
        return sorted(self.params.items())

    def tensors(self) -> list[nx.Tensor]:
        return [t for _, t in self.pairs()]


class TransformerLM:
    """Shared base weights plus registered adapters; base is frozen by default."""

    def __init__(self, config: ModelConfig, params: dict[str, nx.Tensor]):
        self.config = config
        self.params = params
        self.adapters: dict[str, LoraAdapter] = {}
        self._mask_cache: dict[tuple[int, str], nx.Tensor] = {}

    def base_tensors(self) -> list[nx.Tensor]:
        return [t for _, t in sorted(self.params.items())]

    def set_base_trainable(self, flag: bool) -> None:
        """Pretraining hook; watermark training keeps the base frozen."""
        for t in self.params.values():
            t.requires_grad = flag

    def _causal_mask(self, length: int) -> nx.Tensor:
        key = (length, nx.default_dtype().name)
        mask = self._mask_cache.get(key)
        if mask is None:
            m = np.triu(np.full((length, length), nx.NEG_MASK), k=1)
            mask = nx.Tensor(m)
            self._mask_cache[key] = mask
        return mask


def _param_names(cfg: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
    """Weight table in initialization order; shapes are (d_out, d_in) style."""
    names: list[tuple[str, tuple[int, int]]] = [
        ("tok_emb", (cfg.vocab_size, cfg.d_model)),
        ("pos_emb", (cfg.context_len, cfg.d_model)),
    ]
    for i in range(cfg.n_layers):
        names.append((f"blocks.{i}.attn_norm.gain", (cfg.d_model,)))
        for proj in PROJECTIONS:
            names.append((f"blocks.{i}.attn.{proj}.w", (cfg.d_model, cfg.d_model)))
        names.append((f"blocks.{i}.mlp_norm.gain", (cfg.d_model,)))
        names.append((f"blocks.{i}.mlp.up.w", (cfg.d_ff, cfg.d_model)))
        names.append((f"blocks.{i}.mlp.down.w", (cfg.d_model, cfg.d_ff)))
    names.append(("final_norm.gain", (cfg.d_model,)))
    names.append(("head.w", (cfg.vocab_size, cfg.d_model)))
    return names


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in _param_names(cfg))


def init_model(cfg: ModelConfig, seed: int) -> TransformerLM:
    """Deterministic base weights: N(0, 0.02) matrices, unit norm gains, frozen."""
    rng = stream(seed, "model_init")
    params: dict[str, nx.Tensor] = {}
    for name, shape in _param_names(cfg):
        if name.endswith("norm.gain"):
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = nx.Tensor(data, requires_grad=False)
    return TransformerLM(cfg, params)


def attach_adapter(
    model: TransformerLM, cfg: LoraConfig, role: str, seed: int
) -> LoraAdapter:
    """Register a LoRA adapter set; A ~ N(0, 0.02), B = 0."""
    if role not in ("performer", "observer"):
        raise ConfigError(f"adapter role must be performer or observer, got {role!r}")
    if role in model.adapters:
        raise ConfigError(f"adapter role {role!r} already attached")
    rng = stream(seed, "lora_init", 0 if role == "performer" else 1)
    d = model.config.d_model
    adapter = LoraAdapter(role=role, config=cfg)
    for i in range(model.config.n_layers):
        for proj in cfg.targets:
            a = rng.normal(0.0, 0.02, size=(cfg.rank, d))
            b = np.zeros((d, cfg.rank))
            adapter.params[f"blocks.{i}.attn.{proj}.lora_a"] = nx.Tensor(a, requires_grad=True)
            adapter.params[f"blocks.{i}.attn.{proj}.lora_b"] = nx.Tensor(b, requires_grad=True)
    model.adapters[role] = adapter
    return adapter


def _project(
    model: TransformerLM, adapter: LoraAdapter | None, x: nx.Tensor, layer: int, proj: str
) -> nx.Tensor:
    w = model.params[f"blocks.{layer}.attn.{proj}.w"]
    y = nx.matmul(x, nx.transpose(w))
    if adapter is not None and proj in adapter.config.targets:
        a = adapter.params[f"blocks.{layer}.attn.{proj}.lora_a"]
        b = adapter.params[f"blocks.{layer}.attn.{proj}.lora_b"]
        delta = nx.matmul(nx.matmul(x, nx.transpose(a)), nx.transpose(b))
        y = nx.add(y, nx.mul(delta, adapter.config.scale))
    return y


def forward(
    model: TransformerLM, adapter_role: str | None, tokens: TokenSeq | list[int]
) -> nx.Tensor:
    """Causal logits [L, V]; row i is conditioned on tokens[0..i].

    Gradients flow only to the active adapter (the base stays frozen unless
    explicitly unfrozen for pretraining).
    """
    ids = np.asarray(tokens.tokens if isinstance(tokens, TokenSeq) else tokens, dtype=np.int64)
    cfg = model.config
    length = ids.shape[0]
    if length > cfg.context_len:
        raise SequenceLengthError(f"sequence length {length} exceeds context {cfg.context_len}")
    if adapter_role is None:
        adapter = None
    else:
        adapter = model.adapters.get(adapter_role)
        if adapter is None:
            raise ConfigError(f"no adapter attached for role {adapter_role!r}")

    x = nx.add(nx.embedding(model.params["tok_emb"], ids),
               nx.slice_axis0(model.params["pos_emb"], 0, length))
    mask = model._causal_mask(length)
    inv_sqrt_hd = 1.0 / math.sqrt(cfg.head_dim)
    for i in range(cfg.n_layers):
        h = nx.rms_norm(x, model.params[f"blocks.{i}.attn_norm.gain"])
        q = _split_heads(_project(model, adapter, h, i, "query"), cfg)
        k = _split_heads(_project(model, adapter, h, i, "key"), cfg)
        v = _split_heads(_project(model, adapter, h, i, "value"), cfg)
        scores = nx.add(nx.mul(nx.matmul(q, nx.transpose(k, (0, 2, 1))), inv_sqrt_hd), mask)
        att = nx.softmax(scores)
        ctx = _merge_heads(nx.matmul(att, v), cfg, length)
        x = nx.add(x, _project(model, adapter, ctx, i, "output"))

        h2 = nx.rms_norm(x, model.params[f"blocks.{i}.mlp_norm.gain"])
        up = nx.gelu(nx.matmul(h2, nx.transpose(model.params[f"blocks.{i}.mlp.up.w"])))
        x = nx.add(x, nx.matmul(up, nx.transpose(model.params[f"blocks.{i}.mlp.down.w"])))

    xf = nx.rms_norm(x, model.params["final_norm.gain"])
    return nx.matmul(xf, nx.transpose(model.params["head.w"]))


def _split_heads(t: nx.Tensor, cfg: ModelConfig) -> nx.Tensor:
    length = t.shape[0]
    return nx.transpose(nx.reshape(t, (length, cfg.n_heads, cfg.head_dim)), (1, 0, 2))


def _merge_heads(t: nx.Tensor, cfg: ModelConfig, length: int) -> nx.Tensor:
    return nx.reshape(nx.transpose(t, (1, 0, 2)), (length, cfg.d_model))
