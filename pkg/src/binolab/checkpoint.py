"""Versioned binary checkpoints with bit-exact round-trips.

Layout (all integers little-endian):

    8 bytes   magic b"BINOLAB\\0"
    u32       format version (currently 1)
    u32, jsn  length-prefixed UTF-8 JSON header: model config, adapter
              configs, dtype
    u32       entry count
    entries   u16 name length, name, u8 dtype code (0=f4, 1=f8),
              u8 ndim, ndim*u64 dims, raw little-endian array bytes

Entries are written sorted by name; raw bytes round-trip exactly at the
same floating width.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import numerics as nx
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import LoraAdapter, LoraConfig, ModelConfig, TransformerLM, init_model

MAGIC = b"BINOLAB\x00"
VERSION = 1
_DTYPE_CODES = {"float32": 0, "float64": 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: TransformerLM, path: str) -> None:
    """Write base weights and all attached adapters."""
    entries: dict[str, np.ndarray] = {f"base.{k}": t.data for k, t in model.params.items()}
    adapters_meta = {}
    for role, ad in sorted(model.adapters.items()):
        adapters_meta[role] = {
            "rank": ad.config.rank,
            "alpha": ad.config.alpha,
            "targets": list(ad.config.targets),
        }
        for k, t in ad.params.items():
            entries[f"adapter.{role}.{k}"] = t.data
    header = {
        "model": {
            "vocab_size": model.config.vocab_size,
            "context_len": model.config.context_len,
            "d_model": model.config.d_model,
            "n_layers": model.config.n_layers,
            "n_heads": model.config.n_heads,
            "d_ff": model.config.d_ff,
        },
        "adapters": adapters_meta,
        "dtype": nx.default_dtype().name,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name in sorted(entries):
            arr = entries[name]
            code = _DTYPE_CODES[arr.dtype.name]
            raw = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(raw)


def _read(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"expected {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(
    path: str, expected_config: ModelConfig | None = None
) -> TransformerLM:
    """Rebuild the model and adapters; forwards reproduce the saved model bitwise."""
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC)) != MAGIC:
            raise CheckpointVersionError(f"{path} is not a binolab checkpoint")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise CheckpointVersionError(f"format version {version}, expected {VERSION}")
        (hlen,) = struct.unpack("<I", _read(fh, 4))
        try:
            header = json.loads(_read(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointVersionError(f"unreadable header: {e}") from e
        cfg = ModelConfig(**header["model"])
        if expected_config is not None and cfg != expected_config:
            raise CheckpointShapeError(
                f"checkpoint config {cfg} does not match expected {expected_config}"
            )
        model = init_model(cfg, seed=0)
        model.adapters = {}
        for role, meta in sorted(header.get("adapters", {}).items()):
            lcfg = LoraConfig(rank=meta["rank"], alpha=meta["alpha"], targets=tuple(meta["targets"]))
            model.adapters[role] = LoraAdapter(role=role, config=lcfg, params={})

        expected: dict[str, tuple[int, ...]] = {
            f"base.{k}": t.data.shape for k, t in model.params.items()
        }
        for role, ad in model.adapters.items():
            d = cfg.d_model
            for i in range(cfg.n_layers):
                for proj in ad.config.targets:
                    expected[f"adapter.{role}.blocks.{i}.attn.{proj}.lora_a"] = (ad.config.rank, d)
                    expected[f"adapter.{role}.blocks.{i}.attn.{proj}.lora_b"] = (d, ad.config.rank)

        (count,) = struct.unpack("<I", _read(fh, 4))
        seen = set()
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2))
            name = _read(fh, nlen).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read(fh, 2))
            if code not in _CODE_DTYPES:
                raise CheckpointVersionError(f"unknown dtype code {code} for {name}")
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim))
            if name not in expected:
                raise CheckpointShapeError(f"unexpected entry {name}")
            if tuple(shape) != expected[name]:
                raise CheckpointShapeError(
                    f"{name}: stored shape {tuple(shape)} != expected {expected[name]}"
                )
            dtype = _CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arr = np.frombuffer(_read(fh, nbytes), dtype=dtype).reshape(shape).copy()
            tensor = nx.Tensor.__new__(nx.Tensor)
            tensor.data = arr
            tensor.grad = None
            tensor._in_graph = False
            if name.startswith("base."):
                tensor.requires_grad = False
                model.params[name[len("base."):]] = tensor
            else:
                _, role, pname = name.split(".", 2)
                tensor.requires_grad = True
                model.adapters[role].params[pname] = tensor
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise CheckpointShapeError(f"missing entries: {sorted(missing)[:4]}...")
    return model
