"""Byte-level tokenization, corpus ingestion, and batch sampling.

The vocabulary is the 256 raw byte values plus two reserved specials
(BOS=256, EOS=257), so tokenize/detokenize is a bijection on byte strings
and no learned tokenizer is needed. Corpus files are UTF-8 plain text with
documents separated by blank lines; a document of the form
``PROMPT:\\n...\\nRESPONSE:\\n...`` marks everything through the RESPONSE
header as prompt, setting ``prompt_len`` so scoring can skip it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusError, VocabularyError
from .rng import stream

BOS = 256
EOS = 257
VOCAB_SIZE = 258

_PROMPT_HEADER = b"PROMPT:\n"
_RESPONSE_HEADER = b"\nRESPONSE:\n"


@dataclass
class TokenSeq:
    """A tokenized sequence with provenance.

    prompt_len counts leading tokens that condition but are never scored;
    0 means the whole sequence is scorable (minus the contextless first
    position).
    """

    tokens: list[int]
    origin: str = "real"
    prompt_len: int = 0

    def __post_init__(self):
        if not self.tokens:
            raise VocabularyError("empty token sequence")
        if self.origin not in ("real", "generated"):
            raise VocabularyError(f"unknown origin {self.origin!r}")
        if any(t < 0 or t >= VOCAB_SIZE for t in self.tokens):
            raise VocabularyError("token outside vocabulary")
        if not 0 <= self.prompt_len <= len(self.tokens):
            raise VocabularyError("prompt_len exceeds sequence length")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    sequences: list[TokenSeq]
    source: str
    split: str  # train | eval
    documents: list[bytes] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.sequences)


def tokenize(text: bytes | str, origin: str = "real", prompt_len: int = 0) -> TokenSeq:
    """Byte values as token ids; inverse of detokenize."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    if not text:
        raise CorpusError("cannot tokenize empty input")
    return TokenSeq(tokens=list(text), origin=origin, prompt_len=prompt_len)


def detokenize(seq: TokenSeq | list[int]) -> bytes:
    """Bytes back from token ids; reserved specials (BOS/EOS) are dropped."""
    tokens = seq.tokens if isinstance(seq, TokenSeq) else seq
    if any(t < 0 or t >= VOCAB_SIZE for t in tokens):
        raise VocabularyError("token outside vocabulary")
    return bytes(t for t in tokens if t < 256)


def _parse_documents(raw: bytes) -> list[bytes]:
    docs = []
    for block in raw.replace(b"\r\n", b"\n").split(b"\n\n"):
        block = block.strip(b"\n")
        if block:
            docs.append(block)
    return docs


def _doc_to_seqs(doc: bytes, context_len: int) -> list[TokenSeq]:
    """Fixed-window chunking; instruction docs become one (truncated) sequence."""
    if doc.startswith(_PROMPT_HEADER) and _RESPONSE_HEADER in doc:
        head, _, _ = doc.partition(_RESPONSE_HEADER)
        prompt_len = len(head) + len(_RESPONSE_HEADER)
        tokens = list(doc[:context_len])
        if prompt_len >= len(tokens):
            return []  # response truncated away entirely
        return [TokenSeq(tokens=tokens, origin="real", prompt_len=prompt_len)]
    seqs = []
    for i in range(0, len(doc), context_len):
        window = doc[i : i + context_len]
        if len(window) >= 2:  # need at least one scorable position
            seqs.append(TokenSeq(tokens=list(window), origin="real"))
    return seqs


def load_corpus(
    path: str, context_len: int, split_fraction: float, seed: int
) -> tuple[Corpus, Corpus]:
    """Ingest a text file into disjoint train/eval corpora.

    split_fraction is the train share; assignment shuffles sequence indices
    with a stream derived from `seed` so the same inputs always produce the
    same split.
    """
    if not 0.0 < split_fraction < 1.0:
        raise CorpusError(f"split_fraction must be in (0, 1), got {split_fraction}")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e
    docs = _parse_documents(raw)
    seqs: list[TokenSeq] = []
    for doc in docs:
        seqs.extend(_doc_to_seqs(doc, context_len))
    if not seqs:
        raise CorpusError(f"corpus {path} produced no usable sequences")
    order = stream(seed, "corpus_split").permutation(len(seqs))
    n_train = int(round(split_fraction * len(seqs)))
    n_train = min(max(n_train, 1), len(seqs) - 1)
    train_idx = sorted(order[:n_train].tolist())
    eval_idx = sorted(order[n_train:].tolist())
    train = Corpus([seqs[i] for i in train_idx], source=path, split="train", documents=docs)
    evl = Corpus([seqs[i] for i in eval_idx], source=path, split="eval", documents=docs)
    return train, evl


def sample_batch(corpus: Corpus, batch_size: int, seed: int, step: int) -> list[TokenSeq]:
    """Deterministic batch for (seed, step), with epoch coverage.

    Sequences are drawn from per-epoch permutations of the corpus, so over
    ceil(N / B) consecutive steps every sequence appears at least once.
    """
    if batch_size <= 0:
        raise CorpusError(f"batch_size must be positive, got {batch_size}")
    if not corpus.sequences:
        raise CorpusError("cannot sample from an empty corpus")
    n = len(corpus.sequences)
    batch = []
    for j in range(batch_size):
        g = step * batch_size + j
        epoch, pos = divmod(g, n)
        perm = _epoch_perm(corpus, seed, epoch)
        batch.append(corpus.sequences[perm[pos]])
    return batch


def _epoch_perm(corpus: Corpus, seed: int, epoch: int) -> np.ndarray:
    cache = getattr(corpus, "_perm_cache", None)
    if cache is None:
        cache = {}
        corpus._perm_cache = cache
    key = (seed, epoch)
    if key not in cache:
        cache.clear()  # epochs advance monotonically; keep only the current one
        cache[key] = stream(seed, "batch_perm", epoch).permutation(len(corpus.sequences))
    return cache[key]


def load_documents(path: str, context_len: int | None = None) -> list[TokenSeq]:
    """One TokenSeq per document (blank-line separated), for scoring/eval.

    Documents longer than context_len are truncated from the front, keeping
    the beginning; instruction docs keep their prompt_len tag.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CorpusError(f"cannot read {path}: {e}") from e
    out = []
    for doc in _parse_documents(raw):
        prompt_len = 0
        if doc.startswith(_PROMPT_HEADER) and _RESPONSE_HEADER in doc:
            head, _, _ = doc.partition(_RESPONSE_HEADER)
            prompt_len = len(head) + len(_RESPONSE_HEADER)
        if context_len is not None:
            doc = doc[:context_len]
        if len(doc) < 2 or prompt_len >= len(doc):
            continue
        out.append(TokenSeq(tokens=list(doc), origin="real", prompt_len=prompt_len))
    return out
