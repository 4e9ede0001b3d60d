"""Data ingestion: preprocessing, vocabulary, embeddings, batching."""

from __future__ import annotations

import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Rng, xavier_init

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<sos>", "<eos>")
MAX_TOKENS = 15


class DataError(ValueError):
    """Malformed or unusable input data."""


class ParseError(DataError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class DimensionError(DataError):
    pass


def preprocess_sentence(raw: str, max_tokens: int = MAX_TOKENS, lowercase: bool = True) -> list[str] | None:
    """Strip punctuation, optionally lowercase, split on whitespace.

    Returns None when the sentence is empty or longer than ``max_tokens``.
    """
    if lowercase:
        raw = raw.lower()
    cleaned = "".join(ch for ch in raw if not unicodedata.category(ch).startswith("P"))
    tokens = cleaned.split()
    if not tokens or len(tokens) > max_tokens:
        return None
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]
    min_frequency: int = 1
    stoi: dict[str, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens")
        stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")
        object.__setattr__(self, "stoi", stoi)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        """Map ids back to tokens, stopping at EOS and dropping specials when ``strip``."""
        out = []
        for i in ids:
            i = int(i)
            if strip:
                if i == EOS:
                    break
                if i in (PAD, SOS):
                    continue
            out.append(self.itos[i])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))


def build_vocab(sentences: Iterable[Sequence[str]], min_frequency: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic, after the four specials."""
    counts: Counter[str] = Counter()
    n = 0
    for sent in sentences:
        counts.update(sent)
        n += 1
    if n == 0 or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_frequency and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIALS + tuple(kept), min_frequency)


def pair_sentences(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> Iterable[Sequence[str]]:
    for a, b in pairs:
        yield a
        yield b


@dataclass
class EmbeddingReport:
    hits: int
    misses: int
    missed_tokens: list[str]


def random_embeddings(vocab: Vocabulary, dim: int, rng: Rng) -> np.ndarray:
    """Seeded xavier rows for every token; the PAD row is zero."""
    table = np.vstack([xavier_init((1, dim), rng).data for _ in range(len(vocab))])
    table[PAD] = 0.0
    return table


def load_embeddings(path, vocab: Vocabulary, dim: int = 300, rng: Rng | None = None) -> tuple[np.ndarray, EmbeddingReport]:
    """Read a GloVe-style text file (``token v1 ... vdim`` per line)."""
    rng = rng or Rng(0)
    found: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", newline=None) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(" ")
            if len(fields) < 2:
                raise ParseError(path, line_no, f"expected token and {dim} values")
            if len(fields) - 1 != dim:
                if line_no == 1:
                    raise DimensionError(f"{path}: embedding dimension {len(fields) - 1} != configured {dim}")
                raise ParseError(path, line_no, f"expected {dim} values, found {len(fields) - 1}")
            token = fields[0]
            if token not in vocab.stoi:
                continue
            try:
                found[token] = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError:
                raise ParseError(path, line_no, "non-numeric embedding value") from None
    table = np.zeros((len(vocab), dim))
    missed = []
    for i, tok in enumerate(vocab.itos):
        if i == PAD:
            continue
        if tok in found:
            table[i] = found[tok]
        else:
            table[i] = xavier_init((1, dim), rng).data[0]
            missed.append(tok)
    hits = len(vocab) - 1 - len(missed)
    logger.info("embeddings: %d hits, %d misses", hits, len(missed))
    return table, EmbeddingReport(hits, len(missed), missed)


def _read_lines(path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(p, encoding="utf-8", newline=None) as fh:
        return [line.rstrip("\r\n") for line in fh]


def load_pairs_tsv(path) -> list[tuple[str, str]]:
    """Two columns keep every row; three columns keep rows labelled ``1``."""
    pairs = []
    for line_no, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) == 2:
            pairs.append((cols[0], cols[1]))
        elif len(cols) == 3:
            if cols[2].strip() == "1":
                pairs.append((cols[0], cols[1]))
        else:
            raise ParseError(path, line_no, f"expected 2 or 3 tab-separated columns, found {len(cols)}")
    return pairs


def load_caption_groups(path, rng: Rng) -> list[tuple[str, str]]:
    """Two disjoint pairs from four randomly chosen captions of each image."""
    lines = [line for line in _read_lines(path) if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty caption-group file")
    pairs = []
    for line in lines:
        caps = [c for c in line.split("\t") if c.strip()]
        if len(caps) < 4:
            continue
        chosen = [caps[i] for i in rng.choice(len(caps), 4)]
        pairs.append((chosen[0], chosen[1]))
        pairs.append((chosen[2], chosen[3]))
    return pairs


@dataclass(frozen=True)
class SentencePair:
    original: np.ndarray
    paraphrase: np.ndarray
    original_length: int
    paraphrase_length: int


def encode_padded(tokens: Sequence[str], vocab: Vocabulary, max_tokens: int = MAX_TOKENS) -> np.ndarray:
    if len(tokens) > max_tokens:
        raise DataError(f"sentence of {len(tokens)} tokens exceeds {max_tokens}")
    ids = np.full(max_tokens + 1, PAD, dtype=np.int64)
    ids[: len(tokens)] = vocab.encode(tokens)
    ids[len(tokens)] = EOS
    return ids


def make_pair(original: Sequence[str], paraphrase: Sequence[str], vocab: Vocabulary, max_tokens: int = MAX_TOKENS) -> SentencePair:
    return SentencePair(
        encode_padded(original, vocab, max_tokens),
        encode_padded(paraphrase, vocab, max_tokens),
        len(original),
        len(paraphrase),
    )


def prepare_pairs(
    raw_pairs: Iterable[tuple[str, str]], max_tokens: int = MAX_TOKENS, lowercase: bool = True
) -> tuple[list[tuple[list[str], list[str]]], int]:
    """Preprocess both sides; drop a pair when either side is rejected.

    Returns the kept token pairs and the number rejected.
    """
    kept, rejected = [], 0
    for a, b in raw_pairs:
        ta = preprocess_sentence(a, max_tokens, lowercase)
        tb = preprocess_sentence(b, max_tokens, lowercase)
        if ta is None or tb is None:
            rejected += 1
            continue
        kept.append((ta, tb))
    return kept, rejected


@dataclass
class Batch:
    """Stacked, padded pairs trimmed to the longest sequence in the batch.

    ``src``/``tgt`` are ``[B, T]`` id arrays that include EOS; masks are true
    on real (non-PAD) positions.
    """

    pairs: list[SentencePair]
    src: np.ndarray
    tgt: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def decoder_inputs(self) -> np.ndarray:
        """Teacher-forcing inputs: SOS followed by the target shifted right."""
        out = np.empty_like(self.tgt)
        out[:, 0] = SOS
        out[:, 1:] = self.tgt[:, :-1]
        # positions past EOS are masked anyway; keep them PAD
        out[~self.tgt_mask] = PAD
        return out


def collate(pairs: Sequence[SentencePair]) -> Batch:
    if not pairs:
        raise DataError("cannot collate an empty batch")
    src = np.stack([p.original for p in pairs])
    tgt = np.stack([p.paraphrase for p in pairs])
    src_len = max(p.original_length for p in pairs) + 1
    tgt_len = max(p.paraphrase_length for p in pairs) + 1
    src, tgt = src[:, :src_len], tgt[:, :tgt_len]
    return Batch(list(pairs), src, tgt, src != PAD, tgt != PAD)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return Rng([seed, epoch]).permutation(n)


def make_batches(pairs: Sequence[SentencePair], batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle with a permutation fixed by ``(seed, epoch)``; keep the last partial batch."""
    if not pairs:
        raise DataError("make_batches: no pairs")
    order = epoch_permutation(len(pairs), seed, epoch)
    return [collate([pairs[i] for i in order[s : s + batch_size]]) for s in range(0, len(pairs), batch_size)]
