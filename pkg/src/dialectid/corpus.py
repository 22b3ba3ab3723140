"""Labeled-tweet ingestion, WordPiece vocabularies and fixed-length encoding.

Corpus files are UTF-8 TSV with columns ``id``, ``text``, ``label``. Text is
taken verbatim: upstream data already has URLs and mentions replaced by the
literal tokens ``URL`` and ``USER``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP)
CONTINUATION = "##"
PLACEHOLDER_TOKENS = frozenset({"USER", "URL"})
MAX_WORD_CHARS = 100


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class RawExample:
    id: str
    text: str
    label: str


@dataclass(frozen=True)
class LabelSet:
    names: tuple

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise CorpusError(f"duplicate label names in {list(self.names)}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CorpusError(f"unknown label {name!r}") from None


class Vocab:
    """Token list where position is the token id; ``[PAD]`` must be id 0."""

    def __init__(self, tokens: Sequence[str], continuation_prefix: str = CONTINUATION):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            dupes = sorted(t for t, c in Counter(tokens).items() if c > 1)
            raise CorpusError(f"duplicate vocab entries: {dupes[:5]}")
        missing = [t for t in SPECIAL_TOKENS if t not in tokens]
        if missing:
            raise CorpusError(f"vocab lacks special tokens {missing}")
        if tokens[0] != PAD:
            raise CorpusError(f"{PAD} must have id 0")
        self.tokens = tokens
        self.continuation_prefix = continuation_prefix
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._ids

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def unk_id(self):
        return self._ids[UNK]

    @property
    def cls_id(self):
        return self._ids[CLS]

    @property
    def sep_id(self):
        return self._ids[SEP]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class EncodedExample:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    label_id: int
    word_length: int


@dataclass
class EncodedDataset:
    """Column-stacked :class:`EncodedExample` rows, ready for batching."""

    ids: list
    token_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    word_lengths: np.ndarray
    label_set: LabelSet = field(repr=False)

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "EncodedDataset":
        index = np.asarray(index)
        return EncodedDataset(
            ids=[self.ids[i] for i in index],
            token_ids=self.token_ids[index],
            attention_mask=self.attention_mask[index],
            labels=self.labels[index],
            word_lengths=self.word_lengths[index],
            label_set=self.label_set,
        )


def load_tsv(path, has_header: bool = False) -> list[RawExample]:
    """Read an ``id<TAB>text<TAB>label`` file.

    Extra trailing columns are ignored. Raises :class:`CorpusError` naming
    the 1-based line number of any malformed row.
    """
    raw = Path(path).read_text(encoding="utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    start = 1 if has_header else 0
    examples = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if line.endswith("\r"):
            line = line[:-1]
        parts = line.split("\t")
        if len(parts) < 3:
            raise CorpusError(f"{path}: line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        ex_id, text, label = parts[0], parts[1], parts[2]
        if not ex_id:
            raise CorpusError(f"{path}: line {lineno}: empty id")
        if not text.strip():
            raise CorpusError(f"{path}: line {lineno}: empty text")
        examples.append(RawExample(ex_id, text, label))
    if not examples:
        raise CorpusError(f"{path}: no examples")
    return examples


def write_tsv(path, examples: Iterable[RawExample]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ex.id}\t{ex.text}\t{ex.label}\n")


def build_label_set(examples: Sequence[RawExample]) -> LabelSet:
    if not examples:
        raise CorpusError("cannot build a label set from no examples")
    return LabelSet(tuple(dict.fromkeys(ex.label for ex in examples)))


def build_vocab(texts: Iterable[str], size: int) -> Vocab:
    """Frequency-based vocab for fixtures: specials, characters, then words.

    Order is specials, every character seen (by frequency), the ``##`` form of
    each character, then whole words by frequency, truncated at ``size``.
    Ties break by first occurrence, so the result is deterministic.
    """
    if size < len(SPECIAL_TOKENS):
        raise CorpusError(f"vocab size {size} is smaller than the {len(SPECIAL_TOKENS)} special tokens")
    words, chars = Counter(), Counter()
    for text in texts:
        for w in text.split():
            words[w] += 1
            chars.update(w)
    tokens = list(SPECIAL_TOKENS)
    char_list = [c for c, _ in chars.most_common()]
    candidates = char_list + [CONTINUATION + c for c in char_list]
    candidates += [w for w, _ in words.most_common() if len(w) > 1]
    seen = set(tokens)
    for tok in candidates:
        if len(tokens) >= size:
            break
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
    return Vocab(tokens)


def tokenize_word(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while start < end:
            cand = word[start:end]
            if start > 0:
                cand = vocab.continuation_prefix + cand
            if cand in vocab:
                piece = cand
                break
            end -= 1
        if piece is None:
            return [UNK]
        pieces.append(piece)
        start = end
    return pieces


def tokenize_wordpiece(text: str, vocab: Vocab) -> list[str]:
    """Whitespace split, then greedy longest-match-first per word."""
    out = []
    for word in text.split():
        out.extend(tokenize_word(word, vocab))
    return out


def detokenize_word(pieces: Sequence[str], prefix: str = CONTINUATION) -> str:
    return "".join(p[len(prefix):] if i and p.startswith(prefix) else p for i, p in enumerate(pieces))


def word_length(text: str) -> int:
    return sum(1 for w in text.split() if w not in PLACEHOLDER_TOKENS)


def encode(example: RawExample, vocab: Vocab, labels: LabelSet, max_len: int) -> EncodedExample:
    if max_len < 3:
        raise CorpusError(f"max_len must be at least 3, got {max_len}")
    label_id = labels.index(example.label)
    pieces = tokenize_wordpiece(example.text, vocab)[: max_len - 2]
    ids = [vocab.cls_id] + [vocab.id(p) for p in pieces] + [vocab.sep_id]
    n = len(ids)
    token_ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    token_ids[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return EncodedExample(token_ids, mask, label_id, word_length(example.text))


def encode_dataset(examples: Sequence[RawExample], vocab: Vocab, labels: LabelSet, max_len: int) -> EncodedDataset:
    encoded = [encode(ex, vocab, labels, max_len) for ex in examples]
    if not encoded:
        raise CorpusError("cannot encode an empty dataset")
    return EncodedDataset(
        ids=[ex.id for ex in examples],
        token_ids=np.stack([e.token_ids for e in encoded]),
        attention_mask=np.stack([e.attention_mask for e in encoded]),
        labels=np.array([e.label_id for e in encoded], dtype=np.int64),
        word_lengths=np.array([e.word_length for e in encoded], dtype=np.int64),
        label_set=labels,
    )


@dataclass
class CorpusStats:
    counts: dict
    most_frequent: str
    least_frequent: str
    total: int

    def to_dict(self):
        return {
            "total": self.total,
            "counts": self.counts,
            "most_frequent": self.most_frequent,
            "least_frequent": self.least_frequent,
        }


def corpus_stats(examples: Sequence[RawExample], labels: LabelSet) -> CorpusStats:
    counts = {name: 0 for name in labels.names}
    for ex in examples:
        if ex.label not in counts:
            raise CorpusError(f"unknown label {ex.label!r}")
        counts[ex.label] += 1
    # ties resolve to the earlier label in the label set
    most = max(labels.names, key=lambda n: (counts[n], -labels.names.index(n)))
    least = min(labels.names, key=lambda n: (counts[n], labels.names.index(n)))
    return CorpusStats(counts, most, least, len(examples))
