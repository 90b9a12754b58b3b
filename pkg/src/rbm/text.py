"""Tokenization, vocabulary, pair files and token-level edit distance."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
RESERVED = (PAD, UNK, SOS, EOS)
PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
MAX_LEN = 20
DEFAULT_VOCAB_SIZE = 5000

_TOKEN_RE = re.compile(r"'\w+|\w+|[^\w\s]")


class Vocab:
    """Token/id bijection with PAD, UNK, SOS, EOS fixed at ids 0..3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate vocabulary entry {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def token(self, i: int) -> str:
        return self.itos[i]

    def tokens(self) -> list[str]:
        """Non-reserved entries in id order."""
        return self.itos[len(RESERVED):]

    def to_json(self) -> str:
        return json.dumps(self.tokens())

    @classmethod
    def from_json(cls, s: str) -> "Vocab":
        return cls(json.loads(s))


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.ids is not None and len(self.ids) != len(self.tokens):
            raise ValueError("surface and id sequences differ in length")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def bind(self, vocab: Vocab) -> "Sentence":
        return Sentence(self.tokens, tuple(vocab.ids(self.tokens)))

    @classmethod
    def of(cls, text: str, vocab: Vocab | None = None, max_len: int = MAX_LEN) -> "Sentence":
        return tokenize_and_truncate(text, vocab, max_len)


@dataclass(frozen=True)
class ParaphrasePair:
    x: Sentence
    y: Sentence
    label: int = 1

    @property
    def positive(self) -> bool:
        return self.label == 1


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize_and_truncate(text: str, vocab: Vocab | None = None, max_len: int = MAX_LEN) -> Sentence:
    """Lowercase, split off punctuation and clitics, keep the first ``max_len`` tokens."""
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("cannot tokenize empty or whitespace-only text")
    tokens = tuple(tokens[:max_len])
    ids = tuple(vocab.ids(tokens)) if vocab is not None else None
    return Sentence(tokens, ids)


def build_vocab(corpus: Iterable[str | Sequence[str]], max_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Keep the ``max_size - 4`` most frequent tokens; ties go to the lexicographically smaller."""
    if max_size < len(RESERVED):
        raise ValueError(f"max_size must be at least {len(RESERVED)}")
    counts: Counter[str] = Counter()
    seen = False
    for item in corpus:
        seen = True
        toks = tokenize(item) if isinstance(item, str) else item
        counts.update(t for t in toks if t not in RESERVED)
    if not seen or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([t for t, _ in ranked[: max_size - len(RESERVED)]])


def token_edit_distance(a: Sequence[str] | Sentence, b: Sequence[str] | Sentence) -> int:
    """Levenshtein distance over tokens with unit insert/delete/substitute costs."""
    a = a.tokens if isinstance(a, Sentence) else tuple(a)
    b = b.tokens if isinstance(b, Sentence) else tuple(b)
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, tb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb))
        prev = cur
    return prev[-1]


# pair files -----------------------------------------------------------------

class MalformedFileError(ValueError):
    pass


@dataclass
class LoadedPairs:
    pairs: list[ParaphrasePair]
    skipped: int
    total_lines: int


def _parse_label(raw) -> int:
    if isinstance(raw, bool):
        raise ValueError("boolean label")
    label = int(str(raw).strip())
    if label not in (0, 1):
        raise ValueError(f"label {label} not in {{0, 1}}")
    return label


def load_pairs(path, fmt: str | None = None, max_len: int = MAX_LEN) -> LoadedPairs:
    """Read a TSV (sentence1, sentence2, label) or JSONL ({s1, s2, label}) pair file.

    Malformed lines are skipped and counted; more than half malformed is an error.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix == ".jsonl" else "tsv"
    if fmt not in ("tsv", "jsonl"):
        raise ValueError(f"unknown pair format {fmt!r}")
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as e:
        raise MalformedFileError(f"cannot read {path}: {e}") from e

    pairs: list[ParaphrasePair] = []
    skipped = 0
    total = 0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        total += 1
        try:
            if fmt == "tsv":
                cols = line.split("\t")
                if len(cols) != 3:
                    raise ValueError(f"expected 3 columns, got {len(cols)}")
                s1, s2, raw = cols
            else:
                obj = json.loads(line)
                s1, s2, raw = obj["s1"], obj["s2"], obj["label"]
            label = _parse_label(raw)
            pair = ParaphrasePair(tokenize_and_truncate(s1, max_len=max_len),
                                  tokenize_and_truncate(s2, max_len=max_len), label)
        except (ValueError, KeyError, TypeError) as e:
            skipped += 1
            logger.debug("%s:%d skipped (%s)", path, lineno, e)
            continue
        pairs.append(pair)
    if total and skipped * 2 > total:
        raise MalformedFileError(f"{path}: {skipped} of {total} lines malformed")
    if skipped:
        logger.warning("%s: skipped %d malformed line(s) of %d", path, skipped, total)
    return LoadedPairs(pairs, skipped, total)


def write_pairs(path, pairs: Iterable[ParaphrasePair], fmt: str = "tsv") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            if fmt == "tsv":
                fh.write(f"{p.x.text}\t{p.y.text}\t{p.label}\n")
            else:
                fh.write(json.dumps({"s1": p.x.text, "s2": p.y.text, "label": p.label}) + "\n")


def load_sentences(path, max_len: int = MAX_LEN) -> list[Sentence]:
    """One sentence per line (non-parallel pool); blank lines ignored."""
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(tokenize_and_truncate(line, max_len=max_len))
    return out


def write_sentences(path, sentences: Iterable[Sentence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sentences:
            fh.write(s.text + "\n")
