"""WordPiece tokenization of short search phrases."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
MAX_WORD_CHARS = 100
DEFAULT_MAX_LEN = 16


class VocabError(ValueError):
    pass


class Vocabulary:
    """Ordered token list; a token's id is its index."""

    def __init__(self, tokens: Sequence[str], lowercase: bool = True) -> None:
        self.tokens = list(tokens)
        self.lowercase = lowercase
        self.ids: dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.ids:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1}")
            self.ids[tok] = i
        for special in SPECIALS:
            if special not in self.ids:
                raise VocabError(f"vocabulary is missing special token {special}")
        if self.ids[PAD] != 0:
            raise VocabError(f"{PAD} must have id 0, found at {self.ids[PAD]}")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def __getitem__(self, token: str) -> int:
        return self.ids[token]

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def cls_id(self) -> int:
        return self.ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]


def load_vocab(path: str | Path, lowercase: bool = True) -> Vocabulary:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    try:
        return Vocabulary(lines, lowercase=lowercase)
    except VocabError as exc:
        raise VocabError(f"{path}: {exc}") from None


def write_vocab(tokens: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    # ASCII symbols like $ ^ ` are not Unicode P* but are split anyway
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str, lowercase: bool = True) -> list[str]:
    if lowercase:
        text = text.lower()
    words: list[str] = []
    for chunk in text.split():
        current = []
        for ch in chunk:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    """Greedy longest-match-first split; any unmatched position makes the whole word [UNK]."""
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = "##" + piece
            if piece in vocab:
                match = piece
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


def tokenize(phrase: str, vocab: Vocabulary) -> list[str]:
    pieces = []
    for word in pre_tokenize(phrase, vocab.lowercase):
        pieces.extend(wordpiece(word, vocab))
    return pieces


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask: tuple[int, ...]
    true_length: int

    def __len__(self) -> int:
        return len(self.ids)


def encode(phrase: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    pieces = tokenize(phrase, vocab)[: max_len - 2]
    ids = [vocab.cls_id] + [vocab[p] for p in pieces] + [vocab.sep_id]
    n = len(ids)
    pad = max_len - n
    return TokenSequence(tuple(ids + [vocab.pad_id] * pad), (1,) * n + (0,) * pad, n)
