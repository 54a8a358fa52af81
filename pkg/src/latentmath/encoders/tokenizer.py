"""LaTeX tokenizer and the token vocabulary."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable

CONTROL_SEQUENCES = ("\\cos", "\\sin", "\\log", "\\exp", "\\frac")
OPERATORS = set("+-*/^_(){}=")
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


def tokenize_latex(text: str) -> list[str]:
    """Greedy longest-match tokens; unknown characters and control words become UNK."""
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch == "\\":
            j = i + 1
            while j < n and text[j].isascii() and text[j].isalpha():
                j += 1
            word = text[i:j]
            out.append(word if word in CONTROL_SEQUENCES else UNK)
            i = max(j, i + 1)
        elif ch.isascii() and ch.isdigit():
            j = i + 1
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            out.append(text[i:j])
            i = j
        elif (ch.isascii() and ch.isalpha()) or ch in OPERATORS:
            out.append(ch)
            i += 1
        else:
            out.append(UNK)
            i += 1
    return out


class TokenVocabulary:
    """token -> id map with PAD=0 and UNK=1; frozen once built."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "TokenVocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(tokenize_latex(text))
        seen.discard(UNK)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokenize_latex(text)]

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TokenVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [PAD, UNK]:
            raise ValueError(f"{path}: vocabulary must start with {PAD} and {UNK}")
        return cls(lines[2:])
