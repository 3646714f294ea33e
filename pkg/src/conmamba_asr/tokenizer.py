"""Character vocabulary with reserved specials."""

from __future__ import annotations

import re
from pathlib import Path

from . import DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
_SPACE = "<space>"  # on-disk spelling of " "


def normalize_text(s: str) -> str:
    """Uppercase, drop punctuation except apostrophes, collapse whitespace."""
    s = re.sub(r"[^\w\s']|_", " ", s.upper())
    return " ".join(s.split())


class Vocab:
    def __init__(self, symbols):
        symbols = list(symbols)
        if tuple(symbols[:4]) != SPECIALS:
            raise DataError("vocab must start with <pad>, <s>, </s>, <unk>")
        if len(set(symbols)) != len(symbols):
            raise DataError("duplicate symbols in vocab")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.symbols == other.symbols

    pad_id, bos_id, eos_id, unk_id = PAD, BOS, EOS, UNK

    def encode(self, text: str) -> list[int]:
        ids = [self.index.get(ch, UNK) for ch in normalize_text(text)]
        return [BOS, *ids, EOS]

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.symbols):
                raise DataError(f"token id {i} outside vocab of size {len(self.symbols)}")
            if i >= len(SPECIALS):
                out.append(self.symbols[i])
        return "".join(out)

    def save(self, path: str | Path) -> None:
        lines = [_SPACE if s == " " else s for s in self.symbols]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(" " if s == _SPACE else s for s in lines)


def build_vocab(transcripts) -> Vocab:
    """Specials followed by the sorted characters of the normalized transcripts.

    Accepts strings or manifest entries (anything with a ``transcript``).
    """
    chars = set()
    n = 0
    for t in transcripts:
        text = getattr(t, "transcript", t)
        chars.update(normalize_text(text))
        n += 1
    if n == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocab([*SPECIALS, *sorted(chars)])


def encode_text(vocab: Vocab, s: str) -> list[int]:
    return vocab.encode(s)


def decode_tokens(vocab: Vocab, ids) -> str:
    return vocab.decode(ids)
