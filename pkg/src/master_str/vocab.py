"""Character inventory and tokenisation.

Default inventory: ``<PAD>=0, <SOS>=1, <EOS>=2, <UNK>=3``, then ``0-9``,
``A-Z``, ``a-z`` (66 classes).
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import ConfigurationError, FormatError

PAD, SOS, EOS, UNK = "<PAD>", "<SOS>", "<EOS>", "<UNK>"
SPECIALS = (PAD, SOS, EOS, UNK)
DEFAULT_CHARSET = string.digits + string.ascii_uppercase + string.ascii_lowercase
UNK_GLYPH = "□"


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.symbols[:4]) != SPECIALS:
            raise ConfigurationError("vocabulary must start with <PAD>, <SOS>, <EOS>, <UNK>")
        idx = {}
        for i, s in enumerate(self.symbols):
            if s in idx:
                raise ConfigurationError(f"duplicate symbol {s!r} in vocabulary")
            idx[s] = i
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.symbols)

    pad_id = property(lambda self: 0)
    sos_id = property(lambda self: 1)
    eos_id = property(lambda self: 2)
    unk_id = property(lambda self: 3)

    @property
    def charset(self) -> str:
        return "".join(self.symbols[4:])

    def id_of(self, symbol: str) -> int:
        return self.index.get(symbol, self.unk_id)

    def symbol_of(self, i: int) -> str:
        return self.symbols[i]

    def dumps(self) -> str:
        return "".join(s + "\n" for s in self.symbols)

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        if not text.endswith("\n"):
            raise FormatError("vocabulary file must end with a newline")
        return cls(tuple(text[:-1].split("\n")))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))


def build_vocab(charset: Optional[Iterable[str]] = None) -> Vocabulary:
    chars = list(DEFAULT_CHARSET if charset is None else charset)
    seen = set()
    for ch in chars:
        if ch in SPECIALS:
            raise ConfigurationError(f"charset may not contain the special marker {ch!r}")
        if ch in seen:
            raise ConfigurationError(f"duplicate symbol {ch!r} in charset")
        if "\n" in ch:
            raise ConfigurationError("charset symbols may not contain newlines")
        seen.add(ch)
    return Vocabulary(SPECIALS + tuple(chars))


def encode_text(s: str, vocab: Vocabulary) -> list[int]:
    return [vocab.sos_id] + [vocab.id_of(ch) for ch in s] + [vocab.eos_id]


def decode_tokens(ids: Sequence[int], vocab: Vocabulary) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        if i in (vocab.sos_id, vocab.pad_id):
            continue
        out.append(UNK_GLYPH if i == vocab.unk_id else vocab.symbol_of(i))
    return "".join(out)
