"""Recognition alphabet and label <-> id codecs."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyLabel, LabelTooLong, UnknownChar

ALPHABET = string.digits + string.ascii_lowercase


@dataclass(frozen=True)
class LabelCodec:
    """Case-insensitive 36-symbol codec with BOS/EOS/PAD control ids.

    Ids 0-35 index ``alphabet``; the control ids follow it.
    """

    alphabet: str = ALPHABET
    max_label_len: int = 25
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet has duplicate characters")
        if self.max_label_len < 1:
            raise ValueError("max_label_len must be positive")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.alphabet)})

    @property
    def bos(self) -> int:
        return len(self.alphabet)

    @property
    def eos(self) -> int:
        return len(self.alphabet) + 1

    @property
    def pad(self) -> int:
        return len(self.alphabet) + 2

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 3

    @property
    def seq_len(self) -> int:
        """Length of an encoded target: BOS + max_label_len chars + EOS."""
        return self.max_label_len + 2

    def normalize(self, raw: str) -> str:
        return "".join(c for c in raw.lower() if c in self._index)

    def encode(self, text: str) -> list[int]:
        if len(text) > self.max_label_len:
            raise LabelTooLong(f"label {text!r} has {len(text)} chars > {self.max_label_len}")
        try:
            ids = [self._index[c] for c in text]
        except KeyError as exc:
            raise UnknownChar(f"character {exc.args[0]!r} not in alphabet") from None
        ids = [self.bos, *ids, self.eos]
        return ids + [self.pad] * (self.seq_len - len(ids))

    def encode_batch(self, texts: Iterable[str]) -> list[list[int]]:
        return [self.encode(t) for t in texts]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        n = len(self.alphabet)
        for i in ids:
            i = int(i)
            if i == self.eos:
                break
            if 0 <= i < n:
                out.append(self.alphabet[i])
        return "".join(out)

    def describe(self) -> dict:
        return {
            "alphabet": self.alphabet,
            "max_label_len": self.max_label_len,
            "bos": self.bos,
            "eos": self.eos,
            "pad": self.pad,
        }


DEFAULT_CODEC = LabelCodec()


def normalize_text(raw: str, codec: LabelCodec = DEFAULT_CODEC) -> str:
    """Lowercase ``raw`` and drop every character outside the alphabet."""
    return codec.normalize(raw)


def encode_label(text: str, codec: LabelCodec = DEFAULT_CODEC) -> list[int]:
    """``[BOS, ids..., EOS]`` right-padded with PAD to ``max_label_len + 2``."""
    return codec.encode(text)


def decode_ids(ids: Sequence[int], codec: LabelCodec = DEFAULT_CODEC) -> str:
    """Characters for alphabet ids up to the first EOS; control ids are skipped."""
    return codec.decode(ids)


def char_split(text: str) -> str:
    """Space-separate the characters of a word so CLIP tokenizes them one by one.

    >>> char_split("analysis")
    'a n a l y s i s'
    """
    if not text:
        raise EmptyLabel("cannot split an empty label")
    return " ".join(text)
