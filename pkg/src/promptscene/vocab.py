"""Closed token vocabulary shared by prompt templates and the generation head."""

from __future__ import annotations

SOS = "[SOS]"
EOS = "[EOS]"
OBJECT_SLOT = "[object]"

CLASS_NAMES = [
    "floor", "chair", "table", "lamp", "sofa", "bed",
    "cabinet", "shelf", "box", "ball", "plant", "monitor",
]
COLOR_NAMES = ["red", "green", "blue", "yellow", "purple", "orange"]
FUNCTION_WORDS = ["the", "all", "nearest", "near", "a", "how", "many"]
DIGITS = [str(d) for d in range(10)]
SPECIALS = [SOS, EOS, OBJECT_SLOT]

TOKENS = SPECIALS + CLASS_NAMES + COLOR_NAMES + FUNCTION_WORDS + DIGITS


class Vocabulary:
    """Ordered token list; index is the token id."""

    def __init__(self, tokens=None):
        self.tokens = list(tokens) if tokens is not None else list(TOKENS)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        if token not in self.index:
            raise KeyError(f"unknown token: {token!r}")
        return self.index[token]

    def ids(self, words):
        return [self.id(w) for w in words]

    def words(self, ids):
        return [self.tokens[i] for i in ids]

    @property
    def sos_id(self):
        return self.index[SOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def object_id(self):
        return self.index[OBJECT_SLOT]

    def encode_number(self, n):
        """Decimal digits of a non-negative integer, as token ids."""
        if n < 0:
            raise ValueError("only non-negative counts are representable")
        return [self.id(c) for c in str(int(n))]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(tokens)
