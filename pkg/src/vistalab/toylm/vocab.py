from __future__ import annotations

from dataclasses import dataclass, field

PAD, BOS, EOS, IMG = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<img>")


@dataclass
class TokenVocab:
    """Bijective token <-> id table. Reserved tokens occupy ids 0..3."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise ValueError("first four tokens must be PAD, BOS, EOS, IMG")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, words: list[str], size: int = 64) -> "TokenVocab":
        tokens = list(RESERVED) + list(words)
        if len(tokens) > size:
            raise ValueError(f"{len(tokens)} tokens do not fit in a vocab of {size}")
        tokens += [f"<unused{i}>" for i in range(size - len(tokens))]
        return cls(tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index[token]

    def encode(self, words) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]
