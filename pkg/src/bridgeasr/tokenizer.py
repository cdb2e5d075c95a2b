"""Character-level tokenizer.

One id per distinct character plus four specials on the text side
(BOS, EOS, PAD, UNK). The alignment branch extends the same id space
with a single BLANK whose id is one past the text vocabulary, so both
heads score the same symbols.
"""

from __future__ import annotations

from dataclasses import dataclass, field

TokenSequence = list[int]


@dataclass(frozen=True)
class Vocab:
    """Immutable char->id table; safe to share read-only."""

    chars: str
    char_to_id: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "char_to_id", {c: i for i, c in enumerate(self.chars)})

    @property
    def n_chars(self) -> int:
        return len(self.chars)

    # Specials are appended after the characters, ids stay dense 0..V-1.
    @property
    def bos_id(self) -> int:
        return self.n_chars

    @property
    def eos_id(self) -> int:
        return self.n_chars + 1

    @property
    def pad_id(self) -> int:
        return self.n_chars + 2

    @property
    def unk_id(self) -> int:
        return self.n_chars + 3

    @property
    def lm_size(self) -> int:
        return self.n_chars + 4

    @property
    def blank_id(self) -> int:
        # One past the text vocabulary, alignment side only.
        return self.lm_size

    @property
    def ctc_size(self) -> int:
        return self.lm_size + 1


def build_vocab(corpus) -> Vocab:
    """Collect every character in `corpus`, ordered by codepoint.

    Deterministic over the corpus multiset; duplicates are free.
    """
    chars = set()
    n = 0
    for text in corpus:
        n += 1
        chars.update(text)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab("".join(sorted(chars)))


def encode(text: str, vocab: Vocab) -> TokenSequence:
    """Map text to character ids; unknown characters become UNK."""
    unk = vocab.unk_id
    return [vocab.char_to_id.get(c, unk) for c in text]


def decode(ids, vocab: Vocab) -> str:
    """Inverse of encode on in-vocab text; specials render as ''."""
    out = []
    for i in ids:
        i = int(i)
        if i < 0 or i > vocab.blank_id:
            raise ValueError(f"token id {i} out of range for vocab of size {vocab.ctc_size}")
        if i < vocab.n_chars:
            out.append(vocab.chars[i])
    return "".join(out)
