"""Token vocabulary with reserved pad/start/end/unknown ids."""

from __future__ import annotations

import re
from collections import Counter

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def from_sentences(cls, sentences, min_freq: int = 1) -> "Vocabulary":
        """Build from an iterable of raw sentence strings.

        Tokens are ordered by descending frequency (ties alphabetical) so the
        table is independent of corpus order.
        """
        counts = Counter()
        for sent in sentences:
            counts.update(tokenize(sent))
        kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list:
        return [self.id_to_token[i] for i in ids]
