"""Whitespace-piece tokenizer over prompt/completion text.

Pieces are maximal runs of non-whitespace plus their trailing
whitespace, so concatenating the pieces reconstructs the input exactly
and character offsets line up with piece boundaries whenever the prompt
ends in whitespace (or the continuation starts with it). Vocabulary ids
key on the stripped word; unseen words map to the unknown id but keep
their surface text for offset reporting.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_PIECE = re.compile(r"\S+\s*")

UNK = "<unk>"


def split_pieces(text: str) -> list[str]:
    return _PIECE.findall(text)


@dataclass(frozen=True)
class Encoded:
    """Token ids plus the surface pieces and their character offsets."""

    ids: tuple[int, ...]
    pieces: tuple[str, ...]
    offsets: tuple[int, ...]

    @property
    def text(self) -> str:
        return "".join(self.pieces)


class Tokenizer:
    def __init__(self, words: list[str]):
        if UNK in words:
            raise ValueError(f"'{UNK}' is reserved")
        self.words = [UNK] + list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def from_texts(cls, texts) -> "Tokenizer":
        seen: dict[str, None] = {}
        for text in texts:
            for piece in split_pieces(text):
                seen.setdefault(piece.rstrip(), None)
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> Encoded:
        ids, pieces, offsets = [], [], []
        pos = 0
        for piece in split_pieces(text):
            ids.append(self.ids.get(piece.rstrip(), 0))
            pieces.append(piece)
            offsets.append(pos)
            pos += len(piece)
        # leading whitespace (no \S anchor) would be dropped by the piece
        # regex; fold it into reconstruction by rejecting such inputs
        if "".join(pieces) != text.lstrip():
            raise ValueError("tokenization does not reconstruct input")
        if text != text.lstrip():
            raise ValueError("leading whitespace is not tokenizable")
        return Encoded(ids=tuple(ids), pieces=tuple(pieces),
                       offsets=tuple(offsets))

    def encode_pair(self, prompt: str, completion: str) -> tuple[Encoded, int]:
        """Encode prompt+completion; return the encoding and the index of
        the first completion token. Inserts a separator space (owned by
        the completion) when the boundary would fall inside a piece."""
        boundary = len(prompt)
        if not (prompt.endswith(tuple(" \t\n")) or
                completion.startswith(tuple(" \t\n"))):
            # the separator space merges into the prompt's last piece,
            # so the continuation starts one character later
            completion = " " + completion
            boundary += 1
        enc = self.encode(prompt + completion)
        try:
            start = enc.offsets.index(boundary)
        except ValueError:
            raise ValueError("completion does not start on a piece boundary")
        return enc, start
