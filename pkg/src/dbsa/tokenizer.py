"""Byte-level tokenizer: 256 byte values plus PAD/BOS/EOS specials.

No external vocabulary artifact; any text round-trips exactly.
"""

from __future__ import annotations

from .errors import ValidationError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
BYTE_OFFSET = 3
VOCAB_SIZE = 256 + BYTE_OFFSET


def encode(text: str) -> list[int]:
    return [BYTE_OFFSET + b for b in text.encode("utf-8")]


def decode(ids: list[int]) -> str:
    out = bytearray()
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise ValidationError(f"token id {i} outside vocabulary [0, {VOCAB_SIZE})")
        if i >= BYTE_OFFSET:
            out.append(i - BYTE_OFFSET)
    return out.decode("utf-8", errors="replace")
