"""Byte-level tokenizer: ids 0-255 are raw UTF-8 bytes, 256-259 are specials."""

from __future__ import annotations

EOS_ID = 256
PAD_ID = 257
BOS_ID = 258
UNK_ID = 259
VOCAB_SIZE = 260

SPECIAL_IDS = {EOS_ID, PAD_ID, BOS_ID, UNK_ID}


def tokenize(text: str) -> list[int]:
    """UTF-8 bytes of the text; no specials are ever emitted."""
    return list(text.encode("utf-8"))


def detokenize(tokens) -> str:
    """Inverse of tokenize; special ids are control tokens and are skipped."""
    data = bytearray()
    for t in tokens:
        t = int(t)
        if 0 <= t <= 255:
            data.append(t)
        elif t in SPECIAL_IDS:
            continue
        else:
            raise ValueError(f"unknown special id {t}")
    return data.decode("utf-8", errors="replace")
