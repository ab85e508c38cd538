"""Byte-level tokenizer with atomic special tokens.

Ids 0-255 are raw UTF-8 bytes; the five special tokens occupy 256-260.
Round trip holds for any UTF-8 string free of special-token literals.
"""

from __future__ import annotations

import re

from .errors import DataError

IMAGE_TOKEN_ID = 256
BOS_ID = 257
EOS_ID = 258
HUMAN_ID = 259
ASSISTANT_ID = 260

SPECIAL_TOKENS = {
    "<image>": IMAGE_TOKEN_ID,
    "<bos>": BOS_ID,
    "<eos>": EOS_ID,
    "<human>": HUMAN_ID,
    "<assistant>": ASSISTANT_ID,
}
_ID_TO_SPECIAL = {v: k for k, v in SPECIAL_TOKENS.items()}
_SPECIAL_PATTERN = re.compile("|".join(re.escape(t) for t in SPECIAL_TOKENS))

VOCAB_SIZE = 256 + len(SPECIAL_TOKENS)


def tokenize(text: str) -> list[int]:
    ids: list[int] = []
    pos = 0
    for match in _SPECIAL_PATTERN.finditer(text):
        ids.extend(text[pos:match.start()].encode("utf-8"))
        ids.append(SPECIAL_TOKENS[match.group(0)])
        pos = match.end()
    ids.extend(text[pos:].encode("utf-8"))
    return ids


def detokenize(ids) -> str:
    parts: list[str] = []
    buffer = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i <= 255:
            buffer.append(i)
            continue
        special = _ID_TO_SPECIAL.get(i)
        if special is None:
            raise DataError(f"unknown token id {i}")
        if buffer:
            parts.append(_decode(buffer))
            buffer = bytearray()
        parts.append(special)
    if buffer:
        parts.append(_decode(buffer))
    return "".join(parts)


def _decode(buffer: bytearray) -> str:
    try:
        return bytes(buffer).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"token ids are not valid UTF-8: {exc}") from None
