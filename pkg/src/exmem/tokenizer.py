"""Byte-level tokenizer.

Token ids 0..255 are raw UTF-8 bytes.  Id 256 is the BOS / separator token,
written ``<s>``.  The modified BOS used for reference encoding is the BOS
token followed by the bytes of ``Reference:``; the same prefix is prepended
to every inference session so that encoded references and live contexts see
an identical opening.
"""

from __future__ import annotations

from .errors import InputError

N_BYTE_TOKENS = 256
BOS_TOKEN = 256

REF_PREFIX_TEXT = "Reference:"
REF_PREFIX_TOKENS: tuple[int, ...] = (BOS_TOKEN,) + tuple(REF_PREFIX_TEXT.encode("utf-8"))


def encode(text: str) -> list[int]:
    """Encode text into byte token ids (no BOS added)."""
    return list(text.encode("utf-8"))


def decode(tokens) -> str:
    """Decode token ids back to text.

    Non-byte tokens (BOS and anything >= 256) are dropped; invalid UTF-8 is
    replaced rather than raised, since generated byte streams need not align
    with character boundaries.
    """
    data = bytes(t for t in tokens if 0 <= t < N_BYTE_TOKENS)
    return data.decode("utf-8", errors="replace")


def validate_tokens(tokens, n_vocab: int) -> None:
    """Raise InputError unless every id is an int in [0, n_vocab)."""
    for t in tokens:
        if not 0 <= int(t) < n_vocab:
            raise InputError(f"token id {t} outside vocabulary of size {n_vocab}")
