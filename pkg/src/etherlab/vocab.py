"""Shared token vocabulary used by environment instructions and game messages.

The first two ids are the grounded control symbols (start/end of sentence);
the environment's instruction words occupy the next ids, and the remainder of
the vocabulary is made of free symbols with no assigned meaning.
"""

from __future__ import annotations

SOS = 0
EOS = 1

COLORS = ("red", "green", "blue", "purple", "yellow", "grey")
SHAPES = ("ball", "key", "box")
ARTICLES = ("a", "the")

WORDS = ("pick", "up") + ARTICLES + COLORS + SHAPES

WORD_TO_ID = {word: idx + 2 for idx, word in enumerate(WORDS)}
ID_TO_WORD = {idx: word for word, idx in WORD_TO_ID.items()}

COLOR_TOKEN_IDS = tuple(WORD_TO_ID[c] for c in COLORS)
SHAPE_TOKEN_IDS = tuple(WORD_TO_ID[s] for s in SHAPES)

DEFAULT_VOCAB_SIZE = 64
MIN_VOCAB_SIZE = len(WORDS) + 2


def token_name(token_id: int) -> str:
    """Readable name for a token id; free symbols are named sym<i>."""
    if token_id == SOS:
        return "<sos>"
    if token_id == EOS:
        return "<eos>"
    if token_id in ID_TO_WORD:
        return ID_TO_WORD[token_id]
    return f"sym{token_id}"


def tokenize(words: list[str] | tuple[str, ...]) -> tuple[int, ...]:
    return tuple(WORD_TO_ID[w] for w in words)


def detokenize(token_ids) -> list[str]:
    return [token_name(int(t)) for t in token_ids]


def truncate_at_eos(token_ids) -> tuple[int, ...]:
    """Drop the end-of-sentence symbol and everything after it."""
    out = []
    for t in token_ids:
        if int(t) == EOS:
            break
        out.append(int(t))
    return tuple(out)
