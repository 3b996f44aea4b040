"""Fixed character-level vocabulary for the benchmark templates.

Ids are contiguous from 0: three specials (PAD, BOS, EOS), then newline,
space, '=', '>', ':', digits, lowercase, uppercase. The mapping is built
once at import and never changes.
"""

import string

from .errors import VocabError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

_SPECIALS = ("<pad>", "<bos>", "<eos>")
_TEXT_SYMBOLS = "\n =>:" + string.digits + string.ascii_lowercase + string.ascii_uppercase

SYMBOLS: tuple[str, ...] = _SPECIALS + tuple(_TEXT_SYMBOLS)
VOCAB_SIZE = len(SYMBOLS)

_CHAR_TO_ID = {ch: i + len(_SPECIALS) for i, ch in enumerate(_TEXT_SYMBOLS)}
_ID_TO_CHAR = {i + len(_SPECIALS): ch for i, ch in enumerate(_TEXT_SYMBOLS)}


def encode(text: str) -> list[int]:
    """Map text to token ids, one per character; round-trips exactly."""
    ids = []
    for i, ch in enumerate(text):
        tok = _CHAR_TO_ID.get(ch)
        if tok is None:
            offset = len(text[:i].encode("utf-8"))
            raise VocabError(f"character {ch!r} at byte offset {offset} is not in the vocabulary")
        ids.append(tok)
    return ids


def decode(ids) -> str:
    """Inverse of encode; special ids (PAD/BOS/EOS) are rejected."""
    chars = []
    for tok in ids:
        tok = int(tok)
        if tok in (PAD_ID, BOS_ID, EOS_ID):
            raise VocabError(f"id {tok} is a special token and cannot be decoded to text")
        ch = _ID_TO_CHAR.get(tok)
        if ch is None:
            raise VocabError(f"id {tok} is outside the vocabulary (size {VOCAB_SIZE})")
        chars.append(ch)
    return "".join(chars)
