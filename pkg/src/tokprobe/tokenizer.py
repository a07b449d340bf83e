"""Uncased basic tokenization plus greedy WordPiece segmentation."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

from .errors import VocabError

CLS = "[CLS]"
SEP = "[SEP]"
PAD = "[PAD]"
UNK = "[UNK]"
MASK = "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

MAX_WORD_CHARS = 100
DEFAULT_MAX_LEN = 128


class Vocabulary:
    """Bijective token <-> id map with the BERT special tokens."""

    def __init__(self, tokens):
        self.id_to_token = list(tokens)
        self.token_to_id = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise VocabError(f"duplicate token {tok!r} on line {i + 1}")
            self.token_to_id[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in self.token_to_id]
        if missing:
            raise VocabError(f"vocabulary lacks special tokens: {', '.join(missing)}")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __getitem__(self, token):
        return self.token_to_id[token]

    @property
    def special_ids(self):
        return {t: self.token_to_id[t] for t in SPECIAL_TOKENS}

    @property
    def pad_id(self):
        return self.token_to_id[PAD]


def is_punctuation(char: str) -> bool:
    cp = ord(char)
    # every non-alphanumeric ASCII symbol counts, e.g. "^", "$", "`"
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(char).startswith("P")


def is_punctuation_word(word: str) -> bool:
    return bool(word) and all(is_punctuation(c) for c in word)


def _is_whitespace(char):
    if char in " \t\n\r":
        return True
    return unicodedata.category(char) == "Zs"


def _is_control(char):
    if char in "\t\n\r":
        return False
    return unicodedata.category(char).startswith("C")


def _is_cjk(cp):
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0x2A700 <= cp <= 0x2B73F
        or 0x2B740 <= cp <= 0x2B81F
        or 0x2B820 <= cp <= 0x2CEAF
        or 0xF900 <= cp <= 0xFAFF
        or 0x2F800 <= cp <= 0x2FA1F
    )


def _clean(text):
    out = []
    for c in text:
        cp = ord(c)
        if cp == 0 or cp == 0xFFFD or _is_control(c):
            continue
        out.append(" " if _is_whitespace(c) else c)
    return "".join(out)


def _pad_cjk(text):
    out = []
    for c in text:
        if _is_cjk(ord(c)):
            out.extend((" ", c, " "))
        else:
            out.append(c)
    return "".join(out)


def _strip_accents(text):
    text = unicodedata.normalize("NFD", text)
    return "".join(c for c in text if unicodedata.category(c) != "Mn")


def _split_punct(word):
    pieces = []
    current = []
    for c in word:
        if is_punctuation(c):
            if current:
                pieces.append("".join(current))
                current = []
            pieces.append(c)
        else:
            current.append(c)
    if current:
        pieces.append("".join(current))
    return pieces


def basic_tokenize_aligned(text: str) -> list[tuple[str, int]]:
    """Basic tokenization returning ``(word, source_index)`` pairs.

    ``source_index`` is the index of the whitespace-delimited chunk of the
    raw text the word came from, which is how perturbations address words.
    """
    text = _clean(unicodedata.normalize("NFC", text))
    # CJK padding would split a chunk, so source indices use the raw chunks
    result = []
    for src, chunk in enumerate(text.split()):
        for sub in _pad_cjk(chunk).split():
            sub = _strip_accents(sub.lower())
            for piece in _split_punct(sub):
                result.append((piece, src))
    return result


def basic_tokenize(text: str) -> list[str]:
    return [w for w, _ in basic_tokenize_aligned(text)]


def wordpiece(word: str, vocab: Vocabulary) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab:
                match = candidate
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


@dataclass
class TokenizedSentence:
    """Encoded sentence, padded to a fixed length.

    ``word_index`` points into the basic-tokenizer words, ``source_index``
    into the whitespace chunks of the raw text; both are None for specials.
    """

    tokens: list
    ids: list
    word_index: list
    source_index: list
    is_special: list
    words: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.tokens)

    @property
    def n_real(self):
        return sum(1 for t in self.tokens if t != PAD)

    @property
    def real_positions(self):
        return [i for i, t in enumerate(self.tokens) if t != PAD]

    @property
    def attention_mask(self):
        return [t != PAD for t in self.tokens]

    @property
    def truncated(self):
        seen = {w for w in self.word_index if w is not None}
        return len(seen) < len(self.words)

    def positions_of_source(self, source_idx):
        return [i for i, s in enumerate(self.source_index) if s == source_idx]


class WordPieceTokenizer:
    def __init__(self, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN):
        self.vocab = vocab
        self.max_len = max_len

    def tokenize(self, text):
        return [p for w in basic_tokenize(text) for p in wordpiece(w, self.vocab)]

    def encode(self, text: str, max_len: int | None = None, pad: bool = True) -> TokenizedSentence:
        return encode(text, self.vocab, max_len or self.max_len, pad=pad)


def encode(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN, pad: bool = True) -> TokenizedSentence:
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    words = basic_tokenize_aligned(text)
    tokens, word_index, source_index = [CLS], [None], [None]
    for wi, (word, src) in enumerate(words):
        for piece in wordpiece(word, vocab):
            tokens.append(piece)
            word_index.append(wi)
            source_index.append(src)
    # drop trailing pieces so that [SEP] fits
    del tokens[max_len - 1:], word_index[max_len - 1:], source_index[max_len - 1:]
    tokens.append(SEP)
    word_index.append(None)
    source_index.append(None)
    is_special = [True] + [False] * (len(tokens) - 2) + [True]
    if pad:
        extra = max_len - len(tokens)
        tokens += [PAD] * extra
        word_index += [None] * extra
        source_index += [None] * extra
        is_special += [True] * extra
    ids = [vocab[t] for t in tokens]
    return TokenizedSentence(tokens, ids, word_index, source_index, is_special, [w for w, _ in words])
