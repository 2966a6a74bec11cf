"""Unified token vocabulary shared by instructions, vision-language answers and action strings."""

import logging
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

import config
from action_codec import ACTION_SEPARATOR, COMPONENT_SEPARATOR, BinCodecConfig, bin_token
from exceptions import DatasetFormatError, VocabularyError

logger = logging.getLogger('vla.vocab')

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
ANSWER_START = "<ans>"
SPECIAL_TOKENS = [PAD, BOS, EOS, COMPONENT_SEPARATOR, ACTION_SEPARATOR, ANSWER_START]
SPACE = " "
CHARACTER_TOKENS = list("0123456789") + [".", "-", "(", ")", ",", SPACE]

WORD_RE = re.compile(r"[a-z]+")


class Vocabulary:
    """Ordered, immutable token list: specials, characters, sorted words, bin tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index: Dict[str, int] = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise ValueError(f"Duplicate token {tok!r}")
            self.index[tok] = i
        missing = [t for t in SPECIAL_TOKENS + CHARACTER_TOKENS if t not in self.index]
        if missing:
            raise ValueError(f"Vocabulary lacks required tokens: {missing}")
        self.words = frozenset(t for t in self.tokens if WORD_RE.fullmatch(t))
        self.num_bins = sum(1 for t in self.tokens if t.startswith("<bin_"))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(token)

    def ids(self, tokens: Iterable[str]) -> List[int]:
        return [self.id(t) for t in tokens]

    def token(self, token_id: int) -> str:
        return self.tokens[int(token_id)]

    def token_strings(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[int(i)] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def answer_start_id(self) -> int:
        return self.index[ANSWER_START]

    def to_dict(self) -> Dict:
        return {"version": config.VOCAB_VERSION, "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabulary":
        if data.get("version") != config.VOCAB_VERSION:
            raise DatasetFormatError(
                f"Vocabulary version {data.get('version')} != {config.VOCAB_VERSION}"
            )
        return cls(data["tokens"])


@dataclass
class TokenSequence:
    """Token ids plus a role mask: True marks supervised answer/action positions."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape:
            raise ValueError(f"mask length {self.mask.shape} != sequence length {self.ids.shape}")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def validate(self, vocab: Vocabulary) -> None:
        if len(self) and (self.ids.min() < 0 or self.ids.max() >= len(vocab)):
            raise ValueError("token id outside the vocabulary")


def corpus_words(corpus: Iterable[str]) -> List[str]:
    words = set()
    for text in corpus:
        for chunk in text.split():
            if WORD_RE.fullmatch(chunk):
                words.add(chunk)
    return sorted(words)


def build_vocab(corpus: Iterable[str], bin_cfg: Optional[BinCodecConfig] = None) -> Vocabulary:
    """
    Build the deterministic vocabulary.

    Args:
        corpus: Every instruction/question/answer string the generators can emit
        bin_cfg: When given, appends one token per bin for the baseline codec

    Returns:
        Vocabulary: specials, characters, sorted unique words, then bin tokens
    """
    tokens = SPECIAL_TOKENS + CHARACTER_TOKENS + corpus_words(corpus)
    if bin_cfg is not None:
        tokens += [bin_token(i) for i in range(bin_cfg.num_bins)]
    vocab = Vocabulary(tokens)
    logger.debug(f"Built vocabulary with {len(vocab)} tokens ({len(vocab.words)} words)")
    return vocab


def text_to_tokens(text: str) -> List[str]:
    """
    Split text into token strings: alphabetic chunks are word tokens, any other
    chunk is split into characters, and a space token separates two chunks unless
    both are words.
    """
    out: List[str] = []
    previous_word: Optional[bool] = None
    for chunk in text.split():
        is_word = bool(WORD_RE.fullmatch(chunk))
        if previous_word is not None and not (previous_word and is_word):
            out.append(SPACE)
        if is_word:
            out.append(chunk)
        else:
            out.extend(chunk)
        previous_word = is_word
    return out


def tokenize_text(text: str, vocab: Vocabulary) -> TokenSequence:
    """
    Tokenize closed-world text.

    Raises:
        VocabularyError: Naming the first out-of-vocabulary word or character
    """
    ids = vocab.ids(text_to_tokens(text))
    return TokenSequence(np.array(ids, dtype=np.int64), np.zeros(len(ids), dtype=bool))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of ``tokenize_text``: words are space-joined, characters concatenate."""
    parts: List[str] = []
    previous_word = False
    for tok in vocab.token_strings(ids):
        is_word = tok not in CHARACTER_TOKENS
        if is_word and previous_word:
            parts.append(SPACE)
        parts.append(tok)
        previous_word = is_word
    return "".join(parts)
