"""Tokenizers with character offsets.

The featurizer only needs ``tokenize`` (text -> tokens with offsets) and
``token_id``. :class:`WordTokenizer` is the desk-scale default;
:class:`HFTokenizer` wraps a pretrained fast tokenizer.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Protocol

from .data import Dialogue, ServiceSchema

PAD, UNK, CLS, SEP, NULL = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[NULL]"
SYS_MARKER, USR_MARKER = "sys:", "usr:"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, NULL, SYS_MARKER, USR_MARKER)

VOCAB_FORMAT = "schema-dst-vocab"
VOCAB_VERSION = 1

_WORD_RE = re.compile(r"sys:|usr:|\w+|[^\w\s]")


@dataclass(frozen=True)
class Token:
    text: str
    start: int = -1
    end: int = -1
    # "sys" / "usr" for utterance content, None for everything else
    source: str | None = None


class Tokenizer(Protocol):
    pad_token: str
    cls_token: str
    sep_token: str
    null_token: str

    def tokenize(self, text: str) -> list[Token]: ...

    def token_id(self, token: str) -> int: ...

    @property
    def vocab_size(self) -> int: ...


class WordTokenizer:
    """Lowercasing word/punctuation tokenizer over a closed vocabulary."""

    pad_token, cls_token, sep_token, null_token, unk_token = PAD, CLS, SEP, NULL, UNK

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(tokens)
        if tuple(self.itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with the reserved tokens {SPECIAL_TOKENS}")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary contains duplicate tokens")

    @staticmethod
    def split(text: str) -> list[Token]:
        return [Token(m.group().lower(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]

    def tokenize(self, text: str) -> list[Token]:
        return self.split(text)

    def token_id(self, token: str) -> int:
        return self.stoi.get(token, 1)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "WordTokenizer":
        counts = Counter(t.text for text in texts for t in cls.split(text))
        for s in SPECIAL_TOKENS:
            counts.pop(s, None)
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(list(SPECIAL_TOKENS) + words)

    @classmethod
    def from_corpus(
        cls, schemas: Iterable[ServiceSchema], dialogues: Iterable[Dialogue], min_count: int = 1
    ) -> "WordTokenizer":
        return cls.build(corpus_texts(schemas, dialogues), min_count)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"format": VOCAB_FORMAT, "version": VOCAB_VERSION, "lowercase": True, "tokens": self.itos}, fh)

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
        if rec.get("format") != VOCAB_FORMAT or rec.get("version") != VOCAB_VERSION:
            raise ValueError(f"{path}: not a {VOCAB_FORMAT} v{VOCAB_VERSION} file")
        return cls(rec["tokens"])


def slot_phrase(name: str) -> str:
    return name.replace("_", " ")


def corpus_texts(schemas: Iterable[ServiceSchema], dialogues: Iterable[Dialogue]) -> Iterable[str]:
    """Every string the featurizer can emit tokens from."""
    for s in schemas:
        yield s.description
        for slot in s.slots:
            yield slot_phrase(slot.name)
            yield slot.description
            yield from slot.possible_values
        for it in s.intents:
            yield it.description
    for d in dialogues:
        for t in d.turns:
            yield t.utterance


class HFTokenizer:
    """Adapter over a ``transformers`` fast tokenizer (needs offset mappings).

    The null token maps onto an otherwise unused vocabulary entry; markers are
    tokenized as ordinary text by the wrapped tokenizer.
    """

    def __init__(self, hf_tokenizer, null_token: str = "[unused1]"):
        if not getattr(hf_tokenizer, "is_fast", False):
            raise TypeError("HFTokenizer needs a fast tokenizer (offset mappings)")
        self.hf = hf_tokenizer
        self.pad_token = hf_tokenizer.pad_token
        self.cls_token = hf_tokenizer.cls_token
        self.sep_token = hf_tokenizer.sep_token
        self.null_token = null_token

    def tokenize(self, text: str) -> list[Token]:
        enc = self.hf(text, add_special_tokens=False, return_offsets_mapping=True)
        toks = self.hf.convert_ids_to_tokens(enc["input_ids"])
        return [Token(t, s, e) for t, (s, e) in zip(toks, enc["offset_mapping"])]

    def token_id(self, token: str) -> int:
        return self.hf.convert_tokens_to_ids(token)

    @property
    def vocab_size(self) -> int:
        return len(self.hf)
