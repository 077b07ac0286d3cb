"""Word-level vocabulary, prompt template and the reasoning/answer response grammar."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import VocabularyError

PAD, BOS, EOS, R_OPEN, R_CLOSE, A_OPEN, A_CLOSE = range(7)
SPECIAL_TOKENS = (
    "<pad>",
    "<bos>",
    "<eos>",
    "<reasoning>",
    "</reasoning>",
    "<answer>",
    "</answer>",
)
TAG_IDS = (R_OPEN, R_CLOSE, A_OPEN, A_CLOSE)

MODALITIES = ("image", "ocr")

# The prompt reads:
#   classify the document as one of : <c1> ; <c2> ; ... ; <cn> . input : <modality> . <document words> <bos>
PROMPT_HEADER = "classify the document as one of :"
PROMPT_CLASS_SEPARATOR = ";"
PROMPT_INPUT_MARKER = ". input :"
PROMPT_BODY_MARKER = "."

TEMPLATE_WORDS = tuple(
    dict.fromkeys(
        (PROMPT_HEADER + " " + PROMPT_CLASS_SEPARATOR + " " + PROMPT_INPUT_MARKER).split()
        + list(MODALITIES)
    )
)


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return " ".join(text.lower().split())


class Vocab:
    """Bijective word <-> id map whose first seven ids are the special tokens."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if tuple(words[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError("vocabulary must start with the special tokens in fixed order")
        index: dict[str, int] = {}
        for i, w in enumerate(words):
            if not w or w != w.strip() or " " in w:
                raise VocabularyError(f"invalid vocabulary entry {w!r}")
            if w in index:
                raise VocabularyError(f"duplicate vocabulary entry {w!r}")
            index[w] = i
        self.words = words
        self._index = index

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocab":
        """Specials, then every other word once in first-seen order."""
        ordered = list(SPECIAL_TOKENS)
        seen = set(ordered)
        for w in words:
            for piece in normalize(w).split():
                if piece not in seen:
                    seen.add(piece)
                    ordered.append(piece)
        return cls(ordered)

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def word(self, token: int) -> str:
        if not 0 <= token < len(self.words):
            raise VocabularyError(f"token id {token} outside vocabulary of size {len(self.words)}")
        return self.words[token]

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in normalize(text).split()]

    def encode_words(self, words: Iterable[str]) -> list[int]:
        out: list[int] = []
        for w in words:
            out.extend(self.encode(w))
        return out

    def decode(self, tokens: Iterable[int]) -> str:
        return " ".join(self.word(int(t)) for t in tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.words, indent=0) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PromptSpec:
    classes: tuple[str, ...]
    modality: str
    document: tuple[str, ...]

    def __post_init__(self):
        classes = tuple(normalize(c) for c in self.classes)
        if not classes:
            raise ValueError("prompt class list is empty")
        if len(set(classes)) != len(classes):
            raise ValueError(f"duplicate class names in prompt: {classes}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "document", tuple(self.document))


def build_prompt(spec: PromptSpec, vocab: Vocab) -> list[int]:
    parts = [PROMPT_HEADER]
    parts.append(f" {PROMPT_CLASS_SEPARATOR} ".join(spec.classes))
    parts.append(PROMPT_INPUT_MARKER)
    parts.append(spec.modality)
    parts.append(PROMPT_BODY_MARKER)
    tokens = vocab.encode(" ".join(parts))
    tokens.extend(vocab.encode_words(spec.document))
    tokens.append(BOS)
    return tokens


@dataclass
class ParsedResponse:
    reasoning: list[int] = field(default_factory=list)
    answer: list[int] = field(default_factory=list)
    counts: dict[int, int] = field(default_factory=dict)
    reasoning_block: bool = False
    answer_block: bool = False
    order_ok: bool = False
    label: str | None = None


def _has_block(positions: dict[int, list[int]], open_id: int, close_id: int) -> bool:
    opens, closes = positions[open_id], positions[close_id]
    return bool(opens and closes and opens[0] < closes[-1])


def parse_response(tokens: Sequence[int], vocab: Vocab) -> ParsedResponse:
    """Total parser: any token list yields a result; malformed answers just lack a label.

    Tokens after the first EOS are ignored.
    """
    toks = [int(t) for t in tokens]
    if EOS in toks:
        toks = toks[: toks.index(EOS)]
    positions: dict[int, list[int]] = {t: [] for t in TAG_IDS}
    for i, t in enumerate(toks):
        if t in positions:
            positions[t].append(i)
    counts = {t: len(p) for t, p in positions.items()}

    parsed = ParsedResponse(counts=counts)
    parsed.reasoning_block = _has_block(positions, R_OPEN, R_CLOSE)
    parsed.answer_block = _has_block(positions, A_OPEN, A_CLOSE)
    if parsed.reasoning_block:
        start = positions[R_OPEN][0]
        end = next(p for p in positions[R_CLOSE] if p > start)
        parsed.reasoning = toks[start + 1 : end]
    if counts[A_OPEN] == 1 and counts[A_CLOSE] == 1 and positions[A_OPEN][0] < positions[A_CLOSE][0]:
        start, end = positions[A_OPEN][0], positions[A_CLOSE][0]
        parsed.answer = toks[start + 1 : end]
        try:
            parsed.label = normalize(vocab.decode(parsed.answer))
        except VocabularyError:
            parsed.label = None
    parsed.order_ok = all(c == 1 for c in counts.values()) and (
        positions[R_OPEN][0] < positions[R_CLOSE][0] < positions[A_OPEN][0] < positions[A_CLOSE][0]
    )
    return parsed


def canonical_response(reasoning: str, label: str, vocab: Vocab) -> list[int]:
    """``<reasoning> ... </reasoning> <answer> label </answer> <eos>`` as token ids."""
    return (
        [R_OPEN]
        + vocab.encode(reasoning)
        + [R_CLOSE, A_OPEN]
        + vocab.encode(label)
        + [A_CLOSE, EOS]
    )
