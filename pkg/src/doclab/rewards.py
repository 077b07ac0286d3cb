"""Verifiable rewards: a format rubric over the tag grammar plus exact-match classification."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import UsageError, VocabularyError
from .textio import A_CLOSE, A_OPEN, R_CLOSE, R_OPEN, ParsedResponse, Vocab, normalize, parse_response

BLOCK_REWARD = 0.5
ORDER_REWARD = 0.5
SUPERFLUOUS_PENALTY = 0.5
CORRECT_REWARD = 1.0
MAX_TOTAL = 2 * BLOCK_REWARD + ORDER_REWARD + CORRECT_REWARD


@dataclass(frozen=True)
class RewardBreakdown:
    format: float
    classification: float
    total: float

    def to_dict(self) -> dict:
        return {"format": self.format, "classification": self.classification, "total": self.total}


@dataclass(frozen=True)
class RewardContext:
    gold: str
    parsed: ParsedResponse

    def __post_init__(self):
        gold = normalize(self.gold)
        if not gold:
            raise UsageError("gold label is empty")
        object.__setattr__(self, "gold", gold)


def superfluous_tags(parsed: ParsedResponse) -> int:
    """Tag occurrences beyond one open/close per complete block.

    A pair without a complete block contributes every one of its tags.
    """
    n = 0
    for (op, cl), complete in (
        ((R_OPEN, R_CLOSE), parsed.reasoning_block),
        ((A_OPEN, A_CLOSE), parsed.answer_block),
    ):
        allowed = 1 if complete else 0
        n += max(parsed.counts.get(op, 0) - allowed, 0)
        n += max(parsed.counts.get(cl, 0) - allowed, 0)
    return n


def format_reward(parsed: ParsedResponse) -> float:
    r = 0.0
    if parsed.reasoning_block:
        r += BLOCK_REWARD
    if parsed.answer_block:
        r += BLOCK_REWARD
    if parsed.order_ok:
        r += ORDER_REWARD
    return r - SUPERFLUOUS_PENALTY * superfluous_tags(parsed)


def classification_reward(parsed: ParsedResponse, gold: str) -> float:
    return CORRECT_REWARD if parsed.label is not None and parsed.label == normalize(gold) else 0.0


def total_reward(ctx: RewardContext) -> RewardBreakdown:
    f = format_reward(ctx.parsed)
    c = classification_reward(ctx.parsed, ctx.gold)
    return RewardBreakdown(format=f, classification=c, total=f + c)


def score_tokens(tokens: Sequence[int], gold: str, vocab: Vocab) -> RewardBreakdown:
    return total_reward(RewardContext(gold, parse_response(tokens, vocab)))


def _record_tokens(rec: dict, vocab: Vocab) -> list[int]:
    if "response" in rec:
        toks = rec["response"]
        if not isinstance(toks, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in toks):
            raise UsageError("'response' must be a list of token ids")
        for t in toks:
            vocab.word(t)
        return toks
    if "response_text" in rec:
        return vocab.encode(str(rec["response_text"]))
    raise UsageError("record needs 'response' (token ids) or 'response_text'")


def score_records(records: Iterable[dict], vocab: Vocab) -> Iterator[dict]:
    """Score ``{response | response_text, gold[, id]}`` records.

    The optional ``id`` is passed through so outputs can be joined back.
    """
    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or "gold" not in rec:
            raise UsageError(f"record {i}: expected an object with a 'gold' field")
        try:
            toks = _record_tokens(rec, vocab)
        except VocabularyError as e:
            raise UsageError(f"record {i}: {e}") from None
        out = score_tokens(toks, rec["gold"], vocab).to_dict()
        if "id" in rec:
            out = {"id": rec["id"], **out}
        yield out


def score_jsonl(src: str | Path, dst: str | Path, vocab: Vocab) -> int:
    """Batch-score a JSONL file; returns the number of records written."""
    records = []
    with open(src) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise UsageError(f"{src}:{lineno}: invalid JSON ({e.msg})") from None
    n = 0
    with open(dst, "w") as out:
        for row in score_records(records, vocab):
            out.write(json.dumps(row, sort_keys=True) + "\n")
            n += 1
    return n
