"""Answer-type, span, BIO tagging and scale heads."""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .docmodel import ANSWER_TYPES, SCALES, AnswerType
from .preprocess import InputSequence

B, I, O = 0, 1, 2
BIO_LABELS = "BIO"
MAX_SPAN_LENGTH = 40


class NoValidSpan(ValueError):
    pass


class FFN(nn.Module):
    """Two-layer feed-forward network with GELU."""

    def __init__(self, inputs: int, hidden: int, outputs: int):
        super().__init__()
        self.fc1 = nn.Linear(inputs, hidden)
        self.fc2 = nn.Linear(hidden, outputs)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Heads(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.answer_type = FFN(hidden, hidden, len(ANSWER_TYPES))
        self.span_start = nn.Linear(hidden, 1)
        self.span_end = nn.Linear(hidden, 1)
        self.bio = FFN(hidden, hidden, 3)
        self.scale_arithmetic = FFN(2 * hidden, hidden, len(SCALES))
        self.scale_other = FFN(hidden, hidden, len(SCALES))


def predict_head(cls_vector, heads: Heads) -> torch.Tensor:
    return heads.answer_type(cls_vector).softmax(-1)


def span_log_probs(rows, doc_mask, heads: Heads):
    """Start and end log-distributions restricted to document positions."""
    start = heads.span_start(rows).squeeze(-1).masked_fill(~doc_mask, float("-inf"))
    end = heads.span_end(rows).squeeze(-1).masked_fill(~doc_mask, float("-inf"))
    return start.log_softmax(-1), end.log_softmax(-1)


def best_span(start_logp: Sequence[float], end_logp: Sequence[float], doc_mask: Sequence[bool],
              max_length: int = MAX_SPAN_LENGTH) -> tuple[int, int, float]:
    """Highest-scoring (start, end) with start <= end < start + max_length,
    both endpoints on document tokens."""
    n = len(start_logp)
    best = None
    for i in range(n):
        if not doc_mask[i]:
            continue
        for j in range(i, min(n, i + max_length)):
            if not doc_mask[j]:
                continue
            score = start_logp[i] + end_logp[j]
            if best is None or score > best[2]:
                best = (i, j, score)
    if best is None:
        raise NoValidSpan("no document token to anchor a span")
    return best


def predict_span(rows, seq: InputSequence, heads: Heads, max_length: int = MAX_SPAN_LENGTH):
    mask = torch.tensor(seq.document_mask())
    start, end = span_log_probs(rows, mask, heads)
    return best_span(start.tolist(), end.tolist(), mask.tolist(), max_length)


def tag_bio(rows, heads: Heads) -> torch.Tensor:
    """Per-position distribution over (B, I, O); only document rows are meaningful."""
    return heads.bio(rows).softmax(-1)


def decode_bio(labels: Sequence[int], seq: InputSequence) -> list[tuple[int, int]]:
    """Turn B/I/O labels into inclusive (start, end) token spans.

    A run starts at B, or at an I that follows O, a non-document token or a
    block change, and extends through following I labels in the same block.
    """
    spans = []
    current = None
    prev_block = None
    for i, label in enumerate(labels):
        block = seq.block_key(i)
        if block is None or label == O:
            if current:
                spans.append(current)
            current, prev_block = None, block
            continue
        if label == B or current is None or block != prev_block:
            if current:
                spans.append(current)
            current = (i, i)
        else:
            current = (current[0], i)
        prev_block = block
    if current:
        spans.append(current)
    return spans


def encode_spans(spans: Sequence[tuple[int, int]], length: int) -> list[int]:
    labels = [O] * length
    for start, end in spans:
        labels[start] = B
        for k in range(start + 1, end + 1):
            labels[k] = I
    return labels


def span_text(seq: InputSequence, start: int, end: int) -> str:
    return " ".join(seq.tokens[k].text for k in range(start, end + 1))


def scale_input(cls_vector, number_rows: Optional[torch.Tensor]):
    """[CLS; mean of tagged-number rows], zeros standing in for an empty set."""
    if number_rows is None or number_rows.shape[0] == 0:
        mean = torch.zeros_like(cls_vector)
    else:
        mean = number_rows.mean(0)
    return torch.cat([cls_vector, mean], -1)


def scale_logits(cls_vector, number_rows, answer_type: AnswerType, heads: Heads):
    if answer_type is AnswerType.ARITHMETIC:
        return heads.scale_arithmetic(scale_input(cls_vector, number_rows))
    return heads.scale_other(cls_vector)


def predict_scale(cls_vector, number_rows, answer_type: AnswerType, heads: Heads) -> torch.Tensor:
    return scale_logits(cls_vector, number_rows, answer_type, heads).softmax(-1)
