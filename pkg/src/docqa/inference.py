"""Answer prediction: route on the answer type, run its strategy, apply the scale."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import torch

from .docmodel import ANSWER_TYPES, SCALES, AnswerType, Dataset, Document, Scale
from .encoder import collate
from .heads import O, best_span, decode_bio, scale_logits, span_log_probs, span_text
from .model import DocQAModel
from .preprocess import InputSequence, assemble_input
from .treegen import DivisionByZero, execute, preorder_json

log = logging.getLogger(__name__)

Value = Union[float, int, tuple[str, ...]]


@dataclass
class Answer:
    answer_type: AnswerType
    value: Value
    scale: Scale
    canonical_value: Optional[float] = None
    score: float = 0.0
    degraded: bool = False
    tree: Optional[list] = None

    @property
    def is_numeric(self) -> bool:
        return not isinstance(self.value, tuple)

    def display(self) -> str:
        return apply_scale(self.value, self.scale)[1]

    def to_json(self, uid: str) -> dict:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        out = {"uid": uid, "answer": value, "scale": self.scale.value,
               "answer_type": self.answer_type.value, "score": round(self.score, 6)}
        if self.degraded:
            out["degraded"] = True
        return out

    @classmethod
    def from_json(cls, raw: dict) -> "Answer":
        value = raw["answer"]
        value = tuple(value) if isinstance(value, list) else value
        scale = Scale(raw.get("scale", ""))
        return cls(AnswerType(raw["answer_type"]), value, scale, apply_scale(value, scale)[0],
                   raw.get("score", 0.0), raw.get("degraded", False))


def apply_scale(value: Value, scale: Scale) -> tuple[Optional[float], str]:
    """Return (canonical numeric value or None, display string)."""
    if isinstance(value, tuple):
        text = ", ".join(value)
        return None, f"{text} {scale.name.lower()}" if scale is not Scale.NONE else text
    canonical = value * scale.factor
    if scale is Scale.PERCENT:
        return canonical, f"{value:g}%"
    return canonical, f"{canonical:,.{0 if canonical == int(canonical) else 4}f}"


def _bio_labels(rows, seq: InputSequence, model: DocQAModel):
    logp = model.heads.bio(rows).log_softmax(-1)
    labels = logp.argmax(-1).tolist()
    mask = seq.document_mask()
    labels = [lab if mask[i] else O for i, lab in enumerate(labels)]
    score = sum(logp[i, lab].item() for i, lab in enumerate(labels) if mask[i])
    return labels, score


def route(model: DocQAModel, rows: torch.Tensor, seq: InputSequence, beam: int = 3,
          count_after_dedup: bool = False) -> Answer:
    """Answer one encoded sequence."""
    heads = model.heads
    cls = rows[seq.cls_index]
    head_logp = heads.answer_type(cls).log_softmax(-1)
    answer_type = ANSWER_TYPES[int(head_logp.argmax())]
    score = head_logp.max().item()
    number_rows = None
    degraded = False
    tree = None

    if answer_type is AnswerType.SPAN:
        mask = torch.tensor(seq.document_mask())
        start, end = span_log_probs(rows, mask, heads)
        i, j, s = best_span(start.tolist(), end.tolist(), mask.tolist(), model.config.max_span_length)
        value = (span_text(seq, i, j),)
        score += s
    else:
        labels, s = _bio_labels(rows, seq, model)
        score += s
        if answer_type is AnswerType.ARITHMETIC:
            tagged = [n for n in seq.number_candidates if labels[n.token_index] != O]
            vocab = model.decoder.build_vocab(rows, tagged)
            mask = torch.tensor(seq.document_mask())
            value = None
            for candidate, tree_score in model.decoder.generate(cls, rows, mask, vocab, beam):
                try:
                    value = execute(candidate)
                except DivisionByZero:
                    continue
                score += tree_score
                tree = preorder_json(candidate)
                break
            if value is None:
                value, degraded = 0, True
            if tagged:
                number_rows = rows[[n.token_index for n in tagged]]
        else:
            spans = decode_bio(labels, seq)
            texts = [span_text(seq, a, b) for a, b in spans]
            unique = tuple(dict.fromkeys(texts))
            if answer_type is AnswerType.SPANS:
                value = unique
            else:
                value = len(unique) if count_after_dedup else len(texts)

    scale_logp = scale_logits(cls, number_rows, answer_type, heads).log_softmax(-1)
    scale = SCALES[int(scale_logp.argmax())]
    score += scale_logp.max().item()
    if degraded:
        scale = Scale.NONE
    canonical, _ = apply_scale(value, scale)
    return Answer(answer_type, value, scale, canonical, score, degraded, tree)


@torch.no_grad()
def predict_sequences(model: DocQAModel, seqs: Sequence[InputSequence], beam: int = 3,
                      batch_size: int = 32) -> list[Answer]:
    was_training = model.training
    model.eval()
    answers = []
    dtype = next(model.parameters()).dtype
    for k in range(0, len(seqs), batch_size):
        chunk = seqs[k:k + batch_size]
        encoded = model.encoder(collate(chunk, dtype=dtype))
        for r, seq in enumerate(chunk):
            answers.append(route(model, encoded[r, :len(seq)], seq, beam))
    model.train(was_training)
    return answers


def answer(doc: Document, question: str, model: DocQAModel, beam: int = 3) -> Answer:
    seq = assemble_input(question, doc, model.vocab, model.config.preprocess)
    return predict_sequences(model, [seq], beam)[0]


def predict_batch(dataset: Dataset, model: DocQAModel, path, beam: int = 3,
                  batch_size: int = 32) -> tuple[list[Optional[Answer]], int]:
    """Write one JSONL prediction per QA (dataset order). Returns the answers
    (None where a record failed) and the number of failed records."""
    seqs, errors = {}, {}
    for qa in dataset.qa_pairs:
        try:
            seqs[qa.qa_uid] = assemble_input(qa.question, dataset.document_for(qa), model.vocab,
                                             model.config.preprocess)
        except Exception as exc:  # per-record isolation
            errors[qa.qa_uid] = f"{type(exc).__name__}: {exc}"
    uids = list(seqs)
    predicted = dict(zip(uids, predict_sequences(model, [seqs[u] for u in uids], beam, batch_size)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    with path.open("w", encoding="utf-8") as fh:
        for qa in dataset.qa_pairs:
            if qa.qa_uid in errors:
                record = {"uid": qa.qa_uid, "error": errors[qa.qa_uid]}
                out.append(None)
            else:
                record = predicted[qa.qa_uid].to_json(qa.qa_uid)
                out.append(predicted[qa.qa_uid])
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    return out, len(errors)
