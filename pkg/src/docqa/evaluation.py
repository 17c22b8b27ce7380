"""Exact match and numeracy-focused F1."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .docmodel import ANSWER_TYPES, AnswerType, Dataset, QAPair
from .inference import Answer
from .preprocess import parse_number

ARTICLES = {"a", "an", "the"}
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")


class UnknownUid(KeyError):
    pass


def normalize_text(s: str) -> list[str]:
    """Lowercase, drop punctuation and articles, split on whitespace."""
    return [t for t in _PUNCT.sub("", s.lower()).split() if t not in ARTICLES]


def bag_f1(pred: str, gold: str) -> float:
    p, g = Counter(normalize_text(pred)), Counter(normalize_text(gold))
    if not p or not g:
        return float(p == g)
    common = sum((p & g).values())
    if common == 0:
        return 0.0
    precision = common / sum(p.values())
    recall = common / sum(g.values())
    return 2 * precision * recall / (precision + recall)


def _round(x: float) -> float:
    return round(float(x), 4)


def _as_strings(value) -> list[str]:
    if isinstance(value, tuple):
        return list(value)
    return [str(int(value)) if float(value) == int(value) else repr(float(value))]


def _pred_canonical(pred: Answer) -> Optional[float]:
    if pred.is_numeric:
        return pred.value * pred.scale.factor
    if len(pred.value) == 1:
        v = parse_number(pred.value[0].replace(" ", ""))
        if v is not None:
            return v * pred.scale.factor
    return None


def _numeric_match(pred: Answer, gold: QAPair) -> bool:
    value = _pred_canonical(pred)
    return value is not None and _round(value) == _round(gold.gold_answer * gold.scale.factor)


def exact_match(pred: Optional[Answer], gold: QAPair) -> int:
    if pred is None:
        return 0
    if gold.is_numeric:
        return int(_numeric_match(pred, gold))
    norm = lambda spans: Counter(" ".join(normalize_text(s)) for s in spans)
    return int(norm(_as_strings(pred.value)) == norm(gold.gold_answer))


def span_set_f1(pred: list[str], gold: list[str]) -> float:
    """Best one-to-one alignment of predicted to gold spans, averaged over the larger set."""
    if not pred or not gold:
        return float(not pred and not gold)
    scores = np.array([[bag_f1(p, g) for g in gold] for p in pred])
    rows, cols = linear_sum_assignment(scores, maximize=True)
    return float(scores[rows, cols].sum()) / max(len(pred), len(gold))


def numeracy_f1(pred: Optional[Answer], gold: QAPair) -> float:
    if pred is None:
        return 0.0
    if gold.is_numeric:
        return float(_numeric_match(pred, gold))
    return span_set_f1(_as_strings(pred.value), list(gold.gold_answer))


@dataclass
class EvalReport:
    em: float
    f1: float
    by_type: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        r = lambda x: round(x, 6)
        by_type = {k: {"count": v["count"], "em": r(v["em"]), "f1": r(v["f1"])} for k, v in self.by_type.items()}
        return {"overall": {"em": r(self.em), "f1": r(self.f1)}, "by_type": by_type, "counts": self.counts}

    def table(self) -> str:
        lines = [f"{'answer type':<12} {'count':>6} {'EM':>7} {'F1':>7}"]
        for name, row in self.by_type.items():
            lines.append(f"{name:<12} {row['count']:>6} {row['em']:>7.2f} {row['f1']:>7.2f}")
        lines.append(f"{'overall':<12} {self.counts['total']:>6} {self.em:>7.2f} {self.f1:>7.2f}")
        lines.append(f"missing: {self.counts['missing']}  degraded: {self.counts['degraded']}")
        return "\n".join(lines)


def read_predictions(path) -> dict[str, Optional[Answer]]:
    """uid -> Answer (None for records that carry an error)."""
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out[raw["uid"]] = None if "error" in raw else Answer.from_json(raw)
    return out


def evaluate(gold: Dataset, predictions: Union[str, Path, dict]) -> EvalReport:
    preds = predictions if isinstance(predictions, dict) else read_predictions(predictions)
    known = {qa.qa_uid for qa in gold.qa_pairs}
    for uid in preds:
        if uid not in known:
            raise UnknownUid(uid)
    rows = {t: [] for t in ANSWER_TYPES}
    missing = degraded = 0
    for qa in gold.qa_pairs:
        pred = preds.get(qa.qa_uid)
        if pred is None:
            missing += 1
        elif pred.degraded:
            degraded += 1
        rows[qa.answer_type].append((exact_match(pred, qa), numeracy_f1(pred, qa)))
    everything = [r for rs in rows.values() for r in rs]

    def mean(xs):
        return 100.0 * sum(xs) / len(xs) if xs else 0.0

    by_type = {t.value: {"count": len(rs), "em": mean([e for e, _ in rs]), "f1": mean([f for _, f in rs])}
               for t, rs in rows.items()}
    counts = {"total": len(everything), "missing": missing, "degraded": degraded,
              **{t.value: len(rs) for t, rs in rows.items()}}
    return EvalReport(mean([e for e, _ in everything]), mean([f for _, f in everything]), by_type, counts)
