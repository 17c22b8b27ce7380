import json
import random

import pytest

from docqa.docmodel import AnswerType, Dataset, QAPair, Scale
from docqa.evaluation import (UnknownUid, bag_f1, evaluate, exact_match, normalize_text, numeracy_f1,
                              span_set_f1)
from docqa.inference import Answer, apply_scale
from oracles import brute_force_alignment_f1


def gold(answer, answer_type=AnswerType.ARITHMETIC, scale=Scale.NONE, uid="q"):
    derivation = "0" if answer_type is AnswerType.ARITHMETIC else None
    return QAPair(uid, "d", "?", answer, answer_type, scale, derivation)


def pred(value, scale=Scale.NONE, answer_type=AnswerType.ARITHMETIC):
    return Answer(answer_type, value, scale, apply_scale(value, scale)[0])


class TestNormalize:
    def test_articles_and_punctuation(self):
        assert normalize_text("The Wireless segment.") == ["wireless", "segment"]

    def test_gold_span(self):
        assert normalize_text("using valuation techniques") == ["using", "valuation", "techniques"]

    def test_empty(self):
        assert normalize_text("") == []


class TestExactMatch:
    def test_fig1(self):
        assert exact_match(pred(3051, Scale.MILLIONS), gold(3051, scale=Scale.MILLIONS)) == 1

    def test_sign_matters(self):
        assert exact_match(pred(8346), gold(-8346)) == 0
        assert numeracy_f1(pred(8346), gold(-8346)) == 0

    def test_scale_matters(self):
        g = gold(298, scale=Scale.MILLIONS)
        assert exact_match(pred(298, Scale.THOUSANDS), g) == 0
        assert numeracy_f1(pred(298, Scale.THOUSANDS), g) == 0
        assert exact_match(pred(298000, Scale.THOUSANDS), g) == 1

    def test_rounding_to_four_decimals(self):
        g = gold(57.29452, scale=Scale.PERCENT)
        assert exact_match(pred(57.294521, Scale.PERCENT), g) == 1
        assert exact_match(pred(57.3, Scale.PERCENT), g) == 0

    def test_offset_span(self):
        g = gold(("using valuation techniques",), AnswerType.SPAN)
        p = pred(("using valuation",), answer_type=AnswerType.SPAN)
        assert exact_match(p, g) == 0

    def test_multi_span_is_unordered(self):
        g = gold(("PSG", "ASG", "ISG"), AnswerType.SPANS)
        assert exact_match(pred(("isg", "PSG.", "ASG"), answer_type=AnswerType.SPANS), g) == 1
        assert exact_match(pred(("ISG", "PSG"), answer_type=AnswerType.SPANS), g) == 0

    def test_missing_prediction(self):
        assert exact_match(None, gold(1)) == 0 and numeracy_f1(None, gold(1)) == 0


class TestF1:
    def test_offset_error_value(self):
        # P = 2/2, R = 2/3 -> 2PR/(P+R) = 0.8
        g = gold(("using valuation techniques",), AnswerType.SPAN)
        assert numeracy_f1(pred(("using valuation",), answer_type=AnswerType.SPAN), g) == pytest.approx(0.8, abs=1e-9)

    def test_numeric_exact(self):
        assert numeracy_f1(pred(-8346), gold(-8346)) == 1.0

    def test_failed_segment(self):
        # one predicted span aligned to one of three gold spans; the oracle enumerates every matching
        g = gold(("PSG", "ASG", "ISG"), AnswerType.SPANS)
        p = pred(("PSG, ASG and ISG. The",), answer_type=AnswerType.SPANS)
        expected = brute_force_alignment_f1(["PSG, ASG and ISG. The"], ["PSG", "ASG", "ISG"], bag_f1)
        assert expected == pytest.approx(0.4 / 3, abs=1e-12)
        assert numeracy_f1(p, g) == pytest.approx(expected, abs=1e-12)

    def test_symmetry(self):
        rng = random.Random(1)
        words = "alpha beta gamma delta the a psg asg".split()
        for _ in range(200):
            a = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(rng.randint(1, 4))]
            b = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(rng.randint(1, 4))]
            assert span_set_f1(a, b) == pytest.approx(span_set_f1(b, a), abs=1e-12)

    def test_em_implies_f1(self):
        g = gold(("alpha beta", "gamma"), AnswerType.SPANS)
        p = pred(("gamma", "Alpha beta"), answer_type=AnswerType.SPANS)
        assert exact_match(p, g) == 1 and numeracy_f1(p, g) == 1.0


def test_alignment_matches_brute_force():
    rng = random.Random(4)
    words = "revenue cost wireless psg asg isg segment the of and".split()
    for _ in range(300):
        a = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(rng.randint(1, 6))]
        b = [" ".join(rng.choices(words, k=rng.randint(1, 4))) for _ in range(rng.randint(1, 6))]
        assert span_set_f1(a, b) == pytest.approx(brute_force_alignment_f1(a, b, bag_f1), abs=1e-12)


def _dataset():
    qas = [
        QAPair("s", "d", "?", ("net sales",), AnswerType.SPAN),
        QAPair("m", "d", "?", ("PSG", "ASG"), AnswerType.SPANS),
        QAPair("c", "d", "?", 3, AnswerType.COUNTING),
        QAPair("a", "d", "?", 3051, AnswerType.ARITHMETIC, Scale.MILLIONS, "1,320 + 1,731"),
    ]
    return Dataset("test", {}, qas)


def _write(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path


def test_evaluate_perfect(tmp_path):
    ds = _dataset()
    preds = _write(tmp_path / "p.jsonl", [
        {"uid": "s", "answer": ["net sales"], "scale": "", "answer_type": "span", "score": 0},
        {"uid": "m", "answer": ["ASG", "PSG"], "scale": "", "answer_type": "multi-span", "score": 0},
        {"uid": "c", "answer": 3, "scale": "", "answer_type": "count", "score": 0},
        {"uid": "a", "answer": 3051, "scale": "million", "answer_type": "arithmetic", "score": 0},
    ])
    report = evaluate(ds, preds)
    assert report.em == 100 and report.f1 == 100
    assert all(row["em"] == 100 and row["f1"] == 100 for row in report.by_type.values())


def test_evaluate_empty(tmp_path):
    report = evaluate(_dataset(), _write(tmp_path / "p.jsonl", []))
    assert report.em == 0 and report.f1 == 0 and report.counts["missing"] == 4


def test_evaluate_hand_computed(tmp_path):
    preds = _write(tmp_path / "p.jsonl", [
        {"uid": "s", "answer": ["net"], "scale": "", "answer_type": "span", "score": 0},  # F1 2/3
        {"uid": "m", "answer": ["PSG"], "scale": "", "answer_type": "multi-span", "score": 0},  # F1 1/2
        {"uid": "c", "answer": 3, "scale": "", "answer_type": "count", "score": 0},  # 1
        {"uid": "a", "answer": 3051, "scale": "thousand", "answer_type": "arithmetic", "score": 0},  # 0
    ])
    report = evaluate(_dataset(), preds)
    assert report.em == pytest.approx(25.0)
    assert report.f1 == pytest.approx(100 * (2 / 3 + 1 / 2 + 1 + 0) / 4)
    assert report.by_type["span"]["f1"] == pytest.approx(200 / 3)
    assert report.by_type["multi-span"]["f1"] == pytest.approx(50)
    assert report.by_type["count"]["em"] == 100
    assert report.by_type["arithmetic"]["em"] == 0
    assert sum(r["count"] for r in report.by_type.values()) == report.counts["total"] == 4
    # macro average
    assert report.f1 * 4 == pytest.approx(100 * (2 / 3 + 1 / 2 + 1), abs=1e-9)


def test_error_records_count_as_missing(tmp_path):
    preds = _write(tmp_path / "p.jsonl", [{"uid": "s", "error": "BudgetTooSmall: ..."}])
    assert evaluate(_dataset(), preds).counts["missing"] == 4


def test_unknown_uid(tmp_path):
    preds = _write(tmp_path / "p.jsonl", [{"uid": "zzz", "answer": 1, "scale": "", "answer_type": "count"}])
    with pytest.raises(UnknownUid):
        evaluate(_dataset(), preds)
