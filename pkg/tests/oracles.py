"""Independent reference implementations used by the tests."""

import ast
import itertools
import math
from collections import Counter
from fractions import Fraction

import numpy as np


def rational_eval(infix: str) -> Fraction:
    """Evaluate an infix derivation exactly via Python's own expression grammar."""
    src = (infix.replace(",", "").replace("−", "-").replace("×", "*").replace("÷", "/"))
    node = ast.parse(src, mode="eval").body

    def ev(n):
        if isinstance(n, ast.Constant):
            return Fraction(str(n.value))
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, ast.USub):
            return -ev(n.operand)
        if isinstance(n, ast.BinOp):
            a, b = ev(n.left), ev(n.right)
            return {ast.Add: a + b, ast.Sub: a - b, ast.Mult: a * b}.get(type(n.op)) if not isinstance(n.op, ast.Div) else a / b
        raise TypeError(ast.dump(n))

    return ev(node)


def brute_force_alignment_f1(pred, gold, pair_f1):
    """Max over every one-to-one partial matching, divided by max(|pred|, |gold|)."""
    if not pred or not gold:
        return float(not pred and not gold)
    small, large = (pred, gold) if len(pred) <= len(gold) else (gold, pred)
    best = 0.0
    for perm in itertools.permutations(range(len(large)), len(small)):
        total = sum(pair_f1(small[i], large[j]) if small is pred else pair_f1(large[j], small[i])
                    for i, j in enumerate(perm))
        best = max(best, total)
    return best / max(len(pred), len(gold))


def tfidf_cosines(question, texts):
    """Dense-matrix TF-IDF cosine with smoothed idf log((1+n)/(1+df)) + 1."""
    import re
    tok = lambda s: re.findall(r"[a-z0-9]+", s.lower())
    vocab = sorted({t for s in texts + [question] for t in tok(s)})
    index = {t: i for i, t in enumerate(vocab)}
    tf = np.zeros((len(texts), len(vocab)))
    for r, s in enumerate(texts):
        for t in tok(s):
            tf[r, index[t]] += 1
    n = len(texts)
    df = (tf > 0).sum(0)
    idf = np.log((1 + n) / (1 + df)) + 1
    q = np.zeros(len(vocab))
    for t in tok(question):
        q[index[t]] += 1
    qv, dv = q * idf, tf * idf
    out = []
    for row in dv:
        denom = np.linalg.norm(qv) * np.linalg.norm(row)
        out.append(float(qv @ row / denom) if denom else 0.0)
    return out
