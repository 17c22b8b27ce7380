"""Synthetic financial-report pages with question/answer pairs.

Each page carries a title, one row/column-aligned table of yearly figures and
several paragraphs of filler text that embed the facts the questions ask
about. Everything is drawn from a single seeded stream, so a config fully
determines the output.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

from .docmodel import (AnswerType, BoundingBox, Dataset, Document, Page, QAPair, Scale, TextBlock,
                       Word, save_dataset)
from .preprocess import format_number
from .treegen import execute, parse_derivation

LINE_ITEMS = [
    "Revenue", "Cost of revenue", "Gross profit", "Operating expenses", "Research and development",
    "Selling and marketing", "General and administrative", "Operating income", "Interest expense",
    "Income tax expense", "Net income", "Depreciation", "Amortization", "Inventories",
    "Raw materials", "Finished goods", "Accounts receivable", "Accounts payable", "Deferred revenue",
    "Short term investments", "Cash and cash equivalents", "Goodwill", "Total assets",
    "Total liabilities", "Capital expenditure", "Term loans", "Lease commitments", "Dividends paid",
    "Share based compensation", "Restructuring charges", "Accrued liabilities", "Other income",
]
TOPICS = [
    "financial instruments", "pension obligations", "derivative contracts", "intangible assets",
    "customer relationships", "trade receivables", "contingent consideration", "lease liabilities",
    "equity investments", "warranty provisions", "deferred tax assets", "goodwill impairment",
    "hedging reserves", "stock options", "convertible notes", "retirement benefits",
    "asset retirement obligations", "marketable securities", "royalty agreements", "credit facilities",
]
PHRASES = [
    "valuation techniques", "quoted market prices", "discounted cash flow models",
    "independent actuarial reports", "observable market inputs", "the Black Scholes model",
    "internal credit ratings", "comparable company multiples", "historical loss experience",
    "management estimates and assumptions", "broker quotes", "the effective interest method",
    "probability weighted scenarios", "recent transaction prices", "net asset values",
]
REASONS = [
    "higher demand", "growth in Imaging and Automotive", "favorable currency movements",
    "new product launches", "lower input costs", "improved pricing", "acquisitions in Europe",
    "stronger service sales", "reduced headcount", "a one time tax benefit",
]
GROUPS = [
    "operating segments", "reportable segments", "product lines", "business units",
    "geographic regions", "distribution channels", "customer groups", "brand families",
]
FILLER = [
    "The company", "management", "our results", "the board", "during the year", "in addition",
    "as a result", "compared with the prior year", "we continued to", "invest", "in", "our", "the",
    "operations", "market", "conditions", "remained", "challenging", "customers", "demand", "and",
    "capital", "allocation", "strategy", "focused", "on", "long term", "value", "creation", "for",
    "shareholders", "risk", "factors", "include", "competition", "regulation", "supply", "chain",
    "costs", "margins", "improved", "across", "several", "regions", "while", "expenses", "were",
    "managed", "carefully", "to", "support", "growth", "cash", "flow", "from", "activities",
    "increased", "liquidity", "position", "is", "strong", "with", "no", "significant", "debt",
    "maturities", "expected", "next", "fiscal", "year", "we", "believe", "that", "our",
]

TYPE_KEYS = {"span": AnswerType.SPAN, "multi-span": AnswerType.SPANS, "count": AnswerType.COUNTING,
             "arithmetic": AnswerType.ARITHMETIC}
UNIT_TEXT = {Scale.NONE: "Item", Scale.THOUSANDS: "$ in thousands", Scale.MILLIONS: "$ in millions",
             Scale.BILLIONS: "$ in billions"}

CHAR_W = 6
LINE_H = 12
WORD_H = 9
LEFT, RIGHT = 60, 940


@dataclass
class GeneratorConfig:
    seed: int = 7
    documents: int = 100
    qas_per_document: int = 6
    multi_page_prob: float = 0.1
    words_per_page: int = 495
    type_mix: dict = field(default_factory=lambda: {
        "span": 0.43, "multi-span": 0.13, "count": 0.02, "arithmetic": 0.42})
    scale_mix: dict = field(default_factory=lambda: {
        "": 0.1, "thousand": 0.45, "million": 0.4, "billion": 0.05})
    splits: dict = field(default_factory=lambda: {"train": 0.8, "dev": 0.1, "test": 0.1})
    ascending_years_prob: float = 0.2
    render_images: bool = False
    page_pixels: tuple = (612, 792)

    def __post_init__(self):
        for name in ("type_mix", "scale_mix", "splits"):
            mix = getattr(self, name)
            if abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1, got {sum(mix.values())}")
        unknown = set(self.type_mix) - set(TYPE_KEYS)
        if unknown:
            raise ValueError(f"unknown answer types {sorted(unknown)}")
        if self.documents < 1 or self.qas_per_document < 1:
            raise ValueError("documents and qas_per_document must be >= 1")


@dataclass
class Manifest:
    config: dict
    table_blocks: dict = field(default_factory=dict)  # doc_uid -> {page_index: [block ids]}
    qas: dict = field(default_factory=dict)  # qa_uid -> template and sampled values
    splits: dict = field(default_factory=dict)  # split -> {"documents": n, "qas": n}

    def to_json(self) -> dict:
        return asdict(self)


# --- layout helpers ----------------------------------------------------------------

def _word_box(text: str, x: int, y: int) -> BoundingBox:
    return BoundingBox(x, y, min(RIGHT, x + CHAR_W * len(text)), y + WORD_H)


class _PageBuilder:
    def __init__(self, index: int):
        self.index = index
        self.blocks: list[TextBlock] = []
        self.y = 40
        self.table_ids: list[int] = []

    def add_block(self, words: list[Word]) -> int:
        bid = len(self.blocks)
        self.blocks.append(TextBlock(bid, tuple(words), BoundingBox.union(w.bbox for w in words)))
        return bid

    def paragraph(self, tokens: list[str]) -> tuple[int, list[Word]]:
        words, x = [], LEFT
        y = self.y
        for t in tokens:
            w = CHAR_W * len(t)
            if x + w > RIGHT and x > LEFT:
                x, y = LEFT, y + LINE_H
                if y + WORD_H > 995:
                    break
            words.append(Word(t, _word_box(t, x, y)))
            x += w + CHAR_W
        self.y = y + LINE_H + 10
        return self.add_block(words), words

    def room(self) -> int:
        return 990 - self.y


def _cell(text: str, x0: int, x1: int, y: int, right: bool) -> list[Word]:
    parts = text.split()
    width = CHAR_W * len(text)
    x = x1 - width if right else x0
    words = []
    for p in parts:
        words.append(Word(p, _word_box(p, x, y)))
        x += CHAR_W * (len(p) + 1)
    return words


# --- generator ---------------------------------------------------------------------------

class _DocBuilder:
    def __init__(self, rng: random.Random, config: GeneratorConfig, uid: str):
        self.rng = rng
        self.config = config
        self.uid = uid
        self.pages: list[_PageBuilder] = []
        self.facts: list[dict] = []  # phrase/reason facts
        self.enums: list[dict] = []
        self.tables: list[dict] = []

    # values: 3-5 digit integers, away from years and from the decoder constants
    def _value(self, used: set) -> int:
        while True:
            v = self.rng.choice([self.rng.randint(101, 999), self.rng.randint(1000, 99999),
                                 self.rng.randint(1000, 99999)])
            if not 1900 <= v <= 2100 and v not in used:
                used.add(v)
                return -v if self.rng.random() < 0.08 else v

    def build_table(self, page: _PageBuilder, scale: Scale):
        rng = self.rng
        n_years = rng.choice([2, 2, 3])
        last = rng.randint(2018, 2021)
        years = [last - k for k in range(n_years)]
        if rng.random() < self.config.ascending_years_prob:
            years.reverse()
        labels = rng.sample(LINE_ITEMS, rng.randint(4, 7))
        used: set = set()
        values = {(lab, y): self._value(used) for lab in labels for y in years}
        col_x1 = [560 + 140 * k for k in range(n_years)]
        row_h = 16
        y = page.y
        cells = {}
        bid = page.add_block(_cell(UNIT_TEXT[scale], LEFT, 420, y, False))
        page.table_ids.append(bid)
        for k, yr in enumerate(years):
            bid = page.add_block(_cell(str(yr), col_x1[k] - 100, col_x1[k], y, True))
            page.table_ids.append(bid)
        for r, lab in enumerate(labels):
            y += row_h
            bid = page.add_block(_cell(lab, LEFT, 420, y, False))
            page.table_ids.append(bid)
            for k, yr in enumerate(years):
                text = format_number(values[(lab, yr)])
                bid = page.add_block(_cell(text, col_x1[k] - 100, col_x1[k], y, True))
                page.table_ids.append(bid)
                cells[(lab, yr)] = (page.index, bid, text)
        page.y = y + row_h + 14
        self.tables.append({"scale": scale, "years": years, "labels": labels, "values": values,
                            "cells": cells, "page": page.index})

    def _filler(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            sentence = [w for phrase in self.rng.sample(FILLER, self.rng.randint(5, 9)) for w in phrase.split()]
            if self.rng.random() < 0.3:
                sentence += ["by", f"{self.rng.randint(1, 40)}.{self.rng.randint(0, 9)}%"]
            if self.rng.random() < 0.3:
                sentence += ["in", str(self.rng.randint(2015, 2021))]
            sentence[0] = sentence[0].capitalize()
            sentence[-1] += "."
            out += sentence
        return out[:n]

    def fact_paragraph(self, page: _PageBuilder, n_words: int, kind: str):
        rng = self.rng
        lead = self._filler(rng.randint(0, 12))
        if kind == "phrase":
            topic = rng.choice([t for t in TOPICS if t not in {f["topic"] for f in self.facts}])
            answer = rng.choice(PHRASES)
            head = f"The fair value of {topic} is determined using".split()
            fact = {"kind": kind, "topic": topic, "answer": answer,
                    "question": f"How is the fair value of {topic} determined?"}
        elif kind == "reason":
            topic = rng.choice([t for t in LINE_ITEMS if t not in {f["topic"] for f in self.facts}])
            year = rng.randint(2018, 2021)
            answer = rng.choice(REASONS)
            head = f"{topic} changed in {year} mainly due to".split()
            fact = {"kind": kind, "topic": topic, "answer": answer,
                    "question": f"Why did {topic.lower()} change in {year}?"}
        else:
            group = rng.choice([g for g in GROUPS if g not in {e["group"] for e in self.enums}])
            items = self._items(rng.randint(2, 5))
            head = f"The {group} of the company are".split()
            body = []
            for k, item in enumerate(items):
                if k == len(items) - 1 and k > 0:
                    body += ["and"]
                body.append(item + ("," if k < len(items) - 2 else ""))
            body[-1] += "."
            tokens = lead + head + body
            tokens += self._filler(max(0, n_words - len(tokens)))
            bid, words = page.paragraph(tokens)
            start = len(lead) + len(head)
            evidence, k = [], start
            for item in items:
                while words[k].text.rstrip(",.") != item:
                    k += 1
                evidence.append((page.index, bid, (k, k + 1)))
                k += 1
            self.enums.append({"group": group, "items": items, "evidence": evidence})
            return
        answer_words = answer.split()
        answer_words[-1] += "."
        tokens = lead + head + answer_words
        tokens += self._filler(max(0, n_words - len(tokens)))
        bid, _ = page.paragraph(tokens)
        start = len(lead) + len(head)
        fact["evidence"] = [(page.index, bid, (start, start + len(answer_words)))]
        self.facts.append(fact)

    def _items(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            item = "".join(self.rng.choice("ABCDEFGHJKLMNPRSTUVW") for _ in range(3))
            if item not in out:
                out.append(item)
        return out

    def build(self, n_pages: int) -> Document:
        rng = self.rng
        scale = Scale(_choose(rng, self.config.scale_mix))
        for p in range(n_pages):
            page = _PageBuilder(p)
            self.pages.append(page)
            title = f"Annual report {rng.randint(2018, 2021)} page {p + 1}".split()
            page.paragraph(title)
            if p == 0 or rng.random() < 0.5:
                self.build_table(page, scale)
            budget = self.config.words_per_page - sum(len(b.words) for b in page.blocks)
            n_par = rng.randint(3 if p == 0 else 2, 6)
            kinds = ["phrase", "reason", "enum"] if p == 0 else []
            kinds += [rng.choice(["phrase", "reason", "enum", "plain"]) for _ in range(n_par - len(kinds))]
            rng.shuffle(kinds)
            for k, kind in enumerate(kinds):
                n_words = max(12, budget // (len(kinds) - k))
                max_words = (page.room() // (LINE_H + 2)) * 18 // max(1, len(kinds) - k)
                n_words = max(12, min(n_words, max_words))
                before = sum(len(b.words) for b in page.blocks)
                if kind == "plain":
                    page.paragraph(self._filler(n_words))
                else:
                    self.fact_paragraph(page, n_words, kind)
                budget -= sum(len(b.words) for b in page.blocks) - before
        pages = tuple(Page(pb.index, tuple(pb.blocks), *self.config.page_pixels) for pb in self.pages)
        return Document(self.uid, pages)


def _choose(rng: random.Random, mix: dict) -> str:
    keys = list(mix)
    return rng.choices(keys, weights=[mix[k] for k in keys])[0]


def _num(v: float) -> str:
    s = format_number(v, accounting=False)
    return f"({s})" if v < 0 else s


def _make_qa(rng: random.Random, doc: _DocBuilder, uid: str, answer_type: AnswerType):
    """Return (QAPair fields, template id, sampled values)."""
    table = rng.choice(doc.tables)
    years, labels, values, cells = table["years"], table["labels"], table["values"], table["cells"]
    scale = table["scale"]
    chrono = sorted(years)

    def ev(lab, yr):
        page, bid, _ = cells[(lab, yr)]
        return (page, bid, (0, 1))

    if answer_type is AnswerType.SPAN:
        if rng.random() < 0.5:
            lab, yr = rng.choice(labels), rng.choice(years)
            return (f"What was the {lab.lower()} in {yr}?", (cells[(lab, yr)][2],), scale, None,
                    [ev(lab, yr)], "span-cell", {"label": lab, "year": yr})
        fact = rng.choice(doc.facts)
        return (fact["question"], (fact["answer"],), Scale.NONE, None, fact["evidence"],
                f"span-{fact['kind']}", {"topic": fact["topic"]})
    if answer_type is AnswerType.SPANS:
        if rng.random() < 0.5 and doc.enums:
            e = rng.choice(doc.enums)
            return (f"What are the {e['group']} of the company?", tuple(e["items"]), Scale.NONE, None,
                    e["evidence"], "spans-enum", {"group": e["group"]})
        lab = rng.choice(labels)
        y1, y2 = sorted(rng.sample(years, 2), key=years.index)
        return (f"What were the {lab.lower()} values in {y1} and {y2}?",
                (cells[(lab, y1)][2], cells[(lab, y2)][2]), scale, None, [ev(lab, y1), ev(lab, y2)],
                "spans-cells", {"label": lab, "years": [y1, y2]})
    if answer_type is AnswerType.COUNTING:
        e = rng.choice(doc.enums)
        return (f"How many {e['group']} does the company have?", len(e["items"]), Scale.NONE,
                None, e["evidence"], "count-enum", {"group": e["group"]})

    template = rng.choice(["change", "sum-years", "sum-rows", "percent"])
    if template == "sum-rows":
        la, lb = rng.sample(labels, 2)
        yr = rng.choice(years)
        a, b = values[(la, yr)], values[(lb, yr)]
        question = f"What was the total of {la.lower()} and {lb.lower()} in {yr}?"
        derivation, evidence = f"{_num(a)} + {_num(b)}", [ev(la, yr), ev(lb, yr)]
        sampled = {"labels": [la, lb], "year": yr, "values": [a, b]}
    else:
        lab = rng.choice(labels)
        old, new = sorted(rng.sample(chrono, 2))
        a, b = values[(lab, new)], values[(lab, old)]
        evidence = [ev(lab, new), ev(lab, old)]
        sampled = {"label": lab, "years": [old, new], "values": [a, b]}
        if template == "change":
            question = f"What was the change in {lab.lower()} between {old} and {new}?"
            derivation = f"{_num(a)} - {_num(b)}"
        elif template == "sum-years":
            question = f"What was the total {lab.lower()} in {old} and {new}?"
            derivation = f"{_num(a)} + {_num(b)}"
        else:
            question = f"What was the percentage change in {lab.lower()} between {old} and {new}?"
            derivation = f"({_num(a)} - {_num(b)}) / {_num(b)} * 100"
            scale = Scale.PERCENT
    value = execute(parse_derivation(derivation))
    if value == int(value):
        value = int(value)
    return question, value, scale, derivation, evidence, f"arithmetic-{template}", sampled


def generate(config: GeneratorConfig, out_dir=None) -> tuple[dict[str, Dataset], Manifest]:
    """Generate every split. With ``out_dir`` the splits, the manifest and
    (if enabled) page images are written there."""
    rng = random.Random(config.seed)
    manifest = Manifest(_config_json(config))
    split_names = list(config.splits)
    # deterministic per-document split assignment by rounding cumulative fractions
    bounds, acc = [], 0.0
    for name in split_names:
        acc += config.splits[name]
        bounds.append(round(acc * config.documents))
    datasets = {name: Dataset(name) for name in split_names}
    for d in range(config.documents):
        split = split_names[next(k for k, b in enumerate(bounds) if d < b)]
        doc_rng = random.Random(rng.getrandbits(64))
        uid = f"doc{d:05d}"
        builder = _DocBuilder(doc_rng, config, uid)
        n_pages = 2 if doc_rng.random() < config.multi_page_prob else 1
        doc = builder.build(n_pages)
        manifest.table_blocks[uid] = {str(p.index): list(p.table_ids) for p in builder.pages}
        for q in range(config.qas_per_document):
            qa_uid = f"{uid}-q{q}"
            answer_type = TYPE_KEYS[_choose(doc_rng, config.type_mix)]
            question, answer, scale, derivation, evidence, template, sampled = _make_qa(
                doc_rng, builder, qa_uid, answer_type)
            qa = QAPair(qa_uid, uid, question, answer, answer_type, scale,
                        derivation if answer_type is AnswerType.ARITHMETIC else None,
                        tuple(evidence))
            datasets[split].qa_pairs.append(qa)
            manifest.qas[qa_uid] = {"template": template, "split": split, "values": sampled}
        if out_dir is not None and config.render_images:
            doc = _with_images(doc, Path(out_dir) / "images")
        datasets[split].documents[uid] = doc
    for name, ds in datasets.items():
        manifest.splits[name] = {"documents": len(ds.documents), "qas": len(ds.qa_pairs)}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, ds in datasets.items():
            save_dataset(ds, out_dir / f"{name}.json")
        (out_dir / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n",
                                               encoding="utf-8")
    return datasets, manifest


def _config_json(config: GeneratorConfig) -> dict:
    raw = asdict(config)
    raw["page_pixels"] = list(config.page_pixels)
    return raw


def _with_images(doc: Document, image_dir: Path) -> Document:
    image_dir.mkdir(parents=True, exist_ok=True)
    pages = []
    for page in doc.pages:
        path = image_dir / f"{doc.doc_uid}_p{page.page_index}.png"
        render_page(page, path)
        pages.append(Page(page.page_index, page.blocks, page.width, page.height, str(path.resolve())))
    return Document(doc.doc_uid, tuple(pages))


def render_page(page: Page, path=None):
    """Rasterise word boxes as dark rectangles on white at the page's pixel size."""
    from PIL import Image, ImageDraw

    img = Image.new("RGB", (page.width, page.height), "white")
    draw = ImageDraw.Draw(img)
    sx, sy = page.width / 1000, page.height / 1000
    for block in page.blocks:
        for w in block.words:
            box = w.bbox
            x0, y0 = round(box.x0 * sx), round(box.y0 * sy)
            x1, y1 = round(box.x1 * sx) - 1, round(box.y1 * sy) - 1
            if x1 >= x0 and y1 >= y0:
                draw.rectangle([x0, y0, x1, y1], fill=(0, 0, 0))
    if path is not None:
        img.save(path, format="PNG")
    return img
