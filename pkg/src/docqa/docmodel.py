"""Documents, QA pairs and the dataset JSON format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

GRID = 1000


class MalformedInput(ValueError):
    """Raised when a dataset file violates the schema."""

    def __init__(self, message: str, record: Optional[str] = None):
        self.record = record
        super().__init__(f"{record}: {message}" if record else message)


class DanglingReference(MalformedInput):
    pass


class AnswerType(Enum):
    SPAN = "span"
    SPANS = "multi-span"
    COUNTING = "count"
    ARITHMETIC = "arithmetic"

    @property
    def index(self) -> int:
        return ANSWER_TYPES.index(self)


class Scale(Enum):
    NONE = ""
    THOUSANDS = "thousand"
    MILLIONS = "million"
    BILLIONS = "billion"
    PERCENT = "percent"

    @property
    def index(self) -> int:
        return SCALES.index(self)

    @property
    def factor(self) -> float:
        return SCALE_FACTORS[self]


ANSWER_TYPES = list(AnswerType)
SCALES = list(Scale)
SCALE_FACTORS = {
    Scale.NONE: 1,
    Scale.THOUSANDS: 10**3,
    Scale.MILLIONS: 10**6,
    Scale.BILLIONS: 10**9,
    Scale.PERCENT: 10**-2,
}


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def zero(cls) -> "BoundingBox":
        return cls(0, 0, 0, 0)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def is_valid(self) -> bool:
        return 0 <= self.x0 <= self.x1 <= GRID and 0 <= self.y0 <= self.y1 <= GRID

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def union(cls, boxes) -> "BoundingBox":
        boxes = list(boxes)
        return cls(min(b.x0 for b in boxes), min(b.y0 for b in boxes),
                   max(b.x1 for b in boxes), max(b.y1 for b in boxes))


@dataclass(frozen=True)
class Word:
    text: str
    bbox: BoundingBox


@dataclass(frozen=True)
class TextBlock:
    block_id: int
    words: tuple[Word, ...]
    bbox: BoundingBox
    is_table: bool = False

    @property
    def text(self) -> str:
        return " ".join(w.text for w in self.words)


@dataclass(frozen=True)
class Page:
    page_index: int
    blocks: tuple[TextBlock, ...]
    width: int = GRID
    height: int = GRID
    image_ref: Optional[str] = None

    def block(self, block_id: int) -> TextBlock:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise KeyError(block_id)


@dataclass(frozen=True)
class Document:
    doc_uid: str
    pages: tuple[Page, ...]

    def page(self, index: int) -> Page:
        for p in self.pages:
            if p.page_index == index:
                return p
        raise KeyError(index)

    @property
    def word_count(self) -> int:
        return sum(len(b.words) for p in self.pages for b in p.blocks)


Evidence = tuple[int, int, tuple[int, int]]  # (page_index, block_id, [start, end) word span)
GoldAnswer = Union[float, int, tuple[str, ...]]


@dataclass(frozen=True)
class QAPair:
    qa_uid: str
    doc_uid: str
    question: str
    gold_answer: GoldAnswer
    answer_type: AnswerType
    scale: Scale = Scale.NONE
    derivation: Optional[str] = None
    evidence: Optional[tuple[Evidence, ...]] = None

    @property
    def is_numeric(self) -> bool:
        return not isinstance(self.gold_answer, tuple)


@dataclass
class Dataset:
    split: str
    documents: dict[str, Document] = field(default_factory=dict)
    qa_pairs: list[QAPair] = field(default_factory=list)

    def document_for(self, qa: QAPair) -> Document:
        return self.documents[qa.doc_uid]

    def __len__(self) -> int:
        return len(self.qa_pairs)


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self) -> str:
        return f"{self.field}: {self.rule}"


def validate_document(doc: Document) -> list[Violation]:
    """Check every structural invariant; an empty list means the document is valid."""
    out = []
    if not doc.pages:
        out.append(Violation(f"{doc.doc_uid}.pages", "document needs at least one page"))
    seen_pages = set()
    for page in doc.pages:
        where = f"{doc.doc_uid}.pages[{page.page_index}]"
        if page.page_index < 0:
            out.append(Violation(f"{where}.index", "page index must be >= 0"))
        if page.page_index in seen_pages:
            out.append(Violation(f"{where}.index", "page index not unique"))
        seen_pages.add(page.page_index)
        ids = [b.block_id for b in page.blocks]
        if len(set(ids)) != len(ids):
            out.append(Violation(f"{where}.blocks", "block ids not unique"))
        elif ids and ids != list(range(ids[0], ids[0] + len(ids))):
            out.append(Violation(f"{where}.blocks", "block ids not contiguous in reading order"))
        for block in page.blocks:
            bwhere = f"{where}.blocks[{block.block_id}]"
            if not block.bbox.is_valid():
                out.append(Violation(f"{bwhere}.bbox", "bbox outside the 0-1000 grid or inverted"))
            if not block.words:
                out.append(Violation(f"{bwhere}.words", "block has no words"))
            for i, word in enumerate(block.words):
                wwhere = f"{bwhere}.words[{i}]"
                if not word.text:
                    out.append(Violation(f"{wwhere}.text", "empty word"))
                elif "\n" in word.text:
                    out.append(Violation(f"{wwhere}.text", "word contains a newline"))
                if not word.bbox.is_valid():
                    out.append(Violation(f"{wwhere}.bbox", "bbox outside the 0-1000 grid or inverted"))
                elif not block.bbox.contains(word.bbox):
                    out.append(Violation(f"{wwhere}.bbox", "word bbox not contained in block bbox"))
    return out


def validate_qa(qa: QAPair) -> list[Violation]:
    out = []
    ans = qa.gold_answer
    where = qa.qa_uid
    if qa.answer_type is AnswerType.ARITHMETIC:
        if qa.derivation is None:
            out.append(Violation(f"{where}.derivation", "arithmetic answer needs a derivation"))
        if not qa.is_numeric:
            out.append(Violation(f"{where}.answer", "arithmetic answer must be numeric"))
    elif qa.answer_type is AnswerType.COUNTING:
        if not (qa.is_numeric and float(ans) == int(ans) and ans >= 0):
            out.append(Violation(f"{where}.answer", "count answer must be a non-negative integer"))
    elif qa.answer_type is AnswerType.SPANS:
        if qa.is_numeric or len(ans) < 2:
            out.append(Violation(f"{where}.answer", "multi-span answer needs at least two strings"))
    elif qa.answer_type is AnswerType.SPAN:
        if qa.is_numeric or len(ans) != 1:
            out.append(Violation(f"{where}.answer", "span answer must be a single string"))
    return out


# --- JSON ---------------------------------------------------------------------

def _bbox(raw, record: str) -> BoundingBox:
    if not (isinstance(raw, list) and len(raw) == 4 and all(isinstance(v, int) for v in raw)):
        raise MalformedInput(f"bad bbox {raw!r}", record)
    return BoundingBox(*raw)


def _require(obj: dict, key: str, record: str):
    if not isinstance(obj, dict) or key not in obj:
        raise MalformedInput(f"missing field {key!r}", record)
    return obj[key]


def document_from_json(raw: dict) -> Document:
    uid = _require(raw, "uid", "document")
    pages = []
    for p in _require(raw, "pages", uid):
        blocks = []
        for b in _require(p, "blocks", uid):
            words = tuple(Word(_require(w, "t", uid), _bbox(_require(w, "bbox", uid), uid))
                          for w in _require(b, "words", uid))
            blocks.append(TextBlock(_require(b, "id", uid), words, _bbox(_require(b, "bbox", uid), uid),
                                    bool(b.get("is_table", False))))
        pages.append(Page(_require(p, "index", uid), tuple(blocks), p.get("width", GRID),
                          p.get("height", GRID), p.get("image")))
    return Document(uid, tuple(pages))


def document_to_json(doc: Document) -> dict:
    pages = []
    for p in doc.pages:
        page = {"index": p.page_index, "width": p.width, "height": p.height}
        if p.image_ref is not None:
            page["image"] = p.image_ref
        page["blocks"] = []
        for b in p.blocks:
            block = {"id": b.block_id, "bbox": b.bbox.as_list(),
                     "words": [{"t": w.text, "bbox": w.bbox.as_list()} for w in b.words]}
            if b.is_table:
                block["is_table"] = True
            page["blocks"].append(block)
        pages.append(page)
    return {"uid": doc.doc_uid, "pages": pages}


def qa_from_json(raw: dict) -> QAPair:
    uid = _require(raw, "uid", "qa")
    try:
        answer_type = AnswerType(_require(raw, "answer_type", uid))
        scale = Scale(raw.get("scale", ""))
    except ValueError as exc:
        raise MalformedInput(str(exc), uid) from None
    answer = _require(raw, "answer", uid)
    if isinstance(answer, list):
        if not all(isinstance(a, str) for a in answer):
            raise MalformedInput("answer list must hold strings", uid)
        answer = tuple(answer)
    elif isinstance(answer, bool) or not isinstance(answer, (int, float)) or not math.isfinite(answer):
        raise MalformedInput(f"answer must be a number or a list of strings, got {answer!r}", uid)
    evidence = raw.get("evidence")
    if evidence is not None:
        try:
            evidence = tuple((int(p), int(b), (int(s), int(e))) for p, b, (s, e) in evidence)
        except (TypeError, ValueError):
            raise MalformedInput(f"bad evidence {evidence!r}", uid) from None
    qa = QAPair(uid, _require(raw, "doc_uid", uid), _require(raw, "question", uid), answer,
                answer_type, scale, raw.get("derivation"), evidence)
    problems = validate_qa(qa)
    if problems:
        raise MalformedInput(str(problems[0]), uid)
    return qa


def qa_to_json(qa: QAPair) -> dict:
    out = {"uid": qa.qa_uid, "doc_uid": qa.doc_uid, "question": qa.question,
           "answer": list(qa.gold_answer) if isinstance(qa.gold_answer, tuple) else qa.gold_answer,
           "answer_type": qa.answer_type.value, "scale": qa.scale.value}
    if qa.derivation is not None:
        out["derivation"] = qa.derivation
    if qa.evidence is not None:
        out["evidence"] = [[p, b, [s, e]] for p, b, (s, e) in qa.evidence]
    return out


def dataset_from_json(raw: dict) -> Dataset:
    if not isinstance(raw, dict):
        raise MalformedInput("top level must be an object")
    ds = Dataset(_require(raw, "split", "dataset"))
    for d in _require(raw, "documents", "dataset"):
        doc = document_from_json(d)
        if doc.doc_uid in ds.documents:
            raise MalformedInput("duplicate document uid", doc.doc_uid)
        problems = validate_document(doc)
        if problems:
            raise MalformedInput(str(problems[0]), doc.doc_uid)
        ds.documents[doc.doc_uid] = doc
    for q in _require(raw, "qas", "dataset"):
        qa = qa_from_json(q)
        if qa.doc_uid not in ds.documents:
            raise DanglingReference(f"unknown doc_uid {qa.doc_uid!r}", qa.qa_uid)
        ds.qa_pairs.append(qa)
    return ds


def dataset_to_json(ds: Dataset) -> dict:
    return {"split": ds.split,
            "documents": [document_to_json(d) for d in ds.documents.values()],
            "qas": [qa_to_json(q) for q in ds.qa_pairs]}


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"invalid JSON: {exc}", str(path)) from None
    ds = dataset_from_json(raw)
    # image paths are stored relative to the dataset file
    docs = {}
    for uid, doc in ds.documents.items():
        pages = tuple(
            p if p.image_ref is None or Path(p.image_ref).is_absolute()
            else Page(p.page_index, p.blocks, p.width, p.height, str(path.parent / p.image_ref))
            for p in doc.pages)
        docs[uid] = Document(uid, pages)
    ds.documents = docs
    return ds


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = dataset_to_json(ds)
    for d in raw["documents"]:
        for p in d["pages"]:
            if "image" in p:
                try:
                    p["image"] = str(Path(p["image"]).relative_to(path.parent))
                except ValueError:
                    pass
    path.write_text(json.dumps(raw, ensure_ascii=False, separators=(",", ":")) + "\n", encoding="utf-8")
