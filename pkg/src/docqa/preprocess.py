"""Question/document preprocessing.

Turns a question and a document into an :class:`InputSequence`: tables are
found with a row/column alignment heuristic, non-table blocks are ranked by
TF-IDF similarity to the question, and the major-table page is reduced to a
grid of patch statistics that stands in for a visual backbone.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .docmodel import GRID, BoundingBox, Document, Page, TextBlock

PAD, UNK, CLS, SEP, NUM, IMG = range(6)
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[NUM]", "[IMG]"]

IMAGE_SIZE = 224


class BudgetTooSmall(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


class Segment(Enum):
    QUESTION = 0
    TABLE = 1
    TEXT = 2
    VISUAL = 3


@dataclass(frozen=True)
class PreprocessConfig:
    token_budget: int = 512
    patch_grid: int = 7
    row_overlap: float = 0.5
    column_overlap: float = 0.5
    min_rows: int = 2
    min_columns: int = 2
    numeric_density: float = 0.4


# --- numbers ------------------------------------------------------------------

_CURRENCY = "$€£¥"
_NUMBER_RE = re.compile(r"^[-−]?(\d+(\.\d*)?|\.\d+)$")


def parse_number(text: str) -> Optional[float]:
    """Parse a word as a number; ``"(1,320)"`` reads as -1320. Returns None for non-numbers."""
    s = text.strip()
    for ch in _CURRENCY + ", ":
        s = s.replace(ch, "")
    s = s.rstrip(".;:")
    negative = False
    if len(s) >= 2 and s[0] == "(" and s[-1] == ")":
        negative, s = True, s[1:-1]
    s = s.removesuffix("%")
    if len(s) >= 2 and s[0] == "(" and s[-1] == ")":
        negative, s = True, s[1:-1]
    for ch in _CURRENCY:
        s = s.replace(ch, "")
    if not _NUMBER_RE.match(s):
        return None
    value = float(s.replace("−", "-"))
    return -value if negative else value


def format_number(value: float, accounting: bool = True) -> str:
    """Render a number the way financial tables print it (thousands separators,
    negatives in parentheses when ``accounting``)."""
    magnitude = abs(value)
    if magnitude == int(magnitude):
        body = f"{int(magnitude):,}"
    else:
        body = f"{magnitude:,.10f}".rstrip("0").rstrip(".")
    if value < 0:
        return f"({body})" if accounting else f"-{body}"
    return body


# --- vocabulary -----------------------------------------------------------------

def normalize_word(text: str) -> str:
    s = text.lower().strip()
    stripped = re.sub(r"^[^\w$%]+|[^\w%]+$", "", s)
    return stripped or s


_YEAR_RE = re.compile(r"^(19|20)\d\d$")


def _is_year(word: str) -> bool:
    return bool(_YEAR_RE.match(word))


class Vocab:
    """Whole-word vocabulary; numbers outside it map to a shared [NUM] id."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def lookup(self, word: str) -> int:
        key = normalize_word(word)
        idx = self.stoi.get(key)
        if idx is not None:
            return idx
        return NUM if parse_number(word) is not None else UNK

    @classmethod
    def build(cls, texts, min_count: int = 2, max_size: Optional[int] = None) -> "Vocab":
        """Words seen at least ``min_count`` times, most frequent first.

        Numbers are left out (they share [NUM]) except year-like integers,
        which act as column headers and are referred to by questions.
        """
        counts = Counter()
        for text in texts:
            for w in text.split():
                key = normalize_word(w)
                if parse_number(w) is None or _is_year(key):
                    counts[key] += 1
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[:max(0, max_size - len(SPECIALS))]
        return cls(words)

    def to_json(self) -> list[str]:
        return self.itos[len(SPECIALS):]

    @classmethod
    def from_json(cls, words: list[str]) -> "Vocab":
        return cls(words)


def dataset_texts(dataset):
    for doc in dataset.documents.values():
        for page in doc.pages:
            for block in page.blocks:
                yield block.text
    for qa in dataset.qa_pairs:
        yield qa.question


# --- tables ---------------------------------------------------------------------

def _interval_overlap(a0, a1, b0, b1) -> int:
    return min(a1, b1) - max(a0, b0)


def _overlaps(a0, a1, b0, b1, ratio) -> bool:
    overlap = _interval_overlap(a0, a1, b0, b1)
    return overlap > 0 and overlap >= ratio * min(a1 - a0, b1 - b0)


def _components(n: int, linked) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if linked(i, j):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _is_numeric_block(block: TextBlock) -> bool:
    return parse_number("".join(w.text for w in block.words)) is not None


def detect_table_blocks(page: Page, config: PreprocessConfig = PreprocessConfig()) -> set[int]:
    """Return the ids of blocks that form row/column-aligned numeric grids."""
    blocks = list(page.blocks)
    rows = _components(len(blocks), lambda i, j: _overlaps(
        blocks[i].bbox.y0, blocks[i].bbox.y1, blocks[j].bbox.y0, blocks[j].bbox.y1, config.row_overlap))
    rows.sort(key=lambda r: (min(blocks[i].bbox.y0 for i in r), min(r)))

    # consecutive multi-block rows form a candidate group
    groups, current = [], []
    for row in rows:
        if len(row) >= 2:
            current.append(row)
        else:
            if current:
                groups.append(current)
            current = []
    if current:
        groups.append(current)

    flagged = set()
    for group in groups:
        if len(group) < config.min_rows:
            continue
        members = [i for row in group for i in row]
        columns = _components(len(members), lambda a, b: _overlaps(
            blocks[members[a]].bbox.x0, blocks[members[a]].bbox.x1,
            blocks[members[b]].bbox.x0, blocks[members[b]].bbox.x1, config.column_overlap))
        if len(columns) < config.min_columns:
            continue
        numeric = sum(_is_numeric_block(blocks[i]) for i in members)
        if numeric < config.numeric_density * len(members):
            continue
        flagged.update(blocks[i].block_id for i in members)
    return flagged


def flag_tables(doc: Document, config: PreprocessConfig = PreprocessConfig()) -> Document:
    pages = []
    for page in doc.pages:
        ids = detect_table_blocks(page, config)
        blocks = tuple(replace(b, is_table=b.block_id in ids) for b in page.blocks)
        pages.append(replace(page, blocks=blocks))
    return replace(doc, pages=tuple(pages))


def select_major_table_page(doc: Document) -> int:
    best, best_count = 0, 0
    for page in sorted(doc.pages, key=lambda p: p.page_index):
        count = sum(b.is_table for b in page.blocks)
        if count > best_count:
            best, best_count = page.page_index, count
    return best


# --- ranking --------------------------------------------------------------------

_TERM_RE = re.compile(r"[a-z0-9]+")


def terms(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


def rank_texts(question: str, texts: Sequence[str]) -> list[int]:
    """Order ``texts`` by descending TF-IDF cosine similarity to ``question``.

    IDF is smoothed, ``log((1 + n) / (1 + df)) + 1``, over ``texts`` alone.
    Ties keep the input order.
    """
    docs = [Counter(terms(t)) for t in texts]
    n = len(docs)
    df = Counter(term for d in docs for term in d)

    def vector(counts):
        return {t: c * (math.log((1 + n) / (1 + df[t])) + 1.0) for t, c in counts.items()}

    q = vector(Counter(terms(question)))
    q_norm = math.sqrt(sum(v * v for v in q.values()))
    scores = []
    for d in docs:
        v = vector(d)
        norm = math.sqrt(sum(x * x for x in v.values()))
        dot = sum(w * v.get(t, 0.0) for t, w in q.items())
        scores.append(dot / (q_norm * norm) if dot and q_norm and norm else 0.0)
    return sorted(range(n), key=lambda i: (-scores[i], i))


def rank_text_blocks(question: str, blocks: Sequence[TextBlock]) -> list[int]:
    order = rank_texts(question, [b.text for b in blocks])
    return [blocks[i].block_id for i in order]


# --- visual patches ---------------------------------------------------------------

def patch_boxes(grid: int) -> list[BoundingBox]:
    edges = [round(GRID * k / grid) for k in range(grid + 1)]
    return [BoundingBox(edges[c], edges[r], edges[c + 1], edges[r + 1])
            for r in range(grid) for c in range(grid)]


def page_to_patches(image, grid: int = 7) -> np.ndarray:
    """Reduce a page image to ``grid*grid`` rows of (mean R, mean G, mean B, darkness).

    ``image`` may be a path, a PIL image or None (all-zero grid). The image is
    resized to 224x224 first; channel means are scaled to [0, 1] and darkness
    is one minus the mean intensity.
    """
    if image is None:
        return np.zeros((grid * grid, 4))
    from PIL import Image, UnidentifiedImageError

    if not isinstance(image, Image.Image):
        try:
            with Image.open(image) as img:
                img.load()
                image = img.convert("RGB")
        except (OSError, UnidentifiedImageError) as exc:
            raise ImageDecodeError(f"cannot decode {image}: {exc}") from None
    pixels = np.asarray(image.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR),
                        dtype=np.float64) / 255.0
    edges = [round(IMAGE_SIZE * k / grid) for k in range(grid + 1)]
    feats = np.empty((grid * grid, 4))
    for r in range(grid):
        for c in range(grid):
            patch = pixels[edges[r]:edges[r + 1], edges[c]:edges[c + 1]]
            rgb = patch.reshape(-1, 3).mean(axis=0)
            feats[r * grid + c, :3] = rgb
            feats[r * grid + c, 3] = 1.0 - rgb.mean()
    return feats


# --- assembly ---------------------------------------------------------------------

@dataclass(frozen=True)
class Token:
    """One input position.

    ``source`` is (page_index, block_id, word_index) for document words,
    (question_word_index,) for question words, (row, col) for visual patches
    and () for markers.
    """
    id: int
    text: str
    bbox: BoundingBox
    segment: Segment
    source: tuple[int, ...] = ()


@dataclass(frozen=True)
class NumberToken:
    token_index: int
    value: float


@dataclass
class InputSequence:
    tokens: list[Token]
    cls_index: int
    question_range: tuple[int, int]
    table_range: tuple[int, int]
    text_range: tuple[int, int]
    visual_range: tuple[int, int]
    number_candidates: list[NumberToken]
    visual_features: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    image_page: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def document_range(self) -> tuple[int, int]:
        return self.table_range[0], self.text_range[1]

    def is_document(self, i: int) -> bool:
        return (self.table_range[0] <= i < self.table_range[1]
                or self.text_range[0] <= i < self.text_range[1])

    def document_mask(self) -> list[bool]:
        return [self.is_document(i) for i in range(len(self.tokens))]

    def block_key(self, i: int) -> Optional[tuple[int, int]]:
        tok = self.tokens[i]
        return tok.source[:2] if self.is_document(i) else None

    def number_at(self, i: int) -> Optional[NumberToken]:
        for n in self.number_candidates:
            if n.token_index == i:
                return n
        return None


def _block_tokens(page: Page, block: TextBlock, segment: Segment, vocab: Vocab) -> list[Token]:
    return [Token(vocab.lookup(w.text), w.text, w.bbox, segment, (page.page_index, block.block_id, k))
            for k, w in enumerate(block.words)]


def assemble_input(question: str, doc: Document, vocab: Vocab,
                   config: PreprocessConfig = PreprocessConfig(), load_image: bool = True) -> InputSequence:
    """Build ``[CLS] question [SEP] table [SEP] ranked text [SEP] patches``.

    Text blocks are appended in ranked order until the budget is hit; the
    block that crosses the budget keeps its leading words. Tables are only
    cut when they alone exceed what remains after the question, markers and
    patches.
    """
    doc = flag_tables(doc, config)
    budget = config.token_budget
    n_patches = config.patch_grid ** 2
    zero = BoundingBox.zero()
    q_words = question.split()
    reserved = 1 + len(q_words) + 3 + n_patches
    if reserved > budget:
        raise BudgetTooSmall(f"question, markers and patches need {reserved} tokens, budget is {budget}")
    room = budget - reserved

    tokens = [Token(CLS, "[CLS]", zero, Segment.QUESTION)]
    tokens += [Token(vocab.lookup(w), w, zero, Segment.QUESTION, (k,)) for k, w in enumerate(q_words)]
    question_range = (1, len(tokens))
    tokens.append(Token(SEP, "[SEP]", zero, Segment.QUESTION))

    table, text_blocks = [], []
    for page in doc.pages:
        for block in page.blocks:
            if block.is_table:
                table += _block_tokens(page, block, Segment.TABLE, vocab)
            else:
                text_blocks.append((page, block))
    table = table[:room]
    room -= len(table)
    start = len(tokens)
    tokens += table
    table_range = (start, len(tokens))
    tokens.append(Token(SEP, "[SEP]", zero, Segment.TABLE))

    start = len(tokens)
    for i in rank_texts(question, [b.text for _, b in text_blocks]):
        if room <= 0:
            break
        page, block = text_blocks[i]
        block_tokens = _block_tokens(page, block, Segment.TEXT, vocab)[:room]
        tokens += block_tokens
        room -= len(block_tokens)
    text_range = (start, len(tokens))
    tokens.append(Token(SEP, "[SEP]", zero, Segment.TEXT))

    image_page = select_major_table_page(doc)
    image_ref = doc.page(image_page).image_ref if load_image else None
    features = page_to_patches(image_ref, config.patch_grid)
    start = len(tokens)
    for k, box in enumerate(patch_boxes(config.patch_grid)):
        tokens.append(Token(IMG, "[IMG]", box, Segment.VISUAL, divmod(k, config.patch_grid)))
    visual_range = (start, len(tokens))

    numbers = []
    for i in list(range(*table_range)) + list(range(*text_range)):
        value = parse_number(tokens[i].text)
        if value is not None:
            numbers.append(NumberToken(i, value))
    return InputSequence(tokens, 0, question_range, table_range, text_range, visual_range,
                         numbers, features, image_page)
