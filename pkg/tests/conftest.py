import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []  # one line per acceptance criterion, filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)

from docqa.docmodel import AnswerType, BoundingBox, Document, Page, QAPair, Scale, TextBlock, Word


def block(block_id, text, x0, y0, char_w=6, height=9):
    words, x = [], x0
    for t in text.split():
        words.append(Word(t, BoundingBox(x, y0, x + char_w * len(t), y0 + height)))
        x += char_w * (len(t) + 1)
    return TextBlock(block_id, tuple(words), BoundingBox.union(w.bbox for w in words))


def right_block(block_id, text, x1, y0):
    return block(block_id, text, x1 - 6 * len(text), y0)


def paragraph(block_id, text, y0, per_line=12):
    words = text.split()
    out, y = [], y0
    for k in range(0, len(words), per_line):
        x = 60
        for t in words[k:k + per_line]:
            out.append(Word(t, BoundingBox(x, y, x + 6 * len(t), y + 9)))
            x += 6 * (len(t) + 1)
        y += 12
    return TextBlock(block_id, tuple(out), BoundingBox.union(w.bbox for w in out))


def fig1_page(page_index=0):
    """A one-table page modelled on the wireless cost example."""
    blocks = [block(0, "Annual report 2019", 60, 40)]
    rows = [("$ in millions", "2019", "2018"),
            ("Wireless", "1,320", "1,202"),
            ("Spectrum license fee", "1,731", "1,500"),
            ("Wireline", "(45,333)", "36,987")]
    y = 80
    for label, a, b in rows:
        blocks.append(block(len(blocks), label, 60, y))
        blocks.append(right_block(len(blocks), a, 560, y))
        blocks.append(right_block(len(blocks), b, 700, y))
        y += 16
    blocks.append(paragraph(len(blocks), "The fair value of financial instruments that are not traded in "
                            "active markets is determined using valuation techniques.", 200))
    blocks.append(paragraph(len(blocks), "The three operating and reportable segments are PSG, ASG and ISG. "
                            "The company continued to invest in wireless capacity.", 240))
    return Page(page_index, tuple(blocks), 612, 792)


FIG1_QUESTION = "What was the total cost in Wireless including spectrum license fee in 2019?"


@pytest.fixture
def fig1_doc():
    return Document("fig1", (fig1_page(),))


@pytest.fixture
def fig1_qa():
    return QAPair("fig1-q", "fig1", FIG1_QUESTION, 3051, AnswerType.ARITHMETIC, Scale.MILLIONS,
                  "1,320 + 1,731", ((0, 5, (0, 1)), (0, 8, (0, 1))))


def fig1_qas():
    """Arithmetic (flat and nested), span and multi-span questions over the Fig. 1 page."""
    return [
        QAPair("fig1-q", "fig1", FIG1_QUESTION, 3051, AnswerType.ARITHMETIC, Scale.MILLIONS,
               "1,320 + 1,731", ((0, 5, (0, 1)), (0, 8, (0, 1)))),
        QAPair("fig1-span", "fig1", "How is the fair value of financial instruments determined?",
               ("using valuation techniques",), AnswerType.SPAN, Scale.NONE),
        QAPair("fig1-spans", "fig1", "What are the reportable segments?",
               ("PSG", "ASG", "ISG"), AnswerType.SPANS, Scale.NONE),
        QAPair("fig1-pct", "fig1", "What was the percentage change in Wireless from 2018 to 2019?",
               9.82, AnswerType.ARITHMETIC, Scale.PERCENT, "(1,320 - 1,202) / 1,202 * 100",
               ((0, 5, (0, 1)), (0, 6, (0, 1)))),
    ]
