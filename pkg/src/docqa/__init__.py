"""Question answering over visually rich financial documents.

Documents are sequences of pages holding OCR'd word boxes. A small
layout-aware transformer encodes question + document; typed heads then
extract a span, tag several spans, count them, or build an arithmetic
expression tree over tagged numbers. The answer is finally scaled.
"""

__version__ = "0.1.0"
