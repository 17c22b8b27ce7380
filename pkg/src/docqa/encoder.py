"""Miniature layout-aware transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .docmodel import GRID
from .preprocess import SPECIALS, InputSequence, Segment

N_SEGMENTS = len(Segment)
N_SPECIALS = len(SPECIALS)
N_LAYOUT = 6
PATCH_FEATURES = 4


class SequenceTooLong(ValueError):
    pass


class VocabularyOverflow(ValueError):
    pass


@dataclass
class EncoderConfig:
    hidden: int = 128
    layers: int = 4
    heads: int = 4
    ff: int = 512
    vocab_size: int = 5000
    layout_buckets: int = 1001
    max_len: int = 512
    seed: int = 0
    dropout: float = 0.0
    # Optional extras, off by default. ``spatial_bias`` adds learned attention
    # biases keyed on relative sequence offset and relative box edges;
    # ``question_match`` marks document words whose id also occurs in the question.
    spatial_bias: bool = False
    question_match: bool = False

    def __post_init__(self):
        for name in ("hidden", "layers", "heads", "ff", "vocab_size", "layout_buckets", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x, pad_mask=None, bias=None):
        b, n, h = x.shape
        d = h // self.heads
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, d).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if bias is not None:
            scores = scores + bias
        if pad_mask is not None:
            scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(-1)
        ctx = (probs @ v).transpose(1, 2).reshape(b, n, h)
        return self.out(ctx), probs


class EncoderLayer(nn.Module):
    """Pre-LN block: x + attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, hidden: int, heads: int, ff: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = SelfAttention(hidden, heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ff1 = nn.Linear(hidden, ff)
        self.ff2 = nn.Linear(ff, hidden)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pad_mask=None, bias=None):
        a, probs = self.attn(self.ln1(x), pad_mask, bias)
        x = x + self.drop(a)
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))
        return x, probs


REL_POSITION_CLIP = 16
REL_BOX_STEP = 8
REL_BOX_CLIP = 32
N_REL_EDGES = 3  # x0, x1, y1 differences


class SpatialBias(nn.Module):
    """Per-head attention bias from relative position and relative box edges.

    Sequence offsets are clipped to +-16; edge differences are divided by 8
    grid units and clipped to +-32 buckets. Box terms only apply between two
    tokens that both carry a box, so question words and markers see just the
    sequence term. Tables start at zero, which leaves plain attention intact.
    """

    def __init__(self, heads: int):
        super().__init__()
        self.position = nn.Embedding(2 * REL_POSITION_CLIP + 1, heads)
        self.edges = nn.ModuleList(nn.Embedding(2 * REL_BOX_CLIP + 1, heads) for _ in range(N_REL_EDGES))
        for table in [self.position, *self.edges]:
            nn.init.zeros_(table.weight)

    def forward(self, boxes):
        b, n = boxes.shape[:2]
        idx = torch.arange(n, device=boxes.device)
        offset = (idx[None, :] - idx[:, None]).clamp(-REL_POSITION_CLIP, REL_POSITION_CLIP) + REL_POSITION_CLIP
        bias = self.position(offset)[None].expand(b, n, n, -1)
        has_box = boxes[..., 2] > 0
        pair = (has_box[:, :, None] & has_box[:, None, :])[..., None]
        for table, edge in zip(self.edges, (boxes[..., 0], boxes[..., 2], boxes[..., 3])):
            delta = torch.div(edge[:, None, :] - edge[:, :, None], REL_BOX_STEP, rounding_mode="floor")
            bucket = delta.clamp(-REL_BOX_CLIP, REL_BOX_CLIP) + REL_BOX_CLIP
            bias = bias + table(bucket) * pair
        return bias.permute(0, 3, 1, 2)


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        h = config.hidden
        self.token = nn.Embedding(config.vocab_size, h)
        self.position = nn.Embedding(config.max_len, h)
        # x0, y0, x1, y1, width, height
        self.layout = nn.ModuleList(nn.Embedding(config.layout_buckets, h) for _ in range(N_LAYOUT))
        self.segment = nn.Embedding(N_SEGMENTS, h)
        self.visual = nn.Linear(PATCH_FEATURES, h)
        self.layers = nn.ModuleList(
            EncoderLayer(h, config.heads, config.ff, config.dropout) for _ in range(config.layers))
        self.ln = nn.LayerNorm(h)
        self.drop = nn.Dropout(config.dropout)
        for emb in [self.token, self.position, self.segment, *self.layout]:
            nn.init.normal_(emb.weight, std=0.1)
        # created after the base tables so enabling them does not reshuffle the base init
        self.spatial = SpatialBias(config.heads) if config.spatial_bias else None
        self.match = nn.Embedding(2, h) if config.question_match else None
        if self.match is not None:
            nn.init.normal_(self.match.weight, std=0.1)

    def bucket(self, coord):
        """Map 0-1000 grid coordinates onto ``layout_buckets`` equal-width buckets."""
        b = self.config.layout_buckets
        return (coord.clamp(0, GRID) * b) // (GRID + 1)

    def embed(self, batch):
        ids, boxes = batch["ids"], batch["bbox"]
        n = ids.shape[1]
        if n > self.config.max_len:
            raise SequenceTooLong(f"sequence length {n} exceeds {self.config.max_len}")
        if ids.numel() and int(ids.max()) >= self.config.vocab_size:
            raise VocabularyOverflow(f"token id {int(ids.max())} >= vocabulary size {self.config.vocab_size}")
        tok = self.token(ids)
        vis = self.visual(batch["patch"].to(tok.dtype))
        tok = torch.where(batch["visual"][..., None], vis, tok)
        x0, y0, x1, y1 = boxes.unbind(-1)
        coords = [x0, y0, x1, y1, x1 - x0, y1 - y0]
        layout = sum(table(self.bucket(c)) for table, c in zip(self.layout, coords))
        pos = self.position(torch.arange(n, device=ids.device))[None]
        out = tok + pos + layout + self.segment(batch["segment"])
        if self.match is not None:
            out = out + self.match(question_match(ids, batch["segment"]).long())
        return out

    def forward(self, batch, return_attention: bool = False):
        x = self.drop(self.embed(batch))
        pad = batch.get("pad")
        bias = self.spatial(batch["bbox"]) if self.spatial is not None else None
        attentions = []
        for layer in self.layers:
            x, probs = layer(x, pad, bias)
            attentions.append(probs)
        x = self.ln(x)
        return (x, attentions) if return_attention else x


def question_match(ids, segment):
    """True at document tokens whose word id also appears among the question tokens.

    Special ids (padding, markers, [UNK], [NUM]) never match.
    """
    in_question = segment == Segment.QUESTION.value
    q = torch.where(in_question, ids, torch.full_like(ids, -1))
    hit = (ids[:, :, None] == q[:, None, :]).any(-1)
    return hit & ~in_question & (ids >= N_SPECIALS)


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count of :class:`Encoder`."""
    h, f = config.hidden, config.ff
    embeddings = (config.vocab_size + config.max_len + N_LAYOUT * config.layout_buckets + N_SEGMENTS) * h
    visual = PATCH_FEATURES * h + h
    layer = 2 * h + (3 * h * h + 3 * h) + (h * h + h) + 2 * h + (h * f + f) + (f * h + h)
    extras = 0
    if config.spatial_bias:
        extras += (2 * REL_POSITION_CLIP + 1 + N_REL_EDGES * (2 * REL_BOX_CLIP + 1)) * config.heads
    if config.question_match:
        extras += 2 * h
    return embeddings + visual + config.layers * layer + 2 * h + extras


def init_params(config: EncoderConfig, seed: Optional[int] = None) -> Encoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed if seed is None else seed)
        return Encoder(config)


def collate(seqs: Sequence[InputSequence], dtype=torch.float32) -> dict:
    """Pad a list of sequences into batch tensors."""
    n = max(len(s) for s in seqs)
    b = len(seqs)
    ids = torch.zeros(b, n, dtype=torch.long)
    bbox = torch.zeros(b, n, 4, dtype=torch.long)
    segment = torch.zeros(b, n, dtype=torch.long)
    visual = torch.zeros(b, n, dtype=torch.bool)
    patch = torch.zeros(b, n, PATCH_FEATURES, dtype=dtype)
    pad = torch.ones(b, n, dtype=torch.bool)
    for r, s in enumerate(seqs):
        m = len(s)
        ids[r, :m] = torch.tensor([t.id for t in s.tokens])
        bbox[r, :m] = torch.tensor([[t.bbox.x0, t.bbox.y0, t.bbox.x1, t.bbox.y1] for t in s.tokens])
        segment[r, :m] = torch.tensor([t.segment.value for t in s.tokens])
        v0, v1 = s.visual_range
        visual[r, v0:v1] = True
        if v1 > v0:
            patch[r, v0:v1] = torch.as_tensor(np.asarray(s.visual_features), dtype=dtype)
        pad[r, :m] = False
    return {"ids": ids, "bbox": bbox, "segment": segment, "visual": visual, "patch": patch, "pad": pad}


@dataclass
class EncodedSequence:
    matrix: torch.Tensor  # (length, hidden)
    seq: InputSequence

    @property
    def cls_vector(self) -> torch.Tensor:
        return self.matrix[self.seq.cls_index]

    @property
    def question(self) -> torch.Tensor:
        return self.matrix[slice(*self.seq.question_range)]

    @property
    def document(self) -> torch.Tensor:
        """Rows of every position, with non-document rows left in place; use
        ``seq.document_mask()`` to select."""
        return self.matrix

    def document_mask(self) -> torch.Tensor:
        return torch.tensor(self.seq.document_mask())


def encode(seq: InputSequence, encoder: Encoder) -> EncodedSequence:
    param = next(encoder.parameters())
    batch = collate([seq], dtype=param.dtype)
    return EncodedSequence(encoder(batch)[0], seq)
