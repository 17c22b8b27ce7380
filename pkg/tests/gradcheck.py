"""Central finite-difference check of the full model loss, in float64."""

import re
from collections import defaultdict

import numpy as np
import torch

from conftest import fig1_page, fig1_qas
from docqa.docmodel import Document
from docqa.encoder import EncoderConfig
from docqa.model import ModelConfig, build_model
from docqa.preprocess import PreprocessConfig, Vocab, assemble_input
from docqa.training import forward_example, loss, make_labels
from docqa.encoder import collate

TINY = dict(hidden=32, layers=2, heads=2, ff=64, max_len=128)

GROUPS = [
    ("token embedding", r"^encoder\.token\."),
    ("position embedding", r"^encoder\.position\."),
    ("layout embedding", r"^encoder\.layout\."),
    ("segment embedding", r"^encoder\.segment\."),
    ("visual projection", r"^encoder\.visual\."),
    ("attention", r"^encoder\.layers\.\d+\.attn\."),
    ("feed-forward", r"^encoder\.layers\.\d+\.ff\d\."),
    ("layer norm", r"^encoder\.(layers\.\d+\.)?ln\d?\."),
    ("spatial bias", r"^encoder\.spatial\."),
    ("question match", r"^encoder\.match\."),
    ("heads", r"^heads\."),
    ("tree decoder", r"^decoder\."),
]


def group_of(name):
    for label, pattern in GROUPS:
        if re.search(pattern, name):
            return label
    raise KeyError(name)


def build_problem(seed=0, **extras):
    doc = Document("fig1", (fig1_page(),))
    words = [w.text for b in doc.pages[0].blocks for w in b.words]
    qas = fig1_qas()
    vocab = Vocab.build(words + [w for qa in qas for w in qa.question.split()], min_count=1)
    config = ModelConfig(EncoderConfig(**TINY, **extras), PreprocessConfig(token_budget=128, patch_grid=2))
    model = build_model(config, vocab, seed).double()
    rng = np.random.default_rng(seed)
    items = []
    for qa in qas:
        seq = assemble_input(qa.question, doc, vocab, config.preprocess)
        seq.visual_features = rng.uniform(0, 1, seq.visual_features.shape)  # keep the projection live
        items.append((seq, make_labels(qa, seq, config.constants)))
    return model, items


def total_loss(model, items):
    batch = collate([s for s, _ in items], dtype=torch.float64)
    encoded = model.encoder(batch)
    out = 0
    for r, (seq, labels) in enumerate(items):
        rows = encoded[r, :len(seq)]
        out = out + loss(forward_example(model, rows, seq, labels), labels, seq)
    return out


def run(entries_per_tensor=3, eps=1e-6, seed=0, **extras):
    """Return {group: worst relative error} over the largest-gradient entries of every tensor.

    ``extras`` go to the encoder config (``spatial_bias``, ``question_match``).
    """
    model, items = build_problem(seed, **extras)
    model.zero_grad()
    total_loss(model, items).backward()
    worst = defaultdict(float)
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = param.grad.detach().clone().reshape(-1)
            flat = param.data.view(-1)
            for k in torch.argsort(grad.abs(), descending=True)[:entries_per_tensor].tolist():
                saved = flat[k].item()
                flat[k] = saved + eps
                up = total_loss(model, items).item()
                flat[k] = saved - eps
                down = total_loss(model, items).item()
                flat[k] = saved
                numeric = (up - down) / (2 * eps)
                analytic = grad[k].item()
                scale = max(abs(numeric), abs(analytic), 1e-7)
                worst[group_of(name)] = max(worst[group_of(name)], abs(numeric - analytic) / scale)
    return dict(worst)
