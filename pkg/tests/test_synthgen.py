import collections
import json

import numpy as np
import pytest

from docqa.docmodel import AnswerType, BoundingBox, Page, TextBlock, Word, load_dataset
from docqa.preprocess import Vocab, assemble_input, dataset_texts, page_to_patches
from docqa.synthgen import GeneratorConfig, generate, render_page
from docqa.training import make_labels
from docqa.treegen import execute, parse_derivation


def test_same_seed_same_bytes(tmp_path):
    generate(GeneratorConfig(documents=15, seed=9), tmp_path / "a")
    generate(GeneratorConfig(documents=15, seed=9), tmp_path / "b")
    for name in ("train.json", "dev.json", "test.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    generate(GeneratorConfig(documents=15, seed=10), tmp_path / "c")
    assert (tmp_path / "a" / "train.json").read_bytes() != (tmp_path / "c" / "train.json").read_bytes()


def test_arithmetic_is_self_consistent():
    datasets, _ = generate(GeneratorConfig(documents=300, seed=1))
    checked = 0
    for ds in datasets.values():
        for qa in ds.qa_pairs:
            if qa.answer_type is AnswerType.ARITHMETIC:
                assert execute(parse_derivation(qa.derivation)) == qa.gold_answer
                checked += 1
    assert checked > 500


def test_type_mixture():
    config = GeneratorConfig(documents=1667, seed=4)
    datasets, _ = generate(config)
    counts = collections.Counter(qa.answer_type.value for ds in datasets.values() for qa in ds.qa_pairs)
    total = sum(counts.values())
    assert total >= 10_000
    for name, share in config.type_mix.items():
        assert abs(counts[name] / total - share) <= 0.02, name


def test_every_qa_is_labelable():
    datasets, _ = generate(GeneratorConfig(documents=40, seed=6))
    for ds in datasets.values():
        vocab = Vocab.build(dataset_texts(ds))
        for qa in ds.qa_pairs:
            seq = assemble_input(qa.question, ds.document_for(qa), vocab, load_image=False)
            make_labels(qa, seq)


def test_layout_statistics():
    datasets, manifest = generate(GeneratorConfig(documents=200, seed=2))
    docs = [d for ds in datasets.values() for d in ds.documents.values()]
    pages = [p for d in docs for p in d.pages]
    assert abs(np.mean([sum(len(b.words) for b in p.blocks) for p in pages]) - 495) < 25
    multi = sum(len(d.pages) > 1 for d in docs) / len(docs)
    assert 0.04 < multi < 0.18
    for d in docs:
        assert any(manifest.table_blocks[d.doc_uid].values())


def test_manifest_is_json(tmp_path):
    generate(GeneratorConfig(documents=10, seed=3), tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert set(raw) >= {"config", "table_blocks", "qas", "splits"}
    train = load_dataset(tmp_path / "train.json")
    assert set(raw["qas"]) >= {qa.qa_uid for qa in train.qa_pairs}


def test_render_empty_page_is_white():
    img = render_page(Page(0, (), 200, 300))
    assert img.size == (200, 300)
    assert np.asarray(img).min() == 255


def test_render_full_page_block_is_dark(tmp_path):
    w = Word("x", BoundingBox(0, 0, 1000, 1000))
    page = Page(0, (TextBlock(0, (w,), w.bbox),), 120, 160)
    feats = page_to_patches(render_page(page), 7)
    np.testing.assert_allclose(feats[:, 3], 1.0, atol=1e-6)
    render_page(page, tmp_path / "a.png")
    render_page(page, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_rendered_images_are_referenced(tmp_path):
    generate(GeneratorConfig(documents=3, seed=3, render_images=True, splits={"train": 1.0}), tmp_path)
    ds = load_dataset(tmp_path / "train.json")
    for doc in ds.documents.values():
        for page in doc.pages:
            assert page.image_ref and page_to_patches(page.image_ref, 2).shape == (4, 4)
