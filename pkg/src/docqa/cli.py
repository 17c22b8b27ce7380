"""Command-line entry point: ``docqa generate|train|predict|evaluate|inspect``.

Settings come from a YAML file (``--config`` or ``$DOCQA_CONFIG``) with the
sections ``encoder``, ``preprocess``, ``model``, ``train``, ``generator`` and
``paths``; a handful of flags override it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .docmodel import AnswerType, MalformedInput, load_dataset
from .encoder import EncoderConfig
from .evaluation import UnknownUid, evaluate
from .model import CheckpointError, ModelConfig, load_checkpoint
from .preprocess import BudgetTooSmall, PreprocessConfig, assemble_input
from .synthgen import GeneratorConfig, generate
from .training import NoTrainableExamples, TrainConfig, make_labels, train
from .treegen import execute, parse_derivation, preorder, to_infix

log = logging.getLogger("docqa")

CONFIG_ENV = "DOCQA_CONFIG"
EXIT_OK, EXIT_RECORD_ERRORS, EXIT_FATAL = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelSection:
    constants: list = field(default_factory=lambda: [0.0, 1.0, 100.0])
    node_cap: int = 15
    max_span_length: int = 40
    min_count: int = 2


@dataclass
class Paths:
    data: str = "data"
    run: str = "run"


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    paths: Paths = field(default_factory=Paths)

    def model_config(self) -> ModelConfig:
        encoder = dataclasses.replace(self.encoder, max_len=max(self.encoder.max_len,
                                                                self.preprocess.token_budget))
        return ModelConfig(encoder, self.preprocess, tuple(self.model.constants), self.model.node_cap,
                           self.model.max_span_length)

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        out["generator"]["page_pixels"] = list(self.generator.page_pixels)
        return out


def _section(cls, raw, key):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(key, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in names:
            raise ConfigError(f"{key}.{k}", "unknown key")
    if "page_pixels" in raw:
        raw = {**raw, "page_pixels": tuple(raw["page_pixels"])}
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def load_config(path=None) -> RunConfig:
    """Read a RunConfig; missing sections and keys keep their defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"not valid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    sections = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in sections:
            raise ConfigError(key, "unknown key")
    types = {"encoder": EncoderConfig, "preprocess": PreprocessConfig, "model": ModelSection,
             "train": TrainConfig, "generator": GeneratorConfig, "paths": Paths}
    return RunConfig(**{name: _section(cls, raw.get(name), name) for name, cls in types.items()})


def resolve_config(args) -> RunConfig:
    config = load_config(args.config or os.environ.get(CONFIG_ENV))
    if args.seed is not None:
        config.generator.seed = args.seed
        config.train.seed = args.seed
    if getattr(args, "budget", None) is not None:
        config.preprocess = dataclasses.replace(config.preprocess, token_budget=args.budget)
    if getattr(args, "beam", None) is not None:
        config.train.beam = args.beam
    return config


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# --- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = resolve_config(args)
    out = Path(args.out or config.paths.data)
    _, manifest = generate(config.generator, out)
    for split, n in manifest.splits.items():
        print(f"{split}: {n['documents']} documents, {n['qas']} questions")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    data = Path(args.dataset or config.paths.data)
    train_path = data / "train.json" if data.is_dir() else data
    dev_path = data / "dev.json" if data.is_dir() else None
    train_set = load_dataset(train_path)
    dev_set = load_dataset(dev_path) if dev_path is not None and dev_path.exists() else None
    out = Path(args.out or config.paths.run)
    result = train(train_set, config.train, config.model_config(), dev=dev_set, out_dir=out,
                   min_count=config.model.min_count)
    (out / "config.json").write_text(_dump(config.to_json()), encoding="utf-8")
    if result.skipped:
        (out / "skipped.jsonl").write_text(
            "".join(json.dumps({"uid": u, "reason": r}) + "\n" for u, r in result.skipped), encoding="utf-8")
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; final loss {last['train_loss']:.4f}; "
          f"best epoch {result.best_epoch}; skipped {len(result.skipped)}")
    return EXIT_OK


def _checkpoint(args, config: RunConfig) -> Path:
    return Path(args.checkpoint or Path(config.paths.run) / "model.pt")


def cmd_predict(args) -> int:
    from .inference import predict_batch

    config = resolve_config(args)
    model = load_checkpoint(_checkpoint(args, config))
    if args.budget is not None:
        model.config.preprocess = config.preprocess
    dataset = load_dataset(args.dataset or Path(config.paths.data) / "test.json")
    out = Path(args.out or Path(config.paths.run) / "predictions.jsonl")
    _, errors = predict_batch(dataset, model, out, beam=config.train.beam)
    print(f"wrote {len(dataset.qa_pairs)} predictions to {out} ({errors} errors)")
    return EXIT_RECORD_ERRORS if errors else EXIT_OK


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    gold = load_dataset(args.dataset or Path(config.paths.data) / "test.json")
    predictions = Path(args.predictions or Path(config.paths.run) / "predictions.jsonl")
    if not predictions.exists():
        raise FileNotFoundError(predictions)
    report = evaluate(gold, predictions)
    print(report.table())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(_dump(report.to_json()), encoding="utf-8")
    return EXIT_OK


def cmd_inspect(args) -> int:
    config = resolve_config(args)
    dataset = load_dataset(args.dataset or Path(config.paths.data) / "train.json")
    qa = next((q for q in dataset.qa_pairs if q.qa_uid == args.uid), None)
    if qa is None:
        print(f"no question with uid {args.uid!r}", file=sys.stderr)
        return EXIT_FATAL
    model = load_checkpoint(_checkpoint(args, config)) if args.checkpoint else None
    if model is not None:
        vocab, preprocess, constants = model.vocab, model.config.preprocess, model.config.constants
    else:
        from .preprocess import Vocab, dataset_texts
        vocab = Vocab.build(dataset_texts(dataset), min_count=config.model.min_count)
        preprocess, constants = config.preprocess, tuple(config.model.constants)
    seq = assemble_input(qa.question, dataset.document_for(qa), vocab, preprocess, load_image=False)

    print(f"question  {qa.question}")
    print(f"gold      {qa.gold_answer!r} ({qa.answer_type.value}, scale {qa.scale.value or 'none'})")
    if qa.derivation:
        print(f"derivation {qa.derivation} = {execute(parse_derivation(qa.derivation))}")
    print(f"sequence  {len(seq)} tokens; table {seq.table_range}, text {seq.text_range}, "
          f"visual {seq.visual_range}; image page {seq.image_page}")
    labels = make_labels(qa, seq, constants)
    marks = {}
    if labels.span:
        start, end = labels.span
        marks.update({start: "start", end: "end"} if start != end else {start: "start+end"})
    if labels.bio:
        marks.update({i: "BIO"[tag] for i, tag in enumerate(labels.bio) if tag != 2})
    for i, tok in enumerate(seq.tokens):
        if i < seq.visual_range[0] and (args.all_tokens or i in marks or not seq.is_document(i)):
            print(f"  {i:4d} {tok.segment.name:<8} {tok.text:<24} {marks.get(i, '')}")
    if labels.tree is not None:
        print(f"gold tree {to_infix(labels.tree)} = {execute(labels.tree)}")
        print(f"pre-order {' '.join(str(t if isinstance(t, str) else t.source) for t in preorder(labels.tree))}")
    if model is not None:
        _inspect_model(model, seq)
    return EXIT_OK


def _inspect_model(model, seq) -> None:
    import torch

    from .docmodel import ANSWER_TYPES
    from .encoder import encode
    from .inference import route
    from .treegen import tree_of_preorder

    with torch.no_grad():
        rows = encode(seq, model.encoder).matrix
        probs = model.heads.answer_type(rows[seq.cls_index]).softmax(-1).tolist()
        print("answer type " + "  ".join(f"{t.value}={p:.3f}" for t, p in zip(ANSWER_TYPES, probs)))
        a = route(model, rows, seq)
    print(f"predicted {a.value!r} scale {a.scale.value or 'none'} (score {a.score:.4f})"
          + (" degraded" if a.degraded else ""))
    if a.answer_type is AnswerType.ARITHMETIC and a.tree:
        tree = tree_of_preorder(a.tree)
        print(f"decoded tree {to_infix(tree)} = {execute(tree)}")


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML run config (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, help="overrides generator and training seeds")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--dataset", help="dataset file, or a directory of split files")
    common.add_argument("--checkpoint", help="model checkpoint (default: <paths.run>/model.pt)")
    common.add_argument("--beam", type=int, help="beam width for the expression tree decoder")
    common.add_argument("--budget", type=int, help="token budget of the assembled input")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="docqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset").set_defaults(func=cmd_generate)
    sub.add_parser("train", parents=[common], help="train a model").set_defaults(func=cmd_train)
    sub.add_parser("predict", parents=[common], help="write predictions JSONL").set_defaults(func=cmd_predict)
    p = sub.add_parser("evaluate", parents=[common], help="score predictions against gold")
    p.add_argument("--predictions", help="predictions JSONL (default: <paths.run>/predictions.jsonl)")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("inspect", parents=[common], help="show one question's input, labels and outputs")
    p.add_argument("uid", help="question uid")
    p.add_argument("--all-tokens", action="store_true", help="list every document token")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"no such file: {exc.filename or exc}", file=sys.stderr)
    except (MalformedInput, CheckpointError, NoTrainableExamples, UnknownUid, BudgetTooSmall) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
