"""Label construction, the summed multi-task loss and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import torch

from .docmodel import AnswerType, Dataset, QAPair, Scale
from .encoder import collate
from .heads import B, I, O, encode_spans, scale_logits, span_log_probs
from .model import DocQAModel, ModelConfig, build_model, save_checkpoint
from .preprocess import InputSequence, Vocab, assemble_input, dataset_texts, normalize_word
from .treegen import Leaf, Tree, TreeVocabulary, leaves, map_leaves, parse_derivation, preorder

log = logging.getLogger(__name__)


class UnlocatableAnswer(ValueError):
    pass


class UnalignableLeaf(ValueError):
    pass


class NoTrainableExamples(ValueError):
    pass


@dataclass
class TrainingLabels:
    answer_type: AnswerType
    scale: Scale
    span: Optional[tuple[int, int]] = None
    bio: Optional[list[int]] = None
    tree: Optional[Tree] = None
    tagged: list[int] = field(default_factory=list)  # token indices feeding the tree decoder

    def tree_targets(self, constants: Sequence[float]) -> list[int]:
        n_fixed = 4 + len(constants)
        out = []
        for tok in preorder(self.tree):
            if isinstance(tok, str):
                out.append("+-*/".index(tok))
            else:
                kind, k = tok.source
                out.append(4 + k if kind == "con" else n_fixed + k)
        return out


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 7
    clip_norm: float = 1.0
    beam: int = 3
    eval_every: int = 1
    weight_decay: float = 0.0
    warmup_steps: int = 0
    loss_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "clip_norm", "beam", "eval_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# --- labels ---------------------------------------------------------------------------

def _evidence_tokens(qa: QAPair, seq: InputSequence) -> list[list[int]]:
    """Token indices covered by each evidence triple (empty lists for parts cut by truncation)."""
    if not qa.evidence:
        return []
    where = {tok.source: i for i, tok in enumerate(seq.tokens) if seq.is_document(i)}
    spans = []
    for page, block, (start, end) in qa.evidence:
        spans.append([where[(page, block, w)] for w in range(start, end) if (page, block, w) in where])
    return spans


def _find_string(text: str, seq: InputSequence, taken: set[int]) -> Optional[tuple[int, int]]:
    target = [normalize_word(w) for w in text.split()]
    if not target:
        return None
    lo, hi = seq.document_range
    n = len(target)
    for i in range(lo, hi - n + 1):
        if any(k in taken or not seq.is_document(k) for k in range(i, i + n)):
            continue
        if [normalize_word(seq.tokens[k].text) for k in range(i, i + n)] == target:
            if len({seq.block_key(k) for k in range(i, i + n)}) == 1:
                return i, i + n - 1
    return None


def _locate_spans(qa: QAPair, seq: InputSequence) -> list[tuple[int, int]]:
    evidence = _evidence_tokens(qa, seq)
    strings = list(qa.gold_answer) if not qa.is_numeric else []
    spans = []
    if evidence:
        for toks in evidence:
            if not toks:
                raise UnlocatableAnswer(f"{qa.qa_uid}: evidence truncated out of the sequence")
            if toks != list(range(toks[0], toks[-1] + 1)):
                raise UnlocatableAnswer(f"{qa.qa_uid}: evidence tokens are not contiguous")
            spans.append((toks[0], toks[-1]))
        return spans
    if not strings:
        raise UnlocatableAnswer(f"{qa.qa_uid}: no evidence to locate the counted spans")
    taken: set[int] = set()
    for s in strings:
        span = _find_string(s, seq, taken)
        if span is None:
            raise UnlocatableAnswer(f"{qa.qa_uid}: {s!r} not found in the sequence")
        spans.append(span)
        taken.update(range(span[0], span[1] + 1))
    return spans


def align_leaves(tree: Tree, seq: InputSequence, constants: Sequence[float],
                 preferred: Sequence[int] = ()) -> dict[float, int]:
    """Map each leaf value to a document number token (evidence first, then
    earliest). Values with no document match must be constants."""
    preferred = set(preferred)
    chosen: dict[float, int] = {}
    for leaf in leaves(tree):
        if leaf.value in chosen:
            continue
        matches = [n.token_index for n in seq.number_candidates if n.value == leaf.value]
        if matches:
            in_evidence = [i for i in matches if i in preferred]
            chosen[leaf.value] = (in_evidence or matches)[0]
        elif leaf.value not in constants:
            raise UnalignableLeaf(f"leaf {leaf.value:g} is neither in the document nor a constant")
    return chosen


def resolve_tree(tree: Tree, chosen: dict[float, int], tagged: Sequence[int],
                 constants: Sequence[float]) -> Tree:
    tagged = list(tagged)
    constants = [float(c) for c in constants]

    def resolve(leaf: Leaf) -> Leaf:
        if leaf.value in chosen:
            return Leaf(leaf.value, ("tag", tagged.index(chosen[leaf.value])))
        return Leaf(leaf.value, ("con", constants.index(leaf.value)))

    return map_leaves(tree, resolve)


def make_labels(qa: QAPair, seq: InputSequence,
                constants: Sequence[float] = (0.0, 1.0, 100.0)) -> TrainingLabels:
    labels = TrainingLabels(qa.answer_type, qa.scale)
    n = len(seq)
    if qa.answer_type is AnswerType.SPAN:
        labels.span = _locate_spans(qa, seq)[0]
    elif qa.answer_type in (AnswerType.SPANS, AnswerType.COUNTING):
        labels.bio = encode_spans(_locate_spans(qa, seq), n)
    else:
        tree = parse_derivation(qa.derivation)
        evidence = [i for toks in _evidence_tokens(qa, seq) for i in toks]
        chosen = align_leaves(tree, seq, constants, evidence)
        # operands missing from the evidence are added so the tree stays derivable
        tagged = sorted(set(chosen.values()) | {i for i in evidence if seq.number_at(i)})
        labels.bio = [O] * n
        for i in tagged:
            labels.bio[i] = B
        labels.tagged = tagged
        labels.tree = resolve_tree(tree, chosen, tagged, constants)
    return labels


# --- loss -------------------------------------------------------------------------------

def forward_example(model: DocQAModel, rows: torch.Tensor, seq: InputSequence,
                    labels: TrainingLabels) -> dict:
    """Log-distributions of every head applicable to ``labels.answer_type``."""
    heads = model.heads
    cls = rows[seq.cls_index]
    out = {"head": heads.answer_type(cls).log_softmax(-1)}
    doc_mask = torch.tensor(seq.document_mask())
    if labels.answer_type is AnswerType.SPAN:
        out["start"], out["end"] = span_log_probs(rows, doc_mask, heads)
    else:
        out["bio"] = heads.bio(rows[doc_mask]).log_softmax(-1)
    number_rows = rows[labels.tagged] if labels.tagged else None
    out["scale"] = scale_logits(cls, number_rows, labels.answer_type, heads).log_softmax(-1)
    if labels.answer_type is AnswerType.ARITHMETIC:
        vocab = model.decoder.build_vocab(rows, [seq.number_at(i) for i in labels.tagged])
        out["tree"] = model.decoder.teacher_forced_nll(
            cls, rows, doc_mask, vocab, labels.tree_targets(model.decoder.constants))
    return out


def loss(outputs: dict, labels: TrainingLabels, seq: InputSequence,
         weights: Optional[dict] = None) -> torch.Tensor:
    """Sum of negative log-likelihoods of the applicable heads."""
    w = {"head": 1.0, "span": 1.0, "bio": 1.0, "scale": 1.0, "tree": 1.0, **(weights or {})}
    total = -outputs["head"][labels.answer_type.index] * w["head"]
    if labels.span is not None:
        start, end = labels.span
        total = total - (outputs["start"][start] + outputs["end"][end]) * w["span"]
    if labels.bio is not None:
        gold = torch.tensor([labels.bio[i] for i in range(len(seq)) if seq.is_document(i)])
        nll = -outputs["bio"].gather(1, gold[:, None]).squeeze(1)
        total = total + nll.mean() * w["bio"]
    total = total - outputs["scale"][labels.scale.index] * w["scale"]
    if labels.tree is not None:
        total = total + outputs["tree"] * w["tree"]
    return total


# --- training loop ------------------------------------------------------------------------

@dataclass
class Example:
    qa: QAPair
    seq: InputSequence
    labels: TrainingLabels


def prepare_examples(dataset: Dataset, vocab: Vocab, config: ModelConfig,
                     load_images: bool = True) -> tuple[list[Example], list[tuple[str, str]]]:
    """Preprocess and label every QA; failures are returned as (uid, reason)."""
    examples, skipped = [], []
    for qa in dataset.qa_pairs:
        try:
            seq = assemble_input(qa.question, dataset.document_for(qa), vocab, config.preprocess,
                                 load_image=load_images)
            examples.append(Example(qa, seq, make_labels(qa, seq, config.constants)))
        except (UnlocatableAnswer, UnalignableLeaf, ValueError) as exc:
            skipped.append((qa.qa_uid, f"{type(exc).__name__}: {exc}"))
    return examples, skipped


def batch_loss(model: DocQAModel, batch: Sequence[Example], weights: Optional[dict] = None) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    encoded = model.encoder(collate([e.seq for e in batch], dtype=dtype))
    losses = []
    for r, ex in enumerate(batch):
        rows = encoded[r, :len(ex.seq)]
        losses.append(loss(forward_example(model, rows, ex.seq, ex.labels), ex.labels, ex.seq, weights))
    return torch.stack(losses).mean()


def evaluate_examples(model: DocQAModel, examples: Sequence[Example], beam: int) -> tuple[float, float]:
    from .evaluation import exact_match, numeracy_f1
    from .inference import predict_sequences

    if not examples:
        return 0.0, 0.0
    answers = predict_sequences(model, [e.seq for e in examples], beam)
    em = sum(exact_match(a, e.qa) for a, e in zip(answers, examples))
    f1 = sum(numeracy_f1(a, e.qa) for a, e in zip(answers, examples))
    return 100.0 * em / len(examples), 100.0 * f1 / len(examples)


@dataclass
class TrainResult:
    model: DocQAModel
    history: list[dict]
    skipped: list[tuple[str, str]]
    best_epoch: int


def train(dataset: Dataset, config: TrainConfig, model_config: Optional[ModelConfig] = None,
          dev: Optional[Dataset] = None, vocab: Optional[Vocab] = None, out_dir=None,
          load_images: bool = True, min_count: int = 2, target_em: Optional[float] = None) -> TrainResult:
    """Minimise the summed loss with Adam and gradient-norm clipping.

    Deterministic given ``config.seed``. When ``dev`` is given the checkpoint
    with the best dev EM is kept (and saved under ``out_dir``); otherwise the
    final one. ``target_em`` stops early once training-set EM reaches it.
    """
    model_config = model_config or ModelConfig()
    if vocab is None:
        vocab = Vocab.build(dataset_texts(dataset), min_count=min_count)
    examples, skipped = prepare_examples(dataset, vocab, model_config, load_images)
    if skipped:
        log.warning("skipped %d of %d records during labelling", len(skipped), len(dataset.qa_pairs))
    if not examples:
        raise NoTrainableExamples("no record could be labelled")
    dev_examples = prepare_examples(dev, vocab, model_config, load_images)[0] if dev is not None else []

    torch.manual_seed(config.seed)
    model = build_model(model_config, vocab, config.seed)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    def lr_lambda(step):
        if config.warmup_steps and step < config.warmup_steps:
            return (step + 1) / config.warmup_steps
        return 1.0

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda)
    rng = random.Random(config.seed)
    history = []
    best = (-1.0, 0, None)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = (out_dir / "train_log.jsonl").open("w", encoding="utf-8")
    try:
        for epoch in range(1, config.epochs + 1):
            order = list(range(len(examples)))
            rng.shuffle(order)
            running, batches = 0.0, 0
            for k in range(0, len(order), config.batch_size):
                batch = [examples[i] for i in order[k:k + config.batch_size]]
                opt.zero_grad()
                value = batch_loss(model, batch, config.loss_weights)
                value.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
                opt.step()
                sched.step()
                running += value.item() * len(batch)
                batches += len(batch)
            record = {"epoch": epoch, "train_loss": round(running / batches, 6)}
            last = epoch == config.epochs
            if epoch % config.eval_every == 0 or last:
                if dev_examples:
                    em, f1 = evaluate_examples(model, dev_examples, config.beam)
                    record.update(dev_em=round(em, 4), dev_f1=round(f1, 4))
                    if em > best[0]:
                        best = (em, epoch, copy.deepcopy(model.state_dict()))
                if target_em is not None:
                    train_em, _ = evaluate_examples(model, examples, config.beam)
                    record["train_em"] = round(train_em, 4)
            history.append(record)
            log.info("epoch %s", json.dumps(record))
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if target_em is not None and record.get("train_em", -1) >= target_em:
                break
    finally:
        if log_fh:
            log_fh.close()
    best_epoch = history[-1]["epoch"]
    if best[2] is not None:
        model.load_state_dict(best[2])
        best_epoch = best[1]
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.pt", {"best_epoch": best_epoch, "skipped": len(skipped)})
    return TrainResult(model, history, skipped, best_epoch)
