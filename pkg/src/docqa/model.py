"""The full question-answering network and checkpoint I/O."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn as nn

from .encoder import Encoder, EncoderConfig, init_params
from .heads import Heads, MAX_SPAN_LENGTH
from .preprocess import PreprocessConfig, Vocab
from .treegen import DEFAULT_CONSTANTS, DEFAULT_NODE_CAP, TreeDecoder

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    constants: tuple = DEFAULT_CONSTANTS
    node_cap: int = DEFAULT_NODE_CAP
    max_span_length: int = MAX_SPAN_LENGTH

    def to_dict(self) -> dict:
        out = asdict(self)
        out["constants"] = list(self.constants)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(EncoderConfig(**raw["encoder"]), PreprocessConfig(**raw["preprocess"]),
                   tuple(raw["constants"]), raw["node_cap"], raw["max_span_length"])


class DocQAModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.encoder = Encoder(config.encoder)
        self.heads = Heads(config.encoder.hidden)
        self.decoder = TreeDecoder(config.encoder.hidden, config.constants, config.node_cap)


def build_model(config: ModelConfig, vocab: Vocab, seed: int | None = None) -> DocQAModel:
    if config.encoder.vocab_size < len(vocab):
        config.encoder.vocab_size = len(vocab)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.encoder.seed if seed is None else seed)
        return DocQAModel(config, vocab)


def save_checkpoint(model: DocQAModel, path, extra: dict | None = None) -> None:
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu() for k, v in model.state_dict().items()}, buf)
    blob = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_json(),
        "extra": extra or {},
        "state": buf.getvalue(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def load_checkpoint(path) -> DocQAModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or "version" not in blob:
        raise CheckpointError(f"{path}: not a checkpoint (missing version)")
    if blob["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob['version']}")
    config = ModelConfig.from_dict(blob["config"])
    model = DocQAModel(config, Vocab.from_json(blob["vocab"]))
    model.load_state_dict(torch.load(io.BytesIO(blob["state"]), map_location="cpu"))
    model.eval()
    return model
