"""Saving and restoring whole models (parameters + config + vocabulary)."""
from __future__ import annotations

from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluator import Evaluator, EvaluatorConfig
from .generator import Generator, GeneratorConfig
from .nn import Module
from .text import Vocab


def save_model(model: Module, path, **extra) -> Path:
    meta = dict(model.meta())
    meta.update(extra)
    meta["digest"] = model.digest()
    return save_checkpoint(path, model.state_dict(), meta)


def _load(path, kind: str, cls, cfg_cls):
    params, meta = load_checkpoint(path)
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')!r}")
    model = cls(Vocab(meta["vocab"]), cfg_cls(**meta["config"]))
    model.load_state_dict(params)
    model.version = 0
    return model, meta


def load_generator(path) -> tuple[Generator, dict]:
    return _load(path, "generator", Generator, GeneratorConfig)


def load_evaluator(path) -> tuple[Evaluator, dict]:
    return _load(path, "evaluator", Evaluator, EvaluatorConfig)
