"""Experiment configuration: JSON file, strict keys, CLI overrides, per-phase seeds."""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .evaluator import EvaluatorConfig
from .generator import GeneratorConfig
from .rl import RLConfig
from .synth import SynthConfig
from .training import TrainConfig

MODES = ("synth-data", "pretrain", "train-eval-sl", "train-rbm-sl", "train-rbm-irl",
         "train-rl-rouge", "generate", "score", "evaluate", "report")
PHASES = ("synth", "vocab", "init-generator", "init-evaluator", "pretrain", "train-eval-sl",
          "rl", "irl", "generate")


class ConfigError(ValueError):
    """Validation failure; ``errors`` holds field-level messages."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class DataConfig:
    train: str = ""
    test: str = ""
    negatives: str = ""
    nonparallel: str = ""
    vocab_size: int = 5000
    max_len: int = 20
    synth_pairs: int = 1000
    heldout_fraction: float = 0.1


@dataclass
class ExperimentConfig:
    mode: str = "pretrain"
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"
    generator_checkpoint: str = ""
    evaluator_checkpoint: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    checkpoint_every: int = 0
    phase_seeds: dict = field(default_factory=dict)

    def validate(self) -> list[str]:
        errs = []
        if self.mode not in MODES:
            errs.append(f"mode: {self.mode!r} not one of {', '.join(MODES)}")
        if self.workers < 1:
            errs.append("workers: must be >= 1")
        if self.seed < 0:
            errs.append("seed: must be >= 0")
        if self.data.vocab_size < 5:
            errs.append("data.vocab_size: must be >= 5")
        if not 1 <= self.data.max_len:
            errs.append("data.max_len: must be >= 1")
        if not 0 <= self.data.heldout_fraction < 1:
            errs.append("data.heldout_fraction: must lie in [0, 1)")
        if self.checkpoint_every < 0:
            errs.append("checkpoint_every: must be >= 0")
        for name in ("mle_epochs", "eval_epochs", "rl_steps", "irl_alternations", "irl_inner_steps",
                     "irl_outer_steps"):
            if getattr(self.train, name) < 0:
                errs.append(f"train.{name}: must be >= 0")
        for name in ("mle_batch", "eval_batch", "irl_eval_batch", "rl_eval_every", "heldout_size"):
            if getattr(self.train, name) < 1:
                errs.append(f"train.{name}: must be >= 1")
        if not 0 <= self.train.nonparallel_fraction <= 1:
            errs.append("train.nonparallel_fraction: must lie in [0, 1]")
        for name in ("emb_dim", "hidden", "attn_dim", "out_hidden"):
            if getattr(self.generator, name) < 1:
                errs.append(f"generator.{name}: must be >= 1")
        for name in ("emb_dim", "hidden"):
            if getattr(self.evaluator, name) < 1:
                errs.append(f"evaluator.{name}: must be >= 1")
        errs += [f"rl.{e}" for e in self.rl.validate()]
        return errs

    def seed_for(self, phase: str) -> int:
        return phase_seed(self.seed, phase)

    def rng(self, phase: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_for(phase))

    def effective(self) -> "ExperimentConfig":
        """Copy with the per-phase seeds filled in, as written next to the artifacts."""
        cfg = from_dict(to_dict(self))
        cfg.phase_seeds = {p: phase_seed(self.seed, p) for p in PHASES}
        return cfg


def phase_seed(root: int, phase: str) -> int:
    ss = np.random.SeedSequence([int(root), zlib.crc32(phase.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def to_dict(cfg) -> dict:
    d = asdict(cfg)
    # tuples become lists in JSON; keep that form in memory too so round-trips compare equal
    return json.loads(json.dumps(d))


def _build(cls, data: dict, prefix: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{prefix or 'config'}: expected an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            errors.append(f"{prefix}{k}: unknown key")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(defaults, name)
        value = data[name]
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.", errors)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                errors.append(f"{prefix}{name}: expected a list")
            else:
                kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{prefix}{name}: expected true/false")
            else:
                kwargs[name] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors.append(f"{prefix}{name}: expected a number")
            elif isinstance(default, int) and not float(value).is_integer():
                errors.append(f"{prefix}{name}: expected an integer")
            else:
                kwargs[name] = type(default)(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                errors.append(f"{prefix}{name}: expected a string")
            else:
                kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    errors: list[str] = []
    cfg = _build(ExperimentConfig, data, "", errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config: file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"config: invalid JSON ({e})"])
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Dotted-key overrides (``train.rl_steps``); unknown keys are errors like in the file."""
    data = to_dict(cfg)
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(data)
