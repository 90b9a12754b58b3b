"""Training loops: MLE pretraining, evaluator SL, RbM-SL, RbM-IRL and RL-ROUGE."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .evaluator import Evaluator, curriculum_weights
from .generator import Generator
from .metrics import MetricReport, corpus_report, rouge_l
from .nn import Module
from .optim import OptimizerState, optimizer_step
from .rl import (BaselineTracker, EvaluatorReward, RLConfig, RougeReward, ema_baseline,
                 make_records, mc_values_batch, policy_gradient_step, rescale_records)
from .text import ParaphrasePair, Sentence

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = [
    "schema_version", "phase", "epoch", "step", "mle_loss", "sl_loss", "sl_accuracy",
    "mean_raw_reward", "mean_rescaled_reward", "hinge_loss", "margin_satisfaction_rate",
    "delta1", "delta3", "heldout_reward", "heldout_rouge1", "heldout_rouge2",
    "heldout_rougeL", "heldout_bleu",
]


class MissingRequirementError(ValueError):
    """A training mode was started without data it cannot run without."""


@dataclass
class TrainConfig:
    mle_epochs: int = 10
    mle_batch: int = 32
    mle_lr: float = 0.1
    mle_init_accumulator: float = 0.1
    eval_epochs: int = 10
    eval_batch: int = 32
    eval_lr: float = 0.05
    irl_eval_batch: int = 80
    irl_eval_lr: float = 3e-3          # Adam; hinge gradients are too small for Adagrad's 0.1 accumulator
    rl_steps: int = 200
    rl_eval_every: int = 50
    irl_alternations: int = 4
    irl_inner_steps: int = 50
    irl_outer_steps: int = 50
    nonparallel_fraction: float = 0.5
    use_ground_truth: bool = True
    heldout_size: int = 200
    max_norm: float = 2.0
    early_stop_patience: int = 0        # evaluations without held-out improvement; 0 disables


class MetricsLog:
    def __init__(self):
        self.rows: list[dict] = []

    def add(self, phase: str, epoch: int, step: int, **values) -> dict:
        unknown = set(values) - set(METRICS_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        row = {c: "" for c in METRICS_COLUMNS}
        row.update(schema_version=METRICS_SCHEMA_VERSION, phase=phase, epoch=epoch, step=step)
        for k, v in values.items():
            row[k] = "" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
        self.rows.append(row)
        logger.info("%s epoch=%s step=%s %s", phase, epoch, step,
                    " ".join(f"{k}={row[k]}" for k in values if row[k] != ""))
        return row

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows)
        return path

    def last(self, phase: str | None = None) -> dict | None:
        for row in reversed(self.rows):
            if phase is None or row["phase"] == phase:
                return row
        return None


def apply_gradients(module: Module, state: OptimizerState) -> float:
    norm = optimizer_step(state, module.params, module.grads())
    module.version += 1
    return norm


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i:i + size]


# evaluation -----------------------------------------------------------------

def decode_greedy(generator: Generator, xs: Sequence[Sentence], chunk: int = 256) -> list[tuple[str, ...]]:
    out = []
    for i in range(0, len(xs), chunk):
        out.extend(g.tokens for g in generator.generate(list(xs[i:i + chunk]), greedy=True))
    return out


def evaluate_generator(generator: Generator, pairs: Sequence[ParaphrasePair],
                       evaluator: Evaluator | None = None) -> tuple[MetricReport, float | None, list]:
    """Greedy outputs scored against references (and by the evaluator when given)."""
    xs = [p.x for p in pairs]
    outs = decode_greedy(generator, xs)
    report = corpus_report([o for o in outs], [p.y.tokens for p in pairs])
    reward = None
    if evaluator is not None:
        reward = float(np.mean(EvaluatorReward(evaluator).batch(xs, outs, range(len(xs)))))
    return report, reward, outs


def _heldout_columns(generator, heldout, evaluator) -> dict:
    if not heldout:
        return {}
    rep, reward, _ = evaluate_generator(generator, heldout, evaluator)
    return dict(heldout_reward=reward, heldout_rouge1=rep.rouge1, heldout_rouge2=rep.rouge2,
                heldout_rougeL=rep.rougeL, heldout_bleu=rep.bleu)


def evaluator_accuracy(evaluator: Evaluator, pairs: Sequence[ParaphrasePair]) -> float:
    if not pairs:
        return float("nan")
    s = evaluator.scores([p.x for p in pairs], [p.y for p in pairs])
    labels = np.array([p.label for p in pairs])
    return float(np.mean((s > 0.5).astype(int) == labels))


def margin_satisfaction(evaluator: Evaluator, xs, refs, gens) -> float:
    """Fraction of triples whose hinge is inactive: M(X,Y) - M(X,Y_gen) >= 1 - ROUGE-L(Y_gen, Y)."""
    if not xs:
        return float("nan")
    zetas = np.array([rouge_l(g, r) for g, r in zip(gens, refs)])
    m_ref = evaluator.scores(list(xs), list(refs))
    m_gen = evaluator.scores(list(xs), [g if len(g) else ("<unk>",) for g in gens])
    return float(np.mean(m_ref - m_gen >= 1.0 - zetas))


# supervised phases ------------------------------------------------------------

def pretrain_generator(generator: Generator, pairs: Sequence[ParaphrasePair], cfg: TrainConfig,
                       rng: np.random.Generator, log: MetricsLog | None = None,
                       heldout: Sequence[ParaphrasePair] = (), evaluator: Evaluator | None = None) -> Generator:
    """Teacher-forced maximum likelihood with Adagrad and global-norm clipping."""
    pairs = [p for p in pairs if p.positive]
    if not pairs:
        raise MissingRequirementError("pretraining needs positive paraphrase pairs")
    state = OptimizerState("adagrad", cfg.mle_lr, cfg.max_norm, cfg.mle_init_accumulator)
    step = 0
    for epoch in range(1, cfg.mle_epochs + 1):
        losses = []
        for idx in _batches(len(pairs), cfg.mle_batch, rng):
            batch = [pairs[i] for i in idx]
            generator.zero_grad()
            loss = generator.mle_loss_batch([p.x for p in batch], [p.y for p in batch])
            ad.backward(loss)
            apply_gradients(generator, state)
            losses.append(float(loss.data))
            step += 1
        if log is not None:
            log.add("pretrain", epoch, step, mle_loss=float(np.mean(losses)),
                    **_heldout_columns(generator, heldout, evaluator))
    return generator


def train_evaluator_sl(evaluator: Evaluator, positives: Sequence[ParaphrasePair],
                       negatives: Sequence[ParaphrasePair], cfg: TrainConfig, rng: np.random.Generator,
                       log: MetricsLog | None = None, heldout: Sequence[ParaphrasePair] = ()) -> Evaluator:
    """Pointwise cross-entropy on labelled pairs (Adagrad)."""
    if not negatives:
        raise MissingRequirementError("supervised evaluator training needs negative (non-paraphrase) pairs")
    if not positives:
        raise MissingRequirementError("supervised evaluator training needs positive pairs")
    data = [(p, 1) for p in positives] + [(p, 0) for p in negatives]
    state = OptimizerState("adagrad", cfg.eval_lr, cfg.max_norm, 0.1)
    step = 0
    for epoch in range(1, cfg.eval_epochs + 1):
        losses = []
        for idx in _batches(len(data), cfg.eval_batch, rng):
            pos = [data[i][0] for i in idx if data[i][1] == 1]
            neg = [data[i][0] for i in idx if data[i][1] == 0]
            evaluator.zero_grad()
            loss = evaluator.sl_loss_batch([p.x for p in pos], [p.y for p in pos],
                                           [p.x for p in neg], [p.y for p in neg])
            ad.backward(loss)
            apply_gradients(evaluator, state)
            losses.append(float(loss.data))
            step += 1
        if log is not None:
            log.add("train-eval-sl", epoch, step, sl_loss=float(np.mean(losses)),
                    sl_accuracy=evaluator_accuracy(evaluator, heldout) if heldout else None)
    return evaluator


# reinforcement learning ---------------------------------------------------------

@dataclass
class RLStats:
    steps: int = 0
    references_consumed: int = 0
    raw_rewards: list[float] = field(default_factory=list)
    rescaled_rewards: list[float] = field(default_factory=list)


def _sample_inputs(pairs, pool, n, frac, rng):
    """Draw n inputs; each from the non-parallel pool with probability ``frac``."""
    items = []
    for _ in range(n):
        if pool and (not pairs or rng.random() < frac):
            items.append((pool[int(rng.integers(len(pool)))], None))
        else:
            p = pairs[int(rng.integers(len(pairs)))]
            items.append((p.x, p.y))
    return items


def rl_phase(generator: Generator, reward, pairs: Sequence[ParaphrasePair], pool: Sequence[Sentence],
             steps: int, cfg: TrainConfig, rl: RLConfig, rng: np.random.Generator,
             state: OptimizerState, delta1: float, log: MetricsLog | None = None, phase: str = "rl",
             heldout: Sequence[ParaphrasePair] = (), evaluator: Evaluator | None = None,
             stats: RLStats | None = None, epoch_offset: int = 0, baseline: BaselineTracker | None = None,
             nonparallel_fraction: float | None = None, on_eval=None) -> RLStats:
    """Policy-gradient steps against ``reward``.

    With ``baseline`` the values are used raw minus an EMA baseline (RL-ROUGE);
    otherwise they are rank-rescaled. ``on_eval(step)`` runs at every evaluation
    boundary (the CLI writes checkpoints there).
    """
    stats = stats or RLStats()
    frac = cfg.nonparallel_fraction if nonparallel_fraction is None else nonparallel_fraction
    window_raw, window_resc = [], []
    best, stale = -np.inf, 0
    for s in range(1, steps + 1):
        if baseline is not None:
            items = _sample_inputs(pairs, [], rl.batch_size, 0.0, rng)
            idx = [i for i in range(len(items))]
            reward.references = [y for _, y in items]
        else:
            items = _sample_inputs(pairs, pool, rl.batch_size, frac, rng)
            idx = list(range(len(items)))
        xs = [x for x, _ in items]
        gens = generator.generate(xs, greedy=False, rng=rng)
        values = mc_values_batch(gens, generator, reward, rl.n_rollouts, rng, idx)
        records = make_records(gens, values)
        raw = [r.reward for r in records]
        if baseline is None:
            rescale_records(records, delta1, rl.delta2)
        else:
            for r in records:
                r.rescaled_values = r.values - baseline.value
                r.rescaled_reward = r.reward - baseline.value
            stats.references_consumed += len(items)
        gt = []
        if cfg.use_ground_truth:
            gt = [(x, y) for x, y in items if y is not None]
            stats.references_consumed += len(gt)
        policy_gradient_step(records, generator, state, gt, rl.ground_truth_reward)
        if baseline is not None:
            baseline = ema_baseline(baseline, float(np.mean(raw)))
        stats.steps += 1
        stats.raw_rewards.append(float(np.mean(raw)))
        stats.rescaled_rewards.append(float(np.mean([r.rescaled_reward for r in records])))
        window_raw.append(stats.raw_rewards[-1])
        window_resc.append(stats.rescaled_rewards[-1])
        if s % cfg.rl_eval_every == 0 or s == steps:
            held = _heldout_columns(generator, heldout, evaluator)
            if log is not None:
                log.add(phase, epoch_offset + (s + cfg.rl_eval_every - 1) // cfg.rl_eval_every, stats.steps,
                        mean_raw_reward=float(np.mean(window_raw)),
                        mean_rescaled_reward=float(np.mean(window_resc)),
                        delta1=delta1 if baseline is None else None, **held)
            window_raw, window_resc = [], []
            if on_eval is not None:
                on_eval(stats.steps)
            if cfg.early_stop_patience and held:
                score = held["heldout_reward"] if held["heldout_reward"] is not None else held["heldout_rouge1"]
                if score > best:
                    best, stale = score, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        logger.info("%s: held-out plateau, stopping at step %d", phase, stats.steps)
                        break
    stats.baseline = baseline
    return stats


def train_rbm_sl(pairs: Sequence[ParaphrasePair], negatives: Sequence[ParaphrasePair],
                 pool: Sequence[Sentence], generator: Generator, evaluator: Evaluator,
                 cfg: TrainConfig, rl: RLConfig, rng: np.random.Generator,
                 log: MetricsLog | None = None, heldout: Sequence[ParaphrasePair] = (),
                 evaluator_trained: bool = False, generator_pretrained: bool = False,
                 on_eval=None) -> tuple[Generator, RLStats]:
    """Evaluator by supervised learning (then frozen), generator by MLE then policy gradient."""
    if not negatives and not evaluator_trained:
        raise MissingRequirementError("RbM-SL needs a corpus of non-paraphrase pairs")
    if not evaluator_trained:
        train_evaluator_sl(evaluator, pairs, negatives, cfg, rng, log)
    if not generator_pretrained:
        pretrain_generator(generator, pairs, cfg, rng, log, heldout, evaluator)
    frozen = evaluator.digest()
    state = OptimizerState("adam", rl.lr, rl.max_norm)
    stats = rl_phase(generator, EvaluatorReward(evaluator), pairs, pool, cfg.rl_steps, cfg, rl, rng,
                     state, rl.delta1, log, "rbm-sl", heldout, evaluator, on_eval=on_eval)
    if evaluator.digest() != frozen:
        raise RuntimeError("evaluator parameters changed during RbM-SL reinforcement learning")
    return generator, stats


def linear_schedule(start: float, end: float, n: int) -> list[float]:
    if n <= 1:
        return [end] if n == 1 else []
    return [start + (end - start) * i / (n - 1) for i in range(n)]


@dataclass
class IRLStats:
    rl: RLStats
    delta1_trace: list[float] = field(default_factory=list)
    delta3_trace: list[float] = field(default_factory=list)
    probe_hinge: list[list[float]] = field(default_factory=list)   # per alternation: start, then each inner step
    margin_before: float = float("nan")
    margin_after: float = float("nan")


def _triples(generator: Generator, pairs: Sequence[ParaphrasePair], rng, greedy=False):
    gens = generator.generate([p.x for p in pairs], greedy=greedy, rng=rng)
    return [p.x for p in pairs], [p.y.tokens for p in pairs], [g.tokens for g in gens]


def evaluator_irl_step(evaluator: Evaluator, generator: Generator, batch: Sequence[ParaphrasePair],
                       delta3: float, state: OptimizerState, rng: np.random.Generator) -> float:
    """One curriculum-weighted hinge step on freshly generated paraphrases."""
    xs, refs, gens = _triples(generator, batch, rng)
    gens = [g if len(g) else ("<unk>",) for g in gens]
    zetas = [rouge_l(g, r) for g, r in zip(gens, refs)]
    weights = [w.weight for w in curriculum_weights(list(batch), delta3, rng=rng)]
    evaluator.zero_grad()
    loss = evaluator.hinge_loss_batch(xs, refs, gens, zetas, weights)
    ad.backward(loss)
    apply_gradients(evaluator, state)
    return float(loss.data)


def train_rbm_irl(pairs: Sequence[ParaphrasePair], pool: Sequence[Sentence], generator: Generator,
                  evaluator: Evaluator, cfg: TrainConfig, rl: RLConfig, rng: np.random.Generator,
                  log: MetricsLog | None = None, heldout: Sequence[ParaphrasePair] = (),
                  generator_pretrained: bool = False, probe_size: int = 64,
                  on_eval=None) -> tuple[Generator, Evaluator, IRLStats]:
    """Alternate curriculum max-margin evaluator updates with generator policy-gradient updates."""
    pairs = [p for p in pairs if p.positive]
    if not pairs:
        raise MissingRequirementError("RbM-IRL needs positive paraphrase pairs")
    if not generator_pretrained:
        pretrain_generator(generator, pairs, cfg, rng, log, heldout)
    probe_pairs = [pairs[int(i)] for i in rng.choice(len(pairs), size=min(probe_size, len(pairs)), replace=False)]
    probe = _triples(generator, probe_pairs, rng)
    probe_gens = [g if len(g) else ("<unk>",) for g in probe[2]]
    probe_z = [rouge_l(g, r) for g, r in zip(probe_gens, probe[1])]
    audit = heldout[: cfg.heldout_size] if heldout else probe_pairs
    audit_triples = _triples(generator, audit, np.random.default_rng(int(rng.integers(2**31))))

    stats = IRLStats(RLStats())
    stats.margin_before = margin_satisfaction(evaluator, *audit_triples)
    d1s = linear_schedule(*rl.delta1_schedule, cfg.irl_alternations)
    d3s = linear_schedule(*rl.delta3_schedule, cfg.irl_alternations)
    ev_state = OptimizerState("adam", cfg.irl_eval_lr, cfg.max_norm)
    gen_state = OptimizerState("adam", rl.lr, rl.max_norm)
    for a, (d1, d3) in enumerate(zip(d1s, d3s), 1):
        stats.delta1_trace.append(d1)
        stats.delta3_trace.append(d3)
        def probe_hinge():
            with ad.no_grad():
                return float(evaluator.hinge_loss_batch(probe[0], probe[1], probe_gens, probe_z).data)
        probe_trace = [probe_hinge()]        # value before the first inner step, then after each one
        losses = []
        for _ in range(cfg.irl_inner_steps):
            idx = rng.choice(len(pairs), size=min(cfg.irl_eval_batch, len(pairs)), replace=False)
            losses.append(evaluator_irl_step(evaluator, generator, [pairs[int(i)] for i in idx], d3, ev_state, rng))
            probe_trace.append(probe_hinge())
        stats.probe_hinge.append(probe_trace)
        margin = margin_satisfaction(evaluator, *audit_triples)
        if log is not None:
            log.add("rbm-irl-evaluator", a, ev_state.step, hinge_loss=float(np.mean(losses)) if losses else None,
                    margin_satisfaction_rate=margin, delta1=d1, delta3=d3)
        rl_phase(generator, EvaluatorReward(evaluator), pairs, pool, cfg.irl_outer_steps, cfg, rl, rng,
                 gen_state, d1, log, "rbm-irl-generator", heldout, evaluator, stats.rl,
                 epoch_offset=(a - 1) * max(1, -(-cfg.irl_outer_steps // cfg.rl_eval_every)), on_eval=on_eval)
    stats.margin_after = margin_satisfaction(evaluator, *audit_triples)
    return generator, evaluator, stats


def train_rl_rouge(pairs: Sequence[ParaphrasePair], generator: Generator, cfg: TrainConfig, rl: RLConfig,
                   rng: np.random.Generator, log: MetricsLog | None = None,
                   heldout: Sequence[ParaphrasePair] = (), generator_pretrained: bool = False,
                   on_eval=None) -> tuple[Generator, RLStats]:
    """Policy gradient with ROUGE-2 reward and an EMA baseline instead of rank rescaling."""
    pairs = [p for p in pairs if p.positive]
    if not pairs:
        raise MissingRequirementError("RL-ROUGE needs paraphrase pairs with references")
    if not generator_pretrained:
        pretrain_generator(generator, pairs, cfg, rng, log, heldout)
    state = OptimizerState("adam", rl.lr, rl.max_norm)
    stats = rl_phase(generator, RougeReward([]), pairs, [], cfg.rl_steps, cfg, rl, rng, state,
                     rl.delta1, log, "rl-rouge", heldout, None,
                     baseline=BaselineTracker(rl.ema_lambda), on_eval=on_eval)
    return generator, stats
