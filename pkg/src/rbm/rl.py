"""Policy-gradient fine-tuning pieces: Monte-Carlo values, rank rescaling, baseline."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import _sigmoid_np
from .evaluator import Evaluator, match_score
from .generator import Generation, Generator, pad_actions
from .metrics import rouge_n
from .optim import OptimizerState, optimizer_step
from .ranking import competition_rank
from .text import UNK, Sentence


class StaleSnapshotError(RuntimeError):
    """Raised when rollouts were produced by different generator parameters."""


@dataclass
class RLConfig:
    delta1: float = 12.0
    delta2: float = 1.0
    delta1_schedule: tuple[float, float] = (12.0, 3.0)
    delta3_schedule: tuple[float, float] = (15.0, 8.0)
    n_rollouts: int = 4
    batch_size: int = 80
    lr: float = 1e-5
    ground_truth_reward: float = 0.1
    ema_lambda: float = 0.1
    max_norm: float = 2.0

    def validate(self) -> list[str]:
        errs = []
        for name in ("delta1", "delta2"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be > 0")
        for name in ("delta1_schedule", "delta3_schedule"):
            if len(getattr(self, name)) != 2 or min(getattr(self, name)) <= 0:
                errs.append(f"{name} must be two positive values")
        if self.n_rollouts < 1:
            errs.append("n_rollouts must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not 0 < self.ema_lambda < 1:
            errs.append("ema_lambda must lie in (0, 1)")
        if self.lr < 0:
            errs.append("lr must be >= 0")
        return errs


# rewards --------------------------------------------------------------------

def _nonempty(tokens: Sequence[str]) -> tuple[str, ...]:
    # an immediate EOS is scored as a lone unknown token
    return tuple(tokens) if len(tokens) else (UNK,)


class EvaluatorReward:
    """R = M(X, Y_hat) from a (possibly frozen) evaluator."""

    def __init__(self, evaluator: Evaluator):
        self.evaluator = evaluator

    def batch(self, xs: Sequence[Sentence], ys: Sequence[Sequence[str]], idx: Sequence[int]) -> np.ndarray:
        return self.evaluator.scores(list(xs), [_nonempty(y) for y in ys])

    def single(self, x: Sentence, y: Sequence[str], i: int) -> float:
        return match_score(x, Sentence(_nonempty(y)), self.evaluator)


class RougeReward:
    """ROUGE-2 against the reference of each input (the RL-ROUGE baseline)."""

    def __init__(self, references: Sequence[Sentence], n: int = 2):
        self.references = list(references)
        self.n = n

    def batch(self, xs, ys, idx) -> np.ndarray:
        return np.array([rouge_n(tuple(y), self.references[i].tokens, self.n) for y, i in zip(ys, idx)])

    def single(self, x, y, i) -> float:
        return rouge_n(tuple(y), self.references[i].tokens, self.n)


@dataclass
class RolloutRecord:
    x: Sentence
    generation: Generation
    values: np.ndarray                   # Q_1..Q_T
    rescaled_values: np.ndarray | None = None
    rescaled_reward: float | None = None
    version: int = 0

    @property
    def reward(self) -> float:
        return float(self.values[-1])

    @property
    def logprobs(self) -> np.ndarray:
        return self.generation.logprobs


# Monte-Carlo values ---------------------------------------------------------

def mc_values_batch(gens: Sequence[Generation], generator: Generator, reward,
                    N: int, rng: np.random.Generator, idx: Sequence[int] | None = None) -> list[np.ndarray]:
    """Q_t for every generated action: mean reward of N completions for t < T, R at t = T."""
    if N < 1:
        raise ValueError("N must be at least 1")
    idx = list(range(len(gens))) if idx is None else list(idx)
    xs = [g.source for g in gens]
    src = generator.source_batch(xs)
    with ad.no_grad():
        enc = generator.encode_batch(src)

    rows, prefixes, hs, cs, owners = [], [], [], [], []
    for b, g in enumerate(gens):
        T = len(g.ext_ids)
        for t in range(1, T):
            for _ in range(N):
                rows.append(b)
                prefixes.append(g.ext_ids[:t])
                hs.append(g.h_states[t])
                cs.append(g.c_states[t])
                owners.append((b, t))
    values = [np.zeros(len(g.ext_ids)) for g in gens]
    if rows:
        rows_a = np.array(rows)
        full = generator.continue_batch(enc, rows_a, prefixes, np.array(hs), np.array(cs), rng)
        surf = [generator.surface_of(src, b, acts) for b, acts in zip(rows, full)]
        scores = reward.batch([xs[b] for b in rows], surf, [idx[b] for b in rows])
        for (b, t), s in zip(owners, scores):
            values[b][t - 1] += s
        for v in values:
            v[:-1] /= N
    for b, g in enumerate(gens):
        if len(g.ext_ids):
            values[b][-1] = reward.single(xs[b], g.tokens, idx[b])
    return values


def mc_values(x: Sentence, y_hat: Generation, N: int, generator: Generator, evaluator: Evaluator,
              seed: int | None = None) -> np.ndarray:
    """Per-position value estimates of one generated sequence against an evaluator."""
    return mc_values_batch([y_hat], generator, EvaluatorReward(evaluator), N, np.random.default_rng(seed))[0]


# rescaling ------------------------------------------------------------------

def rescale_rewards(rewards, delta1: float) -> np.ndarray:
    """Rank-based rewards in (-0.5, 0.5); rank 1 is the largest raw reward."""
    r = np.asarray(rewards, dtype=float)
    D = len(r)
    if D == 0:
        return r
    if D == 1:
        return r - r.mean()
    ranks = competition_rank(r, descending=True)
    return _sigmoid_np(delta1 * (0.5 - ranks / D)) - 0.5


def rescale_values(values, rescaled_reward: float, delta2: float) -> np.ndarray:
    """In-sequence rank rescaling of Q_1..Q_T, shifted by the sequence's rescaled reward."""
    q = np.asarray(values, dtype=float)
    T = len(q)
    if T < 1:
        raise ValueError("need at least one value")
    ranks = competition_rank(q, descending=True)
    return _sigmoid_np(delta2 * (0.5 - ranks / T)) - 0.5 + rescaled_reward


def rescale_records(records: Sequence[RolloutRecord], delta1: float, delta2: float) -> None:
    rbar = rescale_rewards([r.reward for r in records], delta1)
    for rec, rb in zip(records, rbar):
        rec.rescaled_reward = float(rb)
        rec.rescaled_values = rescale_values(rec.values, rb, delta2)


# baseline -------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineTracker:
    lam: float = 0.1
    value: float = 0.0
    m: int = 1


def ema_baseline(tracker: BaselineTracker, q_mean_prev: float) -> BaselineTracker:
    """b_m = lam * Qbar_{m-1} + (1 - lam) * b_{m-1}."""
    return replace(tracker, value=tracker.lam * q_mean_prev + (1 - tracker.lam) * tracker.value,
                   m=tracker.m + 1)


# policy gradient ------------------------------------------------------------

def reinforce_surrogate(logprobs: ad.Tensor, weights: np.ndarray, mask: np.ndarray, n: int) -> ad.Tensor:
    """Negative of sum_t w_t log p(a_t), averaged over ``n`` sequences.

    Its gradient is minus the REINFORCE estimate, so descending it ascends reward.
    """
    w = np.where(mask, weights, 0.0)
    return ad.mul(ad.sum_(ad.mul(logprobs, w)), -1.0 / max(n, 1))


def policy_gradient_step(records: Sequence[RolloutRecord], generator: Generator, state: OptimizerState,
                         ground_truth: Sequence[tuple[Sentence, Sentence]] = (),
                         ground_truth_reward: float = 0.1) -> float:
    """One ascent step on sum_t grad log p(y_t) * Qbar_t, plus reference pairs at a fixed reward.

    Returns the surrogate loss value.
    """
    for r in records:
        if r.version != generator.version or r.generation.version != generator.version:
            raise StaleSnapshotError("rollout records predate the current generator parameters")
        if r.rescaled_values is None:
            raise ValueError("records must carry rescaled values")
    n = len(records) + len(ground_truth)
    generator.zero_grad()
    total = None
    if records:
        actions = pad_actions([r.generation.ext_ids for r in records])
        lp, mask = generator.token_logprobs([r.x for r in records], actions)
        w = np.zeros(actions.shape)
        for i, r in enumerate(records):
            w[i, : len(r.rescaled_values)] = r.rescaled_values
        total = reinforce_surrogate(lp, w, mask, n)
    if ground_truth:
        lp_gt, mask_gt = generator.token_logprobs([x for x, _ in ground_truth], [y for _, y in ground_truth])
        gt = reinforce_surrogate(lp_gt, np.full(mask_gt.shape, ground_truth_reward), mask_gt, n)
        total = gt if total is None else ad.add(total, gt)
    if total is None:
        return 0.0
    ad.backward(total)
    optimizer_step(state, generator.params, generator.grads())
    generator.version += 1
    return float(total.data)


def make_records(gens: Sequence[Generation], values: Sequence[np.ndarray]) -> list[RolloutRecord]:
    return [RolloutRecord(g.source, g, v, version=g.version) for g, v in zip(gens, values)]
