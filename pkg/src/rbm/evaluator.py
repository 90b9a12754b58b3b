"""Decomposable-attention matching model with sinusoidal positional encodings.

Both sentences are embedded (embedding + positional encoding), soft-aligned
against each other, compared position-wise, summed, and aggregated into a
single sigmoid score. The same head serves the supervised classifier and the
max-margin ranking regimes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, linear
from .ranking import competition_rank
from .text import MAX_LEN, PAD_ID, UNK_ID, Sentence, Vocab, token_edit_distance

PROB_FLOOR = 1e-12
_NEG = -1e30


@dataclass
class EvaluatorConfig:
    emb_dim: int = 32
    hidden: int = 32
    use_positional: bool = True
    max_len: int = MAX_LEN


def positional_encoding(position: int, dim: int, max_len: int = MAX_LEN) -> np.ndarray:
    """Sine on even dimensions, cosine on odd ones, wavelengths growing geometrically."""
    if not 0 <= position < max_len:
        raise ValueError(f"position {position} outside [0, {max_len})")
    i = np.arange(dim)
    rates = 1.0 / np.power(10000.0, (i - i % 2) / dim)
    angles = position * rates
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


def positional_table(length: int, dim: int) -> np.ndarray:
    return np.stack([positional_encoding(p, dim, max(length, 1)) for p in range(length)]) \
        if length else np.zeros((0, dim))


class Evaluator(Module):
    def __init__(self, vocab: Vocab, config: EvaluatorConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__(rng)
        self.vocab = vocab
        self.config = cfg = config or EvaluatorConfig()
        V, E, Hd = len(vocab), cfg.emb_dim, cfg.hidden
        self.add_param("embedding", (V, E))
        self.add_param("attend_w", (E, Hd))
        self.add_param("attend_b", (Hd,))
        self.add_param("compare_w", (2 * E, Hd))
        self.add_param("compare_b", (Hd,))
        self.add_param("aggregate_w", (2 * Hd, Hd))
        self.add_param("aggregate_b", (Hd,))
        self.add_param("out_w", (Hd, 1))
        self.add_param("out_b", (1,))
        self._pe = positional_table(cfg.max_len, E)

    def meta(self) -> dict:
        return {"kind": "evaluator", "config": asdict(self.config), "vocab": self.vocab.tokens()}

    def _ids(self, sents: Sequence[Sequence[str]]) -> tuple[np.ndarray, np.ndarray]:
        L = max(len(s) for s in sents)
        ids = np.full((len(sents), L), PAD_ID, dtype=np.int64)
        for b, s in enumerate(sents):
            if len(s) == 0:
                raise ValueError("cannot score an empty sentence")
            if len(s) > self.config.max_len:
                raise ValueError(f"sentence longer than {self.config.max_len} tokens")
            ids[b, : len(s)] = [self.vocab.stoi.get(t, UNK_ID) for t in s]
        mask = np.arange(L)[None, :] < np.array([len(s) for s in sents])[:, None]
        return ids, mask

    def _embed(self, ids: np.ndarray) -> Tensor:
        e = ad.gather_rows(self.params["embedding"], ids)
        if self.config.use_positional:
            e = ad.add(e, self._pe[: ids.shape[1]])
        return e

    def logits_batch(self, xs: Sequence, ys: Sequence) -> Tensor:
        """Pre-sigmoid scores, shape (B,). Accepts Sentences or token sequences."""
        P = self.params
        xs = [getattr(s, "tokens", s) for s in xs]
        ys = [getattr(s, "tokens", s) for s in ys]
        if len(xs) != len(ys):
            raise ValueError("xs and ys differ in length")
        xi, xm = self._ids(xs)
        yi, ym = self._ids(ys)
        B = len(xs)
        a = self._embed(xi)                         # (B, S, E)
        b = self._embed(yi)                         # (B, T, E)
        fa = ad.relu(linear(a, P["attend_w"], P["attend_b"]))
        fb = ad.relu(linear(b, P["attend_w"], P["attend_b"]))
        e = ad.matmul(fa, ad.swap_last(fb))         # (B, S, T)
        x_neg = np.where(xm, 0.0, _NEG)
        y_neg = np.where(ym, 0.0, _NEG)
        beta = ad.softmax(ad.add(e, y_neg[:, None, :]), axis=-1)
        x_bar = ad.matmul(beta, b)                  # y aligned to each x_i
        alpha = ad.softmax(ad.add(ad.swap_last(e), x_neg[:, None, :]), axis=-1)
        y_bar = ad.matmul(alpha, a)                 # x aligned to each y_j
        v1 = ad.relu(linear(ad.concat([a, x_bar], axis=-1), P["compare_w"], P["compare_b"]))
        v2 = ad.relu(linear(ad.concat([b, y_bar], axis=-1), P["compare_w"], P["compare_b"]))
        v1 = ad.sum_(ad.mul(v1, xm[:, :, None].astype(float)), axis=1)
        v2 = ad.sum_(ad.mul(v2, ym[:, :, None].astype(float)), axis=1)
        h = ad.relu(linear(ad.concat([v1, v2], axis=-1), P["aggregate_w"], P["aggregate_b"]))
        return ad.reshape(linear(h, P["out_w"], P["out_b"]), (B,))

    def score_batch(self, xs: Sequence, ys: Sequence) -> Tensor:
        return ad.sigmoid(self.logits_batch(xs, ys))

    def scores(self, xs: Sequence, ys: Sequence, chunk: int = 2048) -> np.ndarray:
        """Graph-free scores, computed in chunks."""
        out = []
        with ad.no_grad():
            for i in range(0, len(xs), chunk):
                out.append(self.score_batch(xs[i:i + chunk], ys[i:i + chunk]).data)
        return np.concatenate(out) if out else np.zeros(0)

    # losses -----------------------------------------------------------------

    def sl_loss_batch(self, pos_x: Sequence, pos_y: Sequence, neg_x: Sequence, neg_y: Sequence) -> Tensor:
        """Mean of -log M(X, Y) over positives plus mean of -log(1 - M(X, Y-)) over negatives."""
        terms = []
        if len(pos_x):
            m = self.score_batch(pos_x, pos_y)
            terms.append(ad.mean(ad.log(m, floor=PROB_FLOOR)))
        if len(neg_x):
            m = self.score_batch(neg_x, neg_y)
            terms.append(ad.mean(ad.log(ad.sub(1.0, m), floor=PROB_FLOOR)))
        total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
        return ad.mul(total, -1.0)

    def hinge_terms(self, xs: Sequence, refs: Sequence, gens: Sequence, zetas) -> Tensor:
        """Per-example max(0, 1 - zeta + M(X, Y_gen) - M(X, Y_ref)), shape (B,)."""
        zetas = np.asarray(zetas, dtype=float)
        if np.any((zetas < 0) | (zetas > 1)):
            raise ValueError("zeta must lie in [0, 1]")
        B = len(xs)
        both = self.score_batch(list(xs) + list(xs), list(refs) + list(gens))
        m_ref = both[:B]
        m_gen = both[B:]
        return ad.relu(ad.add(ad.sub(m_gen, m_ref), 1.0 - zetas))

    def hinge_loss_batch(self, xs, refs, gens, zetas, weights=None) -> Tensor:
        """Weighted mean of hinge terms (weights are the curriculum draws)."""
        terms = self.hinge_terms(xs, refs, gens, zetas)
        w = np.ones(len(xs)) if weights is None else np.asarray(weights, dtype=float)
        return ad.mul(ad.sum_(ad.mul(terms, w)), 1.0 / len(xs))


# single-example operations ----------------------------------------------------

def match_score(x: Sentence, y: Sentence, model: Evaluator) -> float:
    return float(model.scores([x], [y])[0])


def sl_loss(pos: tuple[Sentence, Sentence], neg: tuple[Sentence, Sentence], model: Evaluator) -> Tensor:
    return model.sl_loss_batch([pos[0]], [pos[1]], [neg[0]], [neg[1]])


def irl_hinge_loss(x: Sentence, y_ref: Sentence, y_gen: Sentence, model: Evaluator, zeta: float) -> Tensor:
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"zeta={zeta} outside [0, 1]")
    return ad.reshape(model.hinge_terms([x], [y_ref], [y_gen], [zeta]), ())


# curriculum -------------------------------------------------------------------

@dataclass
class CurriculumWeight:
    index: int
    distance: int
    rank: int
    probability: float
    weight: int
    temperature: float


def inclusion_probabilities(ranks, K: int, delta3: float) -> np.ndarray:
    """sigmoid(delta3 * (0.5 - rank / K)) per example."""
    ranks = np.asarray(ranks, dtype=float)
    return ad._sigmoid_np(delta3 * (0.5 - ranks / K))


def curriculum_weights(pairs: Sequence, delta3: float, seed=None,
                       rng: np.random.Generator | None = None) -> list[CurriculumWeight]:
    """Bernoulli inclusion weights favouring pairs with small X/Y edit distance.

    Rank 1 is the easiest (smallest distance); tied distances share the lower rank.
    """
    K = len(pairs)
    if K < 1:
        raise ValueError("curriculum needs at least one example")
    rng = rng if rng is not None else np.random.default_rng(seed)
    dist = [token_edit_distance(p[0], p[1]) if isinstance(p, tuple) else token_edit_distance(p.x, p.y)
            for p in pairs]
    ranks = competition_rank(dist, descending=False)
    probs = inclusion_probabilities(ranks, K, delta3)
    draws = (rng.random(K) < probs).astype(int)
    return [CurriculumWeight(k, int(dist[k]), int(ranks[k]), float(probs[k]), int(draws[k]), delta3)
            for k in range(K)]
