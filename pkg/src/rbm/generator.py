"""Pointer-generator sequence model: LSTM encoder, additive attention, copy mixture.

Output distributions live on an extended vocabulary: the fixed vocabulary
followed by the out-of-vocabulary surface tokens of the current input, so
rare input words can be copied even though the embedding table never sees them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, linear, lstm_cell
from .text import EOS_ID, MAX_LEN, PAD_ID, SOS_ID, UNK_ID, EOS, Sentence, Vocab

PROB_FLOOR = 1e-12
_NEG = -1e30


@dataclass
class GeneratorConfig:
    emb_dim: int = 32
    hidden: int = 64
    attn_dim: int = 32
    out_hidden: int = 64
    bidirectional: bool = False
    max_len: int = MAX_LEN


# batched containers ---------------------------------------------------------

@dataclass
class SourceBatch:
    ids: np.ndarray          # (B, S) fixed-vocab ids, PAD beyond length
    ext_ids: np.ndarray      # (B, S) extended ids
    lengths: np.ndarray      # (B,)
    neg_mask: np.ndarray     # (B, S) 0 on tokens, -1e30 on padding
    copy_map: np.ndarray     # (B, S, V_ext) one-hot of ext id per position
    oovs: list[list[str]]
    vocab_size: int

    @property
    def ext_size(self) -> int:
        return self.copy_map.shape[-1]

    def ext_id(self, b: int, token: str, vocab: Vocab) -> int:
        if token in vocab:
            return vocab.id(token)
        if token in self.oovs[b]:
            return self.vocab_size + self.oovs[b].index(token)
        return UNK_ID

    def surface(self, b: int, ext_id: int, vocab: Vocab) -> str:
        if ext_id < self.vocab_size:
            return vocab.token(ext_id)
        return self.oovs[b][ext_id - self.vocab_size]


@dataclass
class Encoded:
    """Encoder states for a batch (tensors so gradients reach the encoder)."""
    src: SourceBatch
    states: Tensor           # (B, S, H_enc)
    keys: Tensor             # (B, S, A) precomputed attention projection of the states
    h0: Tensor               # (B, H)
    c0: Tensor               # (B, H)

    def rows(self, idx: np.ndarray) -> "Encoded":
        """Graph-free copy restricted to the given batch rows (for rollouts)."""
        s = self.src
        src = SourceBatch(s.ids[idx], s.ext_ids[idx], s.lengths[idx], s.neg_mask[idx],
                          s.copy_map[idx], [s.oovs[i] for i in idx], s.vocab_size)
        return Encoded(src, Tensor(self.states.data[idx]), Tensor(self.keys.data[idx]),
                       Tensor(self.h0.data[idx]), Tensor(self.c0.data[idx]))


@dataclass
class EncoderOutput:
    hidden_states: np.ndarray   # (S, H_enc)
    final_state: tuple[np.ndarray, np.ndarray]

    def __len__(self) -> int:
        return self.hidden_states.shape[0]


@dataclass
class StepDistribution:
    probs: np.ndarray            # over the extended vocabulary
    alpha: np.ndarray            # attention over input positions
    q: float                     # generation (vs copy) switch
    context: np.ndarray
    state: tuple[np.ndarray, np.ndarray]
    ext_tokens: list[str]        # surface form of each extended id

    def prob_of(self, token: str) -> float:
        return float(self.probs[self.ext_tokens.index(token)]) if token in self.ext_tokens else 0.0


@dataclass
class Generation:
    source: Sentence
    ext_ids: list[int]           # realized actions, EOS included when emitted
    tokens: tuple[str, ...]      # surface tokens, EOS excluded
    logprobs: np.ndarray         # log p of each realized action
    h_states: np.ndarray         # (T + 1, H) decoder states before/after each action
    c_states: np.ndarray
    version: int                 # generator parameter version used
    distributions: list[StepDistribution] = field(default_factory=list)

    @property
    def sentence(self) -> Sentence:
        return Sentence(self.tokens)

    @property
    def finished(self) -> bool:
        return bool(self.ext_ids) and self.ext_ids[-1] == EOS_ID


class Generator(Module):
    def __init__(self, vocab: Vocab, config: GeneratorConfig | None = None,
                 rng: np.random.Generator | None = None):
        super().__init__(rng)
        self.vocab = vocab
        self.config = cfg = config or GeneratorConfig()
        V, E, H, A, O = len(vocab), cfg.emb_dim, cfg.hidden, cfg.attn_dim, cfg.out_hidden
        henc = 2 * H if cfg.bidirectional else H
        self.enc_dim = henc
        self.add_param("embedding", (V, E))
        self.add_param("enc_w", (E + H, 4 * H))
        self.add_param("enc_b", (4 * H,))
        if cfg.bidirectional:
            self.add_param("enc_bw_w", (E + H, 4 * H))
            self.add_param("enc_bw_b", (4 * H,))
            self.add_param("reduce_h", (2 * H, H))
            self.add_param("reduce_c", (2 * H, H))
        self.add_param("dec_w", (E + henc + H, 4 * H))
        self.add_param("dec_b", (4 * H,))
        self.add_param("attn_ws", (H, A))
        self.add_param("attn_wh", (henc, A))
        self.add_param("attn_b", (A,))
        self.add_param("attn_v", (A, 1))
        feat = H + henc + E
        self.add_param("out_w1", (feat, O))
        self.add_param("out_b1", (O,))
        self.add_param("out_w2", (O, V))
        self.add_param("out_b2", (V,))
        self.add_param("switch_w", (feat, 1))
        self.add_param("switch_b", (1,))

    def meta(self) -> dict:
        return {"kind": "generator", "config": asdict(self.config), "vocab": self.vocab.tokens()}

    # batching ---------------------------------------------------------------

    def source_batch(self, xs: Sequence[Sentence]) -> SourceBatch:
        if not xs:
            raise ValueError("empty batch")
        V = len(self.vocab)
        B = len(xs)
        lengths = np.array([len(x) for x in xs], dtype=np.int64)
        if lengths.min() < 1:
            raise ValueError("cannot encode an empty sentence")
        if lengths.max() > self.config.max_len:
            raise ValueError(f"input longer than {self.config.max_len} tokens")
        S = int(lengths.max())
        ids = np.full((B, S), PAD_ID, dtype=np.int64)
        ext = np.full((B, S), PAD_ID, dtype=np.int64)
        oovs: list[list[str]] = []
        for b, x in enumerate(xs):
            row_oov: list[str] = []
            for i, tok in enumerate(x.tokens):
                if tok in self.vocab:
                    ids[b, i] = ext[b, i] = self.vocab.id(tok)
                else:
                    ids[b, i] = UNK_ID
                    if tok not in row_oov:
                        row_oov.append(tok)
                    ext[b, i] = V + row_oov.index(tok)
            oovs.append(row_oov)
        n_ext = V + max(len(o) for o in oovs)
        mask = np.arange(S)[None, :] < lengths[:, None]
        copy_map = np.zeros((B, S, n_ext))
        bb, ii = np.nonzero(mask)
        copy_map[bb, ii, ext[bb, ii]] = 1.0
        return SourceBatch(ids, ext, lengths, np.where(mask, 0.0, _NEG), copy_map, oovs, V)

    # encoder ----------------------------------------------------------------

    def _run_lstm(self, emb: Tensor, w: Tensor, b: Tensor) -> list[Tensor]:
        B, S = emb.shape[0], emb.shape[1]
        H = self.config.hidden
        h = c = Tensor(np.zeros((B, H)))
        outs = []
        for i in range(S):
            h, c = lstm_cell(emb[:, i, :], h, c, w, b)
            outs.append((h, c))
        return outs

    def encode_batch(self, src: SourceBatch) -> Encoded:
        P = self.params
        B, S = src.ids.shape
        emb = ad.gather_rows(P["embedding"], src.ids)
        fwd = self._run_lstm(emb, P["enc_w"], P["enc_b"])
        states = ad.stack([h for h, _ in fwd], axis=1)
        last = src.lengths - 1
        rows = np.arange(B)
        h_last = ad.index(states, (rows, last))
        c_last = ad.index(ad.stack([c for _, c in fwd], axis=1), (rows, last))
        if self.config.bidirectional:
            # per-row reversal of the real tokens; padding stays in place
            rev = np.tile(np.arange(S), (B, 1))
            for b_, n in enumerate(src.lengths):
                rev[b_, :n] = np.arange(n)[::-1]
            emb_r = ad.gather_rows(P["embedding"], src.ids[rows[:, None], rev])
            bwd = self._run_lstm(emb_r, P["enc_bw_w"], P["enc_bw_b"])
            states_r = ad.stack([h for h, _ in bwd], axis=1)
            states_b = ad.index(states_r, (rows[:, None], rev))
            hb = ad.index(states_r, (rows, last))
            cb = ad.index(ad.stack([c for _, c in bwd], axis=1), (rows, last))
            states = ad.concat([states, states_b], axis=-1)
            h_last = ad.tanh(ad.matmul(ad.concat([h_last, hb], axis=-1), P["reduce_h"]))
            c_last = ad.matmul(ad.concat([c_last, cb], axis=-1), P["reduce_c"])
        keys = ad.matmul(states, P["attn_wh"])
        return Encoded(src, states, keys, h_last, c_last)

    # decoder ----------------------------------------------------------------

    def attend_batch(self, enc: Encoded, h_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Attention weights over input positions from the previous decoder state."""
        P = self.params
        B = h_prev.shape[0]
        query = ad.reshape(ad.add(ad.matmul(h_prev, P["attn_ws"]), P["attn_b"]), (B, 1, -1))
        hidden = ad.tanh(ad.add(enc.keys, query))
        scores = ad.reshape(ad.matmul(hidden, P["attn_v"]), (B, -1))
        alpha = ad.softmax(ad.add(scores, enc.src.neg_mask), axis=-1)
        ctx = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, -1)), enc.states), (B, -1))
        return ctx, alpha

    def mixture_batch(self, enc: Encoded, h: Tensor, ctx: Tensor, emb: Tensor,
                      alpha: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """q * g(w) + (1 - q) * copy mass of w, over the extended vocabulary."""
        P = self.params
        B = h.shape[0]
        feat = ad.concat([h, ctx, emb], axis=-1)
        hidden = ad.tanh(linear(feat, P["out_w1"], P["out_b1"]))
        g = ad.softmax(linear(hidden, P["out_w2"], P["out_b2"]), axis=-1)
        q = ad.sigmoid(linear(feat, P["switch_w"], P["switch_b"]))
        copy = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, -1)), enc.src.copy_map), (B, -1))
        n_extra = enc.src.ext_size - enc.src.vocab_size
        if n_extra:
            g = ad.concat([g, Tensor(np.zeros((B, n_extra)))], axis=-1)
        probs = ad.add(ad.mul(q, g), ad.mul(ad.sub(1.0, q), copy))
        return probs, q, g

    def step_batch(self, enc: Encoded, h: Tensor, c: Tensor, prev_ext: np.ndarray):
        """One decoder step. Returns probs, alpha, q, context, new (h, c)."""
        P = self.params
        prev = np.where(prev_ext >= enc.src.vocab_size, UNK_ID, prev_ext)
        emb = ad.gather_rows(P["embedding"], prev)
        ctx, alpha = self.attend_batch(enc, h)
        h2, c2 = lstm_cell(ad.concat([emb, ctx], axis=-1), h, c, P["dec_w"], P["dec_b"])
        probs, q, _ = self.mixture_batch(enc, h2, ctx, emb, alpha)
        return probs, alpha, q, ctx, h2, c2

    # teacher forcing ---------------------------------------------------------

    def target_ext_ids(self, src: SourceBatch, ys: Sequence[Sentence], append_eos: bool = True) -> np.ndarray:
        rows = []
        for b, y in enumerate(ys):
            r = [src.ext_id(b, t, self.vocab) for t in y.tokens]
            if append_eos:
                r.append(EOS_ID)
            rows.append(r)
        return _pad(rows)

    def token_logprobs(self, xs: Sequence[Sentence], targets: np.ndarray | Sequence[Sentence],
                       src: SourceBatch | None = None) -> tuple[Tensor, np.ndarray]:
        """Teacher-forced log p(target_t | target_<t, x) for every position.

        ``targets`` is either a list of reference sentences (EOS appended) or a
        padded array of extended ids (-1 = padding) such as generated actions.
        Returns a (B, T) tensor and the (B, T) validity mask.
        """
        src = src or self.source_batch(xs)
        if not isinstance(targets, np.ndarray):
            targets = self.target_ext_ids(src, targets)
        B, T = targets.shape
        mask = targets >= 0
        enc = self.encode_batch(src)
        h, c = enc.h0, enc.c0
        prev = np.full(B, SOS_ID, dtype=np.int64)
        rows = np.arange(B)
        out = []
        for t in range(T):
            probs, _, _, _, h, c = self.step_batch(enc, h, c, prev)
            tgt = np.where(mask[:, t], targets[:, t], PAD_ID)
            picked = ad.index(probs, (rows, tgt))
            # padded positions read log(p + 1) and are masked out later
            picked = ad.add(picked, (~mask[:, t]).astype(float))
            out.append(ad.log(picked, floor=PROB_FLOOR))
            prev = tgt
        return ad.stack(out, axis=1), mask

    def mle_loss_batch(self, xs: Sequence[Sentence], ys: Sequence[Sentence]) -> Tensor:
        """Mean over the batch of the summed token negative log-likelihood."""
        lp, mask = self.token_logprobs(xs, ys)
        return ad.mul(ad.sum_(ad.mul(lp, mask.astype(float))), -1.0 / len(xs))

    # decoding ---------------------------------------------------------------

    def _decode_rows(self, enc: Encoded, h: np.ndarray, c: np.ndarray, prev: np.ndarray,
                     start_len: np.ndarray, greedy: bool, rng: np.random.Generator | None,
                     keep_dists: bool = False, max_len: int | None = None):
        """Continue decoding every row until EOS or ``max_len`` actions in total."""
        max_len = max_len or self.config.max_len
        R = h.shape[0]
        actions: list[list[int]] = [[] for _ in range(R)]
        logps: list[list[float]] = [[] for _ in range(R)]
        hs = [[h[r]] for r in range(R)]
        cs = [[c[r]] for r in range(R)]
        dists: list[list] = [[] for _ in range(R)]
        active = start_len < max_len
        h_t, c_t = Tensor(h), Tensor(c)
        prev = prev.copy()
        step = 0
        with ad.no_grad():
            while active.any():
                probs, alpha, q, ctx, h_t, c_t = self.step_batch(enc, h_t, c_t, prev)
                p = probs.data
                if greedy:
                    choice = p.argmax(axis=1)
                else:
                    u = rng.random(R)
                    cdf = np.cumsum(p, axis=1)
                    choice = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
                    choice = np.minimum(choice, p.shape[1] - 1)
                for r in np.nonzero(active)[0]:
                    a = int(choice[r])
                    actions[r].append(a)
                    logps[r].append(float(np.log(max(p[r, a], PROB_FLOOR))))
                    hs[r].append(h_t.data[r])
                    cs[r].append(c_t.data[r])
                    if keep_dists:
                        dists[r].append((p[r].copy(), alpha.data[r].copy(), float(q.data[r, 0]),
                                         ctx.data[r].copy(), h_t.data[r].copy(), c_t.data[r].copy()))
                    if a == EOS_ID or start_len[r] + len(actions[r]) >= max_len:
                        active[r] = False
                prev = choice
                step += 1
        return actions, logps, hs, cs, dists

    def generate(self, xs: Sequence[Sentence], greedy: bool = True, seed: int | None = None,
                 rng: np.random.Generator | None = None, max_len: int | None = None,
                 keep_dists: bool = False) -> list[Generation]:
        if not greedy and rng is None:
            rng = np.random.default_rng(seed)
        src = self.source_batch(xs)
        with ad.no_grad():
            enc = self.encode_batch(src)
        B = len(xs)
        actions, logps, hs, cs, dists = self._decode_rows(
            enc, enc.h0.data, enc.c0.data, np.full(B, SOS_ID), np.zeros(B, dtype=np.int64),
            greedy, rng, keep_dists, max_len)
        out = []
        for b in range(B):
            ext_tokens = self.vocab.itos + src.oovs[b]
            step_dists = [StepDistribution(p[: len(ext_tokens)], a[: len(xs[b])], q, ctx, (h, c), ext_tokens)
                          for p, a, q, ctx, h, c in dists[b]]
            out.append(self._make_generation(xs[b], src, b, actions[b], logps[b], hs[b], cs[b], step_dists))
        return out

    def _make_generation(self, x, src, b, acts, lps, hs, cs, dists=()) -> Generation:
        surface = tuple(src.surface(b, a, self.vocab) for a in acts if a != EOS_ID)
        return Generation(x, list(acts), surface, np.array(lps), np.array(hs), np.array(cs),
                          self.version, list(dists))

    def continue_batch(self, enc: Encoded, rows: np.ndarray, prefixes: Sequence[Sequence[int]],
                       h: np.ndarray, c: np.ndarray, rng: np.random.Generator,
                       max_len: int | None = None) -> list[list[int]]:
        """Sample completions after the given prefixes; returns full action lists.

        ``rows`` maps each continuation to its source row in ``enc``; ``h``/``c``
        are the decoder states reached after consuming each prefix.
        """
        max_len = max_len or self.config.max_len
        sub = enc.rows(rows)
        done = np.array([bool(p) and p[-1] == EOS_ID for p in prefixes])
        lens = np.array([len(p) for p in prefixes], dtype=np.int64)
        prev = np.array([p[-1] if p else SOS_ID for p in prefixes], dtype=np.int64)
        out = [list(p) for p in prefixes]
        todo = np.nonzero(~done & (lens < max_len))[0]
        if len(todo):
            sub2 = sub.rows(todo)
            acts, _, _, _, _ = self._decode_rows(sub2, h[todo], c[todo], prev[todo], lens[todo],
                                                 greedy=False, rng=rng, max_len=max_len)
            for k, r in enumerate(todo):
                out[r].extend(acts[k])
        return out

    def surface_of(self, src: SourceBatch, b: int, actions: Sequence[int]) -> tuple[str, ...]:
        return tuple(src.surface(b, a, self.vocab) for a in actions if a != EOS_ID)


def _pad(rows: Sequence[Sequence[int]], fill: int = -1) -> np.ndarray:
    T = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), max(T, 1)), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def pad_actions(rows: Sequence[Sequence[int]]) -> np.ndarray:
    return _pad(rows)


# single-example operations ----------------------------------------------------

def encode(x: Sentence, model: Generator) -> EncoderOutput:
    if len(x) == 0:
        raise ValueError("cannot encode an empty sentence")
    with ad.no_grad():
        enc = model.encode_batch(model.source_batch([x]))
    return EncoderOutput(enc.states.data[0].copy(), (enc.h0.data[0].copy(), enc.c0.data[0].copy()))


def _single_encoded(model: Generator, x: Sentence, H: EncoderOutput) -> Encoded:
    src = model.source_batch([x])
    states = Tensor(H.hidden_states[None])
    keys = Tensor(H.hidden_states[None] @ model.params["attn_wh"].data)
    return Encoded(src, states, keys, Tensor(H.final_state[0][None]), Tensor(H.final_state[1][None]))


def attend(s_prev: np.ndarray, H: EncoderOutput, model: Generator,
           x: Sentence | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Context vector and attention weights for one decoder state."""
    if len(H) == 0:
        raise ValueError("attention over an empty encoder output")
    x = x or Sentence(tuple([EOS] * len(H)))
    enc = _single_encoded(model, x, H)
    with ad.no_grad():
        ctx, alpha = model.attend_batch(enc, Tensor(np.asarray(s_prev)[None]))
    return ctx.data[0], alpha.data[0]


def step_distribution(s_t: np.ndarray, c_t: np.ndarray, alpha_t: np.ndarray, y_prev: str,
                      x: Sentence, model: Generator) -> StepDistribution:
    """Mixture distribution given decoder state, context and attention weights."""
    src = model.source_batch([x])
    enc = Encoded(src, Tensor(np.zeros((1, len(x), model.enc_dim))), Tensor(np.zeros((1, len(x), 1))),
                  Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))))
    prev = src.ext_id(0, y_prev, model.vocab) if y_prev != "<s>" else SOS_ID
    prev = UNK_ID if prev >= src.vocab_size else prev
    with ad.no_grad():
        emb = ad.gather_rows(model.params["embedding"], np.array([prev]))
        probs, q, _ = model.mixture_batch(enc, Tensor(np.asarray(s_t)[None]), Tensor(np.asarray(c_t)[None]),
                                          emb, Tensor(np.asarray(alpha_t)[None]))
    ext_tokens = model.vocab.itos + src.oovs[0]
    return StepDistribution(probs.data[0], np.asarray(alpha_t), float(q.data[0, 0]), np.asarray(c_t),
                            (np.asarray(s_t), np.zeros_like(s_t)), ext_tokens)


def mle_loss(pair, model: Generator) -> Tensor:
    """Teacher-forced negative log-likelihood of one positive pair (EOS included)."""
    if len(pair.y) == 0:
        raise ValueError("target sentence is empty")
    return model.mle_loss_batch([pair.x], [pair.y])


def sample_or_greedy(x: Sentence, model: Generator, mode: str = "greedy", seed: int | None = None,
                     max_len: int = MAX_LEN) -> Generation:
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    return model.generate([x], greedy=(mode == "greedy"), seed=seed, max_len=max_len, keep_dists=True)[0]


def prefix_state(model: Generator, x: Sentence, prefix: Sequence[int]) -> tuple[Encoded, np.ndarray, np.ndarray]:
    """Decoder state after teacher-forcing ``prefix`` (extended ids) on input ``x``."""
    src = model.source_batch([x])
    with ad.no_grad():
        enc = model.encode_batch(src)
        h, c = enc.h0, enc.c0
        prev = np.array([SOS_ID])
        for a in prefix:
            _, _, _, _, h, c = model.step_batch(enc, h, c, prev)
            prev = np.array([a])
    return enc, h.data, c.data


def rollout_continuations(x: Sentence, prefix: Sequence[int], N: int, model: Generator,
                          seed: int | None = None, max_len: int | None = None) -> list[list[int]]:
    """N sampled completions of ``prefix``; each returned list starts with the prefix verbatim."""
    if N < 1:
        raise ValueError("N must be at least 1")
    prefix = list(prefix)
    enc, h, c = prefix_state(model, x, prefix)
    rng = np.random.default_rng(seed)
    rows = np.zeros(N, dtype=np.int64)
    return model.continue_batch(enc, rows, [prefix] * N, np.repeat(h, N, 0), np.repeat(c, N, 0),
                                rng, max_len)
