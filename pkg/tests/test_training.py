import numpy as np
import pytest

from rbm import autodiff as ad
from rbm.evaluator import Evaluator, EvaluatorConfig
from rbm.generator import Generator, GeneratorConfig
from rbm.metrics import rouge_l
from rbm.optim import OptimizerState
from rbm.rl import RLConfig
from rbm.synth import synth_corpus
from rbm.text import Sentence, build_vocab
from rbm.training import (MissingRequirementError, TrainConfig, apply_gradients, linear_schedule,
                          pretrain_generator, train_evaluator_sl, train_rbm_irl, train_rbm_sl)


@pytest.fixture(scope="module")
def data():
    c = synth_corpus(0, 200)
    pos = [p.to_pair() for p in c.train]
    neg = [p.to_pair() for p in c.negatives]
    test = [p.to_pair() for p in c.test]
    pool = [Sentence.of(s) for s in c.nonparallel]
    vocab = build_vocab([p.x.text for p in pos] + [p.y.text for p in pos] + [s.text for s in pool])
    return pos, neg, test, pool, vocab


def _models(vocab, seed=0):
    g = Generator(vocab, GeneratorConfig(emb_dim=8, hidden=12, attn_dim=8, out_hidden=12), np.random.default_rng(seed))
    e = Evaluator(vocab, EvaluatorConfig(emb_dim=8, hidden=8), np.random.default_rng(seed + 1))
    return g, e


def _quick(**kw):
    base = dict(mle_epochs=1, eval_epochs=1, rl_steps=2, rl_eval_every=1, heldout_size=10,
                irl_alternations=1, irl_inner_steps=3, irl_outer_steps=1, irl_eval_batch=16)
    base.update(kw)
    return TrainConfig(**base)


def test_linear_schedule():
    assert linear_schedule(15, 8, 4) == pytest.approx([15, 15 - 7 / 3, 15 - 14 / 3, 8])
    assert linear_schedule(12, 3, 1) == [3]


def test_pretraining_reduces_likelihood_loss(data):
    pos, _, test, _, vocab = data
    g, _ = _models(vocab)
    xs, ys = [p.x for p in test], [p.y for p in test]
    with ad.no_grad():
        before = float(g.mle_loss_batch(xs, ys).data)
    pretrain_generator(g, pos, _quick(mle_epochs=2), np.random.default_rng(0))
    with ad.no_grad():
        after = float(g.mle_loss_batch(xs, ys).data)
    assert after < before


def test_evaluator_sl_separates(data):
    pos, neg, _, _, vocab = data
    _, e = _models(vocab)
    train_evaluator_sl(e, pos, neg, _quick(eval_epochs=3), np.random.default_rng(0))
    s_pos = e.scores([p.x for p in pos[:80]], [p.y for p in pos[:80]]).mean()
    s_neg = e.scores([p.x for p in neg[:80]], [p.y for p in neg[:80]]).mean()
    assert s_pos > s_neg
    with pytest.raises(MissingRequirementError):
        train_evaluator_sl(e, pos, [], _quick(), np.random.default_rng(0))


def test_rbm_sl_requires_negatives(data):
    pos, _, _, pool, vocab = data
    g, e = _models(vocab)
    with pytest.raises(MissingRequirementError):
        train_rbm_sl(pos, [], pool, g, e, _quick(), RLConfig(batch_size=4), np.random.default_rng(0))


def test_nonparallel_only_rl_consumes_no_references(data):
    pos, neg, _, pool, vocab = data
    g, e = _models(vocab)
    digest = e.digest()
    cfg = _quick(nonparallel_fraction=1.0, use_ground_truth=False)
    _, stats = train_rbm_sl(pos, neg, pool, g, e, cfg, RLConfig(batch_size=4, n_rollouts=2),
                            np.random.default_rng(0), evaluator_trained=True, generator_pretrained=True)
    assert stats.steps == 2 and stats.references_consumed == 0
    assert e.digest() == digest and g.version == 2


def test_fixed_minibatch_hinge_non_increasing(data):
    pos, _, _, _, vocab = data
    g, e = _models(vocab, seed=3)
    batch = pos[:16]
    xs, refs = [p.x for p in batch], [p.y.tokens for p in batch]
    gens = [o.tokens or ("<unk>",) for o in g.generate(xs, greedy=False, seed=1)]
    z = [rouge_l(o, r) for o, r in zip(gens, refs)]
    state = OptimizerState("adagrad", 0.01, 2.0, 0.1)
    trace = []
    for _ in range(10):
        e.zero_grad()
        loss = e.hinge_loss_batch(xs, refs, gens, z)
        trace.append(float(loss.data))
        ad.backward(loss)
        apply_gradients(e, state)
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))
    assert trace[-1] < trace[0]


def test_irl_with_frozen_generator_trains_evaluator_only(data):
    pos, _, test, pool, vocab = data
    g, e = _models(vocab)
    g_digest, e_digest = g.digest(), e.digest()
    _, _, stats = train_rbm_irl(pos, pool, g, e, _quick(irl_inner_steps=4), RLConfig(lr=0.0, batch_size=4),
                                np.random.default_rng(0), heldout=test, generator_pretrained=True, probe_size=16)
    assert g.digest() == g_digest and e.digest() != e_digest
    assert len(stats.probe_hinge) == 1 and len(stats.probe_hinge[0]) == 5
    assert 0 <= stats.margin_before <= 1 and 0 <= stats.margin_after <= 1


def test_irl_anneals_schedules(data):
    pos, _, _, pool, vocab = data
    g, e = _models(vocab)
    cfg = _quick(irl_alternations=4, irl_inner_steps=1, irl_outer_steps=1)
    _, _, stats = train_rbm_irl(pos, pool, g, e, cfg, RLConfig(batch_size=4, n_rollouts=1),
                                np.random.default_rng(0), generator_pretrained=True, probe_size=8)
    d3, d1 = stats.delta3_trace, stats.delta1_trace
    assert d3[0] == 15 and d3[-1] == 8 and all(b < a for a, b in zip(d3, d3[1:]))
    assert d1[0] == 12 and d1[-1] == 3
