"""Acceptance criteria, one test each; every test reports a single PASS/FAIL line.

The lines are printed as the test runs (visible with ``-s``) and repeated in the
pytest terminal summary. Tolerances are the ones pinned by the criteria.
Criteria 7 and 8 train real models and take several minutes each.
"""
import json
import math
import time

import numpy as np
import pytest

from rbm import autodiff as ad
from rbm.evaluator import (Evaluator, EvaluatorConfig, curriculum_weights, inclusion_probabilities,
                           match_score)
from rbm.generator import Generator, GeneratorConfig, step_distribution
from rbm.metrics import bleu2, rouge_l, rouge_n
from rbm.rl import RLConfig, mc_values, reinforce_surrogate, rescale_rewards, rescale_values
from rbm.synth import synth_corpus
from rbm.text import EOS_ID, Sentence, Vocab, build_vocab
from rbm.training import (MetricsLog, TrainConfig, evaluate_generator, evaluator_accuracy, pretrain_generator,
                          train_evaluator_sl, train_rbm_irl, train_rbm_sl)

from conftest import ACCEPTANCE_LINES, S, fd_check, rescale_params, toy_evaluator, toy_generator
from test_metrics import scripted_bleu2


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line, flush=True)
    assert ok, line


# 1 -------------------------------------------------------------------------------

def test_criterion_01_gradients():
    t0 = time.time()
    errs = {}
    for bi in (False, True):
        g = toy_generator(seed=2, bidirectional=bi)
        assert g.num_params() <= 100
        xs, ys = [S("a zeta b"), S("b a")], [S("zeta a b"), S("a a")]
        errs[f"generator(bidirectional={bi})"] = fd_check(lambda: g.mle_loss_batch(xs, ys), list(g.params.values()))
    for pe in (True, False):
        ev = toy_evaluator(seed=1, use_positional=pe)
        assert ev.num_params() <= 100
        pos, neg = [(S("a b"), S("b a zeta")), (S("b"), S("b b"))], [(S("a a b"), S("b")), (S("a"), S("b a"))]
        errs[f"evaluator-sl(positional={pe})"] = fd_check(
            lambda: ev.sl_loss_batch([p[0] for p in pos], [p[1] for p in pos], [n[0] for n in neg],
                                     [n[1] for n in neg]), list(ev.params.values()))
        xs, refs, gens = [S("a b"), S("b")], [S("b a"), S("b b a")], [S("a"), S("a a")]
        errs[f"evaluator-hinge(positional={pe})"] = fd_check(
            lambda: ev.hinge_loss_batch(xs, refs, gens, [0.2, 0.0]), list(ev.params.values()))
    worst = max(errs.values())
    dt = time.time() - t0
    report(1, worst < 1e-4 and dt < 60,
           f"max relative FD error {worst:.2e} (< 1e-4) over {len(errs)} toy checks in {dt:.1f}s (< 60s)")


# 2 -------------------------------------------------------------------------------

def _grouped_estimate(samples, grad_of):
    """Mean and standard error of per-sample gradients, grouping identical samples."""
    keys, counts = np.unique(samples, axis=0, return_counts=True)
    n = counts.sum()
    grads = np.array([grad_of(tuple(k)) for k in keys])
    w = counts[:, None] / n
    mean = (w * grads).sum(0)
    var = (w * grads ** 2).sum(0) - mean ** 2
    return mean, np.sqrt(np.maximum(var, 0) / n)


def _reinforce_grad(params, logprob_terms, reward):
    """Per-sample REINFORCE gradient through the library surrogate (negated back to ascent)."""
    for p in params:
        p.grad = None
    lp = ad.reshape(ad.stack(logprob_terms(), axis=0), (1, -1))
    T = lp.shape[1]
    loss = reinforce_surrogate(lp, np.full((1, T), reward), np.ones((1, T), bool), 1)
    grads = ad.backward(loss)
    return -np.concatenate([grads.get(p, np.zeros(p.shape)).reshape(-1) for p in params])


def test_criterion_02_policy_gradient_unbiased():
    t0 = time.time()
    n = 100_000
    rng = np.random.default_rng(2024)
    worst = 0.0
    # 2 actions, 1 step
    theta = ad.parameter(np.array([0.3, -0.2]))
    r = np.array([1.0, 0.3])
    p = ad._softmax_np(theta.data, -1)
    acts = rng.choice(2, size=(n, 1), p=p)
    mean, se = _grouped_estimate(acts, lambda k: _reinforce_grad(
        [theta], lambda: [ad.index(ad.log_softmax(theta), k[0])], r[k[0]]))
    exact = p * (r - p @ r)
    z1 = np.abs(mean - exact) / se
    worst = max(worst, z1.max())
    # 3 tokens, 2 steps, tabular: 3 + 9 logits
    t1 = ad.parameter(rng.normal(size=3))
    t2 = ad.parameter(rng.normal(size=(3, 3)))
    R = rng.random((3, 3))
    p1 = ad._softmax_np(t1.data, -1)
    p2 = ad._softmax_np(t2.data, -1)
    a1 = rng.choice(3, size=n, p=p1)
    a2 = (rng.random(n)[:, None] > np.cumsum(p2[a1], axis=1)).sum(1)
    mean, se = _grouped_estimate(np.stack([a1, a2], 1), lambda k: _reinforce_grad(
        [t1, t2], lambda: [ad.index(ad.log_softmax(t1), k[0]), ad.index(ad.log_softmax(t2[k[0]]), k[1])],
        R[k[0], k[1]]))
    # enumeration oracle: differentiate the exact expected reward directly
    t1.grad = t2.grad = None
    J = ad.sum_(ad.mul(ad.mul(ad.reshape(ad.softmax(t1), (3, 1)), ad.softmax(t2, axis=-1)), R))
    g = ad.backward(J)
    exact2 = np.concatenate([g[t1].reshape(-1), g[t2].reshape(-1)])
    z2 = np.abs(mean - exact2) / se
    worst = max(worst, z2.max())
    dt = time.time() - t0
    report(2, worst <= 3 and dt < 120,
           f"max |mean - exact| / SE = {worst:.2f} (<= 3) over {len(z1) + len(z2)} coordinates, "
           f"{n} samples each, {dt:.1f}s (< 120s)")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_mc_values():
    vocab = Vocab(["a", "b"])
    g = Generator(vocab, GeneratorConfig(emb_dim=2, hidden=2, attn_dim=2, out_hidden=2, max_len=2),
                  np.random.default_rng(5))
    rescale_params(g, seed=5)
    g.params["out_b2"].data[:4] -= 50.0          # only "a" and "b" carry probability
    ev = toy_evaluator(seed=6)
    x = S("a b")
    gen = g.generate([x], greedy=False, seed=3)[0]
    assert len(gen.ext_ids) == 2 and EOS_ID not in gen.ext_ids
    N = 10_000
    q = mc_values(x, gen, N, g, ev, seed=11)
    # enumeration oracle from teacher-forced probabilities (independent of the rollout sampler)
    src = g.source_batch([x])
    ext_tokens = vocab.itos + src.oovs[0]
    first = ext_tokens[gen.ext_ids[0]]
    probs, scores = [], []
    for y in range(len(ext_tokens)):
        with ad.no_grad():
            lp, _ = g.token_logprobs([x], np.array([[gen.ext_ids[0], y]]))
        probs.append(math.exp(lp.data[0, 1]))
        tokens = (first,) if y == EOS_ID else (first, ext_tokens[y])
        scores.append(match_score(x, Sentence(tokens), ev))
    probs, scores = np.array(probs), np.array(scores)
    expect = float(probs @ scores)
    sigma = math.sqrt(max(float(probs @ scores ** 2) - expect ** 2, 0.0) / N)
    z = abs(q[0] - expect) / sigma
    exact_t = q[-1] == match_score(x, gen.sentence, ev)
    report(3, z <= 3 and exact_t,
           f"Q_1 = {q[0]:.6f} vs enumeration {expect:.6f} ({z:.2f} sigma, N = {N}); "
           f"Q_T bitwise equal to evaluator score: {exact_t}")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_rescaling():
    a = rescale_rewards([0.9, 0.3], 12.0)
    b = rescale_rewards([0.1, 0.8, 0.3, 0.2], 12.0)
    ok = abs(a[0] - 0.0) < 1e-5 and abs(a[1] + 0.49753) < 1e-5 and abs(b[1] - 0.45257) < 1e-5
    rng = np.random.default_rng(4)
    props = True
    for _ in range(500):
        D = int(rng.integers(2, 40))
        raw = rng.random(D)
        k = float(np.exp(rng.normal(0, 3)))
        props &= np.array_equal(rescale_rewards(raw, 12.0), rescale_rewards(raw * k, 12.0))
        qs = rng.random(int(rng.integers(1, 20)))
        v = rescale_values(qs, float(rng.uniform(-0.5, 0.5)), 1.0)
        order = np.argsort(-qs)
        props &= bool(np.all(np.diff(v[order]) < 0))
    report(4, ok and props,
           f"R = {a[0]:.5f}, {a[1]:.5f} (D=2) and {b[1]:.5f} (D=4, rank 1); "
           f"scale invariance and order preservation over 500 random cases: {props}")


# 5 -------------------------------------------------------------------------------

def test_criterion_05_metrics():
    r1 = rouge_n("how far is earth from sun".split(), "what is the distance between sun and earth".split(), 1)
    rl = rouge_l("a b c".split(), "a x c".split())
    s = "a b c d".split()
    ident = [rouge_n(s, s, 1), rouge_n(s, s, 2), rouge_l(s, s), bleu2(s, s)]
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        c = list(rng.choice(list("abcdefg"), size=int(rng.integers(1, 12))))
        r = list(rng.choice(list("abcdefg"), size=int(rng.integers(1, 12))))
        worst = max(worst, abs(bleu2(c, r) - scripted_bleu2(c, r)))
    ok = r1 == 0.375 and abs(rl - 2 / 3) < 1e-9 and ident == [1.0] * 4 and worst < 1e-9
    report(5, ok, f"ROUGE-1 = {r1}, ROUGE-L = {rl:.12f}, identities = {ident}, "
                  f"max BLEU deviation from scripted oracle {worst:.1e} over 50 pairs")


# 6 -------------------------------------------------------------------------------

def test_criterion_06_evaluator_sl():
    t0 = time.time()
    c = synth_corpus(11, 5600)
    pos = [p.to_pair() for p in c.positives]
    neg = [p.to_pair() for p in c.negatives]
    rng = np.random.default_rng(0)
    pi, ni = rng.permutation(len(pos)), rng.permutation(len(neg))
    train_p, train_n = [pos[i] for i in pi[:5000]], [neg[i] for i in ni[:5000]]
    held = [pos[i] for i in pi[5000:]] + [neg[i] for i in ni[5000:]]
    vocab = build_vocab([p.x.tokens for p in train_p + train_n] + [p.y.tokens for p in train_p + train_n], 5000)
    ev = Evaluator(vocab, rng=np.random.default_rng(1))
    train_evaluator_sl(ev, train_p, train_n, TrainConfig(eval_epochs=10), rng)
    acc = evaluator_accuracy(ev, held)
    dt = time.time() - t0
    report(6, acc >= 0.90 and dt < 600,
           f"held-out accuracy {acc:.4f} (>= 0.90) on {len(held)} pairs after 10 epochs, {dt:.0f}s (< 600s)")


# 7 -------------------------------------------------------------------------------

# fine-tuning protocol chosen on development seeds 1-4; acceptance uses seeds never used for tuning
C7_SEEDS = (11, 12, 13, 14, 15)
C7_RL = dict(lr=1e-4)
C7_STEPS = 100
C7_MLE_EPOCHS = 5


def _c7_seed(seed):
    c = synth_corpus(seed, 5000)
    train = [p.to_pair() for p in c.train]
    test = [p.to_pair() for p in c.test]
    neg = [p.to_pair() for p in c.negatives]
    pool = [Sentence.of(s) for s in c.nonparallel]
    vocab = build_vocab([p.x.tokens for p in train + neg] + [p.y.tokens for p in train + neg]
                        + [s.tokens for s in pool], 5000)
    rng = np.random.default_rng(seed)
    ev = Evaluator(vocab, rng=np.random.default_rng(seed + 1))
    gen = Generator(vocab, rng=np.random.default_rng(seed + 2))
    cfg = TrainConfig(mle_epochs=C7_MLE_EPOCHS, rl_steps=C7_STEPS, rl_eval_every=C7_STEPS)
    train_evaluator_sl(ev, train, neg, cfg, rng)
    pretrain_generator(gen, train, cfg, rng)
    before, reward_before, _ = evaluate_generator(gen, test, ev)
    train_rbm_sl(train, neg, pool, gen, ev, cfg, RLConfig(**C7_RL), rng, MetricsLog(), test,
                 evaluator_trained=True, generator_pretrained=True)
    after, reward_after, _ = evaluate_generator(gen, test, ev)
    return reward_after - reward_before, after.rouge1 - before.rouge1


def test_criterion_07_rbm_sl_improves():
    t0 = time.time()
    rows = [_c7_seed(s) for s in C7_SEEDS]
    wins = sum(dr > 0 and d1 > 0 for dr, d1 in rows)
    dt = time.time() - t0
    detail = "; ".join(f"seed {s}: reward {dr:+.4f}, ROUGE-1 {d1:+.4f}" for s, (dr, d1) in zip(C7_SEEDS, rows))
    report(7, wins >= 4 and dt < 1800, f"{wins}/5 seeds improve both (>= 4 needed), {dt:.0f}s (< 1800s): {detail}")


# 8 -------------------------------------------------------------------------------

C8_SEED = 21


def test_criterion_08_irl_alternation():
    t0 = time.time()
    c = synth_corpus(C8_SEED, 5000)
    train = [p.to_pair() for p in c.train]
    test = [p.to_pair() for p in c.test]
    pool = [Sentence.of(s) for s in c.nonparallel]
    vocab = build_vocab([p.x.tokens for p in train] + [p.y.tokens for p in train] + [s.tokens for s in pool], 5000)
    rng = np.random.default_rng(C8_SEED)
    gen = Generator(vocab, rng=np.random.default_rng(C8_SEED + 2))
    ev = Evaluator(vocab, rng=np.random.default_rng(C8_SEED + 1))
    cfg = TrainConfig()
    pretrain_generator(gen, train, cfg, rng)
    # the audited inequality on fixed held-out triples (outputs sampled once from the MLE model)
    xs, refs = [p.x for p in test[:cfg.heldout_size]], [p.y.tokens for p in test[:cfg.heldout_size]]
    outs = [g.tokens or ("<unk>",) for g in gen.generate(xs, greedy=False, seed=C8_SEED)]
    z = np.array([rouge_l(o, r) for o, r in zip(outs, refs)])

    def literal():
        return float(np.mean(ev.scores(xs, refs) + (1 - z) > ev.scores(xs, outs)))
    lit_before = literal()
    _, _, stats = train_rbm_irl(train, pool, gen, ev, cfg, RLConfig(), rng, MetricsLog(), test,
                                generator_pretrained=True)
    lit_after = literal()
    gain = lit_after - lit_before
    hinge_gain = stats.margin_after - stats.margin_before
    probe = stats.probe_hinge
    # across the inner loops: from before the first inner step to after the last one
    decreasing = probe[-1][-1] < probe[0][0]
    dt = time.time() - t0
    report(8, gain >= 0.10 and decreasing and dt < 1800,
           f"fraction with M(X,Y) + (1 - zeta) > M(X,Y_hat) {lit_before:.3f} -> {lit_after:.3f} "
           f"({100 * gain:+.1f} pp, >= +10 needed); probe hinge {probe[0][0]:.4f} -> {probe[-1][-1]:.4f} "
           f"(must decrease; per inner loop "
           + ", ".join(f"{tr[0]:.3f}->{tr[-1]:.3f}" for tr in probe) + ")"
           + f"; hinge-inactive fraction {stats.margin_before:.3f} -> {stats.margin_after:.3f} "
           f"({100 * hinge_gain:+.1f} pp, informational); {dt:.0f}s (< 1800s)")


# 9 -------------------------------------------------------------------------------

def test_criterion_09_curriculum():
    c = synth_corpus(9, 40)
    pairs = [p.to_pair() for p in c.positives[:12]]
    delta3 = RLConfig().delta3_schedule[0]
    draws = 10_000
    counts = np.zeros(len(pairs))
    for s in range(draws):
        counts += [w.weight for w in curriculum_weights(pairs, delta3, seed=s)]
    ws = curriculum_weights(pairs, delta3, seed=0)
    p = np.array([w.probability for w in ws])
    ranks = np.array([w.rank for w in ws])
    z = np.abs(counts - draws * p) / np.sqrt(draws * p * (1 - p))
    freq_ok = bool(np.all(z <= 3))
    order = np.argsort(ranks, kind="stable")
    rp = p[order]
    rr = ranks[order]
    mono = bool(np.all((np.diff(rp) < 0) | ((np.diff(rr) == 0) & (np.diff(rp) == 0))))
    end = RLConfig().delta3_schedule[1]
    K = len(pairs)
    p_end = inclusion_probabilities(np.arange(1, K + 1), K, end)
    end_ok = bool(np.all((p_end >= 0.4) & (p_end <= 0.6)))
    report(9, freq_ok and mono and end_ok,
           f"inclusion frequencies within 3 sigma: {freq_ok} (max {z.max():.2f} sigma, delta3 = {delta3:g}, "
           f"{draws} draws); p monotone in rank: {mono}; end of schedule (delta3 = {end:g}) p ranges "
           f"{p_end.min():.3f}..{p_end.max():.3f}, inside [0.4, 0.6]: {end_ok}")


# 10 ------------------------------------------------------------------------------

def test_criterion_10_copy_mechanism():
    vocab = Vocab(["how", "far", "is", "sun"])
    g = Generator(vocab, GeneratorConfig(emb_dim=6, hidden=8, attn_dim=5, out_hidden=7), np.random.default_rng(0))
    x = S("how ducking far ducking sun")
    rng = np.random.default_rng(10)
    worst, oov_ok = 0.0, True
    for _ in range(1000):
        g.params["switch_b"].data[...] = rng.normal(0, 4)
        alpha = rng.dirichlet(np.ones(len(x)) * 0.5)
        d = step_distribution(rng.normal(size=8), rng.normal(size=8), alpha, "how", x, g)
        worst = max(worst, abs(d.probs.sum() - 1))
        mass = alpha[1] + alpha[3]
        if d.q < 1 and mass > 0:
            oov_ok &= d.prob_of("ducking") > 0
            oov_ok &= math.isclose(d.prob_of("ducking"), (1 - d.q) * mass, rel_tol=1e-9)
    report(10, worst <= 1e-9 and oov_ok,
           f"max |sum - 1| = {worst:.1e} over 1000 random states; OOV copy probability positive: {oov_ok}")


# 11 ------------------------------------------------------------------------------

def test_criterion_11_reproducibility(tmp_path):
    from rbm.cli import main
    tiny = {"generator": {"emb_dim": 8, "hidden": 12, "attn_dim": 8, "out_hidden": 12},
            "evaluator": {"emb_dim": 8, "hidden": 8},
            "train": {"mle_epochs": 1, "eval_epochs": 1, "rl_steps": 4, "rl_eval_every": 2, "heldout_size": 20,
                      "irl_alternations": 2, "irl_inner_steps": 2, "irl_outer_steps": 2, "irl_eval_batch": 16},
            "rl": {"batch_size": 8, "n_rollouts": 2}}
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(tiny))
    assert main(["synth-data", "--seed", "5", "--n", "400", "--out-dir", str(tmp_path / "data")]) == 0
    d = tmp_path / "data"
    common = ["--config", str(cfg), "--seed", "17", "--train", str(d / "train.tsv"), "--test", str(d / "test.tsv")]
    modes = {"pretrain": [], "train-eval-sl": ["--negatives", str(d / "negatives.tsv")],
             "train-rbm-sl": ["--negatives", str(d / "negatives.tsv"), "--nonparallel", str(d / "nonparallel.txt")],
             "train-rbm-irl": ["--nonparallel", str(d / "nonparallel.txt")], "train-rl-rouge": []}
    same = {}
    for mode, extra in modes.items():
        files = []
        for rep in ("a", "b"):
            out = tmp_path / f"{mode}-{rep}"
            assert main([mode, *common, *extra, "--out-dir", str(out)]) == 0
            files.append((out / "metrics.csv").read_bytes())
        same[mode] = files[0] == files[1] and len(files[0]) > 0
    report(11, all(same.values()), "metrics CSV byte-identical across two runs: "
           + ", ".join(f"{m} {v}" for m, v in same.items()))
