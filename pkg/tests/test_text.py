import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbm.synth import SynthConfig, check_tokenization_stable, replay, synth_corpus
from rbm.text import (EOS_ID, PAD_ID, SOS_ID, UNK_ID, MalformedFileError, ParaphrasePair, Sentence, Vocab,
                      build_vocab, load_pairs, load_sentences, token_edit_distance, tokenize_and_truncate,
                      write_pairs)


def test_reserved_ids():
    v = Vocab(["x"])
    assert (v.id("<pad>"), v.id("<unk>"), v.id("<s>"), v.id("</s>")) == (PAD_ID, UNK_ID, SOS_ID, EOS_ID) == (0, 1, 2, 3)
    assert v.id("never-seen") == UNK_ID


def test_earth_sun_sentence_in_vocab():
    vocab = build_vocab(["how far is Earth from Sun", "what is the distance between Sun and Earth"])
    s = tokenize_and_truncate("how far is Earth from Sun", vocab)
    assert len(s) == 6 and UNK_ID not in s.ids


def test_truncation_to_twenty():
    s = tokenize_and_truncate(" ".join(f"w{i}" for i in range(25)))
    assert len(s) == 20 and s.tokens[-1] == "w19"


def test_oov_maps_to_unk_surface_kept():
    vocab = build_vocab(["a b c"])
    s = tokenize_and_truncate("a ducking c", vocab)
    assert s.tokens == ("a", "ducking", "c")
    assert s.ids[1] == UNK_ID and s.ids[0] != UNK_ID


def test_empty_text_errors():
    with pytest.raises(ValueError):
        tokenize_and_truncate("   \t ")


def test_tokenizer_lowercases_and_splits_punctuation():
    assert tokenize_and_truncate("What's the Time?").tokens == ("what", "'s", "the", "time", "?")


def test_vocab_counts_and_ties():
    v = build_vocab(["x y z"], max_size=10)
    assert len(v) == 7
    v = build_vocab(["beta alpha", "alpha beta gamma"], max_size=10)
    assert v.id("alpha") < v.id("beta") < v.id("gamma")


def test_vocab_matches_independent_frequency_count():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(300)]
    probs = 1.0 / np.arange(1, 301)
    probs /= probs.sum()
    corpus = [" ".join(rng.choice(words, size=12, p=probs)) for _ in range(400)]
    v = build_vocab(corpus, max_size=54)
    counts = Counter(w for line in corpus for w in line.split())
    expected = sorted(counts, key=lambda w: (-counts[w], w))[:50]
    assert v.tokens() == expected
    assert len(v) == 54


def test_vocab_json_round_trip():
    v = build_vocab(["a b c a"])
    assert Vocab.from_json(v.to_json()) == v


def test_sentence_round_trip_ids_to_surface():
    v = build_vocab(["how far is it"])
    s = tokenize_and_truncate("how far is it", v)
    assert tuple(v.token(i) for i in s.ids) == s.tokens


def test_edit_distance_examples():
    assert token_edit_distance(["what", "'s"], ["what", "is"]) == 1
    assert token_edit_distance(["a", "b"], ["a", "b"]) == 0
    assert token_edit_distance([], ["a", "b", "c"]) == 3


_words = st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=7)


@settings(max_examples=80, deadline=None)
@given(_words, _words, _words)
def test_edit_distance_is_a_metric(a, b, c):
    d = token_edit_distance
    assert d(a, b) == d(b, a)
    assert (d(a, b) == 0) == (a == b)
    assert d(a, c) <= d(a, b) + d(b, c)


def test_load_two_line_tsv(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("how far is it\twhat is the distance\t1\nhow far is it\twho are you\t0\n")
    loaded = load_pairs(p)
    assert [q.label for q in loaded.pairs] == [1, 0] and loaded.skipped == 0


def test_missing_label_line_skipped(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("a b\tc d\t1\ne f\tg h\n i j\tk l\t0\n")
    loaded = load_pairs(p)
    assert len(loaded.pairs) == 2 and loaded.skipped == 1


def test_mostly_malformed_errors(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("a\n b\n c\td\t1\n")
    with pytest.raises(MalformedFileError):
        load_pairs(p)


def test_unreadable_file_errors(tmp_path):
    with pytest.raises(MalformedFileError):
        load_pairs(tmp_path / "missing.tsv")


def test_jsonl_and_tsv_equivalent(tmp_path):
    corpus = synth_corpus(5, 40)
    pairs = [p.to_pair() for p in corpus.positives[:25] + corpus.negatives[:25]]
    write_pairs(tmp_path / "p.tsv", pairs, "tsv")
    write_pairs(tmp_path / "p.jsonl", pairs, "jsonl")
    a, b = load_pairs(tmp_path / "p.tsv").pairs, load_pairs(tmp_path / "p.jsonl").pairs
    assert len(a) == 50 and a == b


def test_sentence_pool_loader(tmp_path):
    p = tmp_path / "pool.txt"
    p.write_text("how far is it\n\nwhat is java\n")
    assert [s.text for s in load_sentences(p)] == ["how far is it", "what is java"]


# synthetic corpus ---------------------------------------------------------------

def test_synth_deterministic(tmp_path):
    a = synth_corpus(7, 100)
    b = synth_corpus(7, 100)
    fa, fb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes()
    assert synth_corpus(8, 100).train != a.train


def test_synth_trace_replay():
    corpus = synth_corpus(3, 500)
    for p in corpus.positives:
        assert p.trace and replay(p.x, p.trace) == p.y


def test_synth_roles():
    corpus = synth_corpus(1, 300)
    assert len(corpus.positives) == 300
    assert all(p.label == 1 for p in corpus.positives) and all(p.label == 0 for p in corpus.negatives)
    xs = {p.x for p in corpus.positives}
    assert not xs & set(corpus.nonparallel)
    kinds = Counter(p.kind for p in corpus.negatives)
    assert kinds["hard"] == kinds["random"] == 150


def test_synth_stats_match_independent_count(tmp_path):
    corpus = synth_corpus(2, 200, SynthConfig(negatives_per_positive=1.0))
    corpus.write(tmp_path)
    stats = json.loads((tmp_path / "stats.json").read_text())
    lengths = Counter()
    labels = Counter()
    for name in ("train.tsv", "test.tsv", "negatives.tsv"):
        for line in (tmp_path / name).read_text().splitlines():
            s1, s2, lab = line.split("\t")
            labels[lab] += 1
            lengths[len(s1.split())] += 1
            lengths[len(s2.split())] += 1
    assert labels["1"] == stats["positives"] == 200
    assert labels["0"] == stats["negatives"] == 200
    assert {int(k): v for k, v in stats["length_histogram"].items()} == dict(lengths)


def test_synth_tokenization_stable():
    check_tokenization_stable()
    for p in synth_corpus(4, 200).positives:
        assert tokenize_and_truncate(p.x).text == p.x


def test_pair_label_semantics():
    pair = ParaphrasePair(Sentence(("a",)), Sentence(("b",)), 0)
    assert not pair.positive
