"""Synthetic paraphrase corpus from a small question grammar.

Positive pairs come from meaning-preserving rewrites (template alternation,
synonym substitution, argument swap for symmetric relations); each records a
trace that :func:`replay` re-applies to X to reproduce Y. Hard negatives apply
a meaning-changing edit (entity swap or question-type change) to a paraphrase;
the remaining negatives are random mismatches.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text import MAX_LEN, ParaphrasePair, Sentence, tokenize, write_pairs, write_sentences

PLACES = [
    "earth", "sun", "moon", "mars", "venus", "jupiter", "saturn", "paris", "london",
    "tokyo", "new york", "delhi", "mumbai", "beijing", "sydney", "berlin", "rome",
    "chicago", "boston", "dubai", "toronto", "moscow", "cairo", "lagos", "seoul",
    "madrid", "lisbon", "vienna", "athens", "dublin",
]
CONCEPTS = [
    "machine learning", "quantum physics", "blockchain", "bitcoin", "democracy",
    "inflation", "gravity", "photosynthesis", "calculus", "capitalism", "socialism",
    "evolution", "entropy", "deep learning", "cloud computing", "meditation",
    "philosophy", "economics", "astronomy", "genetics", "linux", "python", "java",
    "statistics", "algebra", "chemistry", "biology", "psychology", "marketing",
    "accounting",
]
# verb -> objects it takes
ACTIONS = {
    "learn": ["python", "java", "english", "guitar", "piano", "math", "french", "spanish", "coding", "chess"],
    "improve": ["my english", "my writing", "my memory", "my vocabulary", "my health", "my grades", "my resume"],
    "buy": ["a house", "a car", "bitcoin", "a laptop", "a phone", "gold", "stocks"],
    "start": ["a business", "a blog", "a startup", "a youtube channel", "a podcast", "a company"],
    "fix": ["my laptop", "a bike", "my phone", "a leaking tap", "my car"],
    "find": ["a job", "an apartment", "a mentor", "a good doctor", "a cheap flight"],
    "make": ["money online", "friends", "pizza", "a website", "an app"],
}
VERB_SYNONYMS = {
    "learn": "study", "improve": "enhance", "buy": "purchase", "start": "begin",
    "fix": "repair", "find": "locate", "make": "create",
}
THINGS = ["laptop", "phone", "car", "camera", "book", "movie", "headphone", "bike",
          "tablet", "watch", "printer", "monitor", "keyboard", "guitar", "mattress"]
THING_SYNONYMS = {"laptop": "notebook", "phone": "smartphone", "car": "automobile",
                  "movie": "film", "bike": "bicycle"}
SUBJECTS = ["india", "quora", "google", "gold", "the sky", "japan", "apple", "coffee",
            "chess", "football", "cricket", "tesla", "netflix", "bitcoin", "facebook"]
ADJECTIVES = ["popular", "expensive", "difficult", "big", "important", "rich", "cheap", "old"]
ADJ_SYNONYMS = {"popular": "famous", "expensive": "costly", "difficult": "hard",
                "big": "large", "important": "significant", "rich": "wealthy", "cheap": "inexpensive",
                "old": "ancient"}
SYNONYMS = {**VERB_SYNONYMS, **THING_SYNONYMS, **ADJ_SYNONYMS}
SYLLABLES = ["ka", "zor", "vi", "mel", "tru", "dan", "qu", "ix", "ol", "bre", "ny", "sa", "pho", "rim"]


@dataclass(frozen=True)
class Frame:
    name: str
    slots: tuple[str, ...]
    templates: tuple[str, ...]
    # question-type changes used for hard negatives
    negative_templates: tuple[str, ...]
    symmetric: bool = False


FRAMES = (
    Frame("distance", ("a", "b"), (
        "how far is {a} from {b}",
        "what is the distance between {a} and {b}",
        "how many miles is it from {a} to {b}",
    ), (
        "what is the difference between {a} and {b}",
        "how long does it take to fly from {a} to {b}",
        "is {a} bigger than {b}",
    ), symmetric=True),
    Frame("howto", ("v", "o"), (
        "how can i {v} {o}",
        "what is the best way to {v} {o}",
        "how do i {v} {o}",
        "what are some ways to {v} {o}",
    ), (
        "why should i {v} {o}",
        "when should i {v} {o}",
        "is it worth it to {v} {o}",
    )),
    Frame("define", ("c",), (
        "what is {c}",
        "what 's {c}",
        "can you explain what {c} is",
        "what is the meaning of {c}",
    ), (
        "who invented {c}",
        "why is {c} important",
        "what is the history of {c}",
    )),
    Frame("compare", ("a", "b"), (
        "what is the difference between {a} and {b}",
        "how is {a} different from {b}",
        "how do {a} and {b} differ",
    ), (
        "what do {a} and {b} have in common",
        "should i learn {a} or {b}",
        "is {a} better than {b}",
    ), symmetric=True),
    Frame("best", ("o",), (
        "which is the best {o} to buy",
        "what is the best {o} to buy",
        "which {o} should i buy",
    ), (
        "what is the worst {o} to buy",
        "where can i sell my old {o}",
        "how do i repair my {o}",
    )),
    Frame("why", ("x", "j"), (
        "why is {x} so {j}",
        "what makes {x} so {j}",
        "how come {x} is so {j}",
    ), (
        "is {x} {j}",
        "when did {x} become {j}",
        "why is {x} not {j}",
    )),
)
FRAME_BY_NAME = {f.name: f for f in FRAMES}


@dataclass
class SynthConfig:
    negatives_per_positive: float = 1.0
    hard_negative_fraction: float = 0.5
    nonparallel_ratio: float = 0.5
    rare_name_prob: float = 0.1
    test_fraction: float = 0.1
    max_len: int = MAX_LEN


@dataclass
class SynthPair:
    x: str
    y: str
    label: int
    trace: list = field(default_factory=list)
    kind: str = "positive"   # positive | hard | random
    frame: str = ""

    def to_pair(self) -> ParaphrasePair:
        return ParaphrasePair(Sentence(tuple(self.x.split())), Sentence(tuple(self.y.split())), self.label)


@dataclass
class SynthCorpus:
    train: list[SynthPair]
    test: list[SynthPair]
    negatives: list[SynthPair]
    nonparallel: list[str]
    config: SynthConfig

    @property
    def positives(self) -> list[SynthPair]:
        return self.train + self.test

    def stats(self) -> dict:
        """Counts that an independent script can recompute from the files."""
        lengths = Counter()
        for p in self.positives + self.negatives:
            lengths[len(p.x.split())] += 1
            lengths[len(p.y.split())] += 1
        return {
            "positives": len(self.positives),
            "negatives": len(self.negatives),
            "hard_negatives": sum(p.kind == "hard" for p in self.negatives),
            "random_negatives": sum(p.kind == "random" for p in self.negatives),
            "nonparallel": len(self.nonparallel),
            "length_histogram": {str(k): v for k, v in sorted(lengths.items())},
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "train.tsv", out / "test.tsv", out / "negatives.tsv",
                 out / "nonparallel.txt", out / "traces.jsonl", out / "stats.json"]
        write_pairs(files[0], (p.to_pair() for p in self.train))
        write_pairs(files[1], (p.to_pair() for p in self.test))
        write_pairs(files[2], (p.to_pair() for p in self.negatives))
        write_sentences(files[3], (Sentence(tuple(s.split())) for s in self.nonparallel))
        with open(files[4], "w", encoding="utf-8", newline="\n") as fh:
            for p in self.positives:
                fh.write(json.dumps({"x": p.x, "y": p.y, "frame": p.frame, "trace": p.trace}) + "\n")
        files[5].write_text(json.dumps(self.stats(), indent=2, sort_keys=True) + "\n")
        return files


# rewrite rules --------------------------------------------------------------

def _template_regex(template: str) -> re.Pattern:
    parts = re.split(r"(\{\w+\})", template)
    rx = ""
    for part in parts:
        m = re.fullmatch(r"\{(\w+)\}", part)
        rx += f"(?P<{m.group(1)}>.+?)" if m else re.escape(part)
    return re.compile("^" + rx + "$")


def _find(tokens: list[str], sub: list[str], start: int = 0) -> int:
    n = len(sub)
    for i in range(start, len(tokens) - n + 1):
        if tokens[i:i + n] == sub:
            return i
    return -1


def apply_rule(tokens: list[str], rule: list) -> list[str]:
    """Apply one trace entry to a token list.

    ``["template", src, dst]`` re-renders a sentence matching ``src`` with ``dst``;
    ``["replace", old, new]`` rewrites the first occurrence of the ``old`` tokens;
    ``["swap", a, b]`` exchanges the first occurrences of two token spans.
    """
    kind = rule[0]
    if kind == "template":
        m = _template_regex(rule[1]).match(" ".join(tokens))
        if m is None:
            raise ValueError(f"sentence {' '.join(tokens)!r} does not match template {rule[1]!r}")
        return rule[2].format(**m.groupdict()).split()
    if kind == "replace":
        old, new = rule[1].split(), rule[2].split()
        i = _find(tokens, old)
        if i < 0:
            raise ValueError(f"{rule[1]!r} not found in {' '.join(tokens)!r}")
        return tokens[:i] + new + tokens[i + len(old):]
    if kind == "swap":
        a, b = rule[1].split(), rule[2].split()
        i, j = _find(tokens, a), _find(tokens, b)
        if i < 0 or j < 0:
            raise ValueError(f"swap spans not found in {' '.join(tokens)!r}")
        if i > j:
            i, j, a, b = j, i, b, a
        if i + len(a) > j:
            raise ValueError("overlapping swap spans")
        return tokens[:i] + b + tokens[i + len(a):j] + a + tokens[j + len(b):]
    raise ValueError(f"unknown rule kind {kind!r}")


def replay(x: str, trace: list) -> str:
    tokens = x.split()
    for rule in trace:
        tokens = apply_rule(tokens, rule)
    return " ".join(tokens)


# sampling -------------------------------------------------------------------

class _Grammar:
    def __init__(self, rng: np.random.Generator, cfg: SynthConfig):
        self.rng = rng
        self.cfg = cfg

    def choice(self, seq):
        return seq[int(self.rng.integers(len(seq)))]

    def rare_name(self) -> str:
        n = int(self.rng.integers(2, 4))
        return "".join(self.choice(SYLLABLES) for _ in range(n))

    def place(self) -> str:
        if self.rng.random() < self.cfg.rare_name_prob:
            return self.rare_name()
        return self.choice(PLACES)

    def slots(self, frame: Frame) -> dict[str, str]:
        if frame.name == "distance":
            a = self.place()
            b = self.place()
            while b == a:
                b = self.place()
            return {"a": a, "b": b}
        if frame.name == "howto":
            v = self.choice(sorted(ACTIONS))
            return {"v": v, "o": self.choice(ACTIONS[v])}
        if frame.name == "define":
            return {"c": self.choice(CONCEPTS)}
        if frame.name == "compare":
            i, j = self.rng.choice(len(CONCEPTS), size=2, replace=False)
            return {"a": CONCEPTS[int(i)], "b": CONCEPTS[int(j)]}
        if frame.name == "best":
            return {"o": self.choice(THINGS)}
        if frame.name == "why":
            x = self.rare_name() if self.rng.random() < self.cfg.rare_name_prob else self.choice(SUBJECTS)
            return {"x": x, "j": self.choice(ADJECTIVES)}
        raise KeyError(frame.name)

    def sentence(self) -> tuple[Frame, int, dict[str, str], str]:
        frame = self.choice(FRAMES)
        t = int(self.rng.integers(len(frame.templates)))
        slots = self.slots(frame)
        return frame, t, slots, frame.templates[t].format(**slots)

    def paraphrase(self, frame: Frame, t: int, slots: dict[str, str], x: str) -> tuple[str, list]:
        trace: list = []
        tokens = x.split()
        if self.rng.random() < 0.8:
            t2 = self.choice([k for k in range(len(frame.templates)) if k != t])
            trace.append(["template", frame.templates[t], frame.templates[t2]])
            tokens = apply_rule(tokens, trace[-1])
        for w in sorted({tok for tok in tokens if tok in SYNONYMS}):
            if self.rng.random() < 0.5:
                trace.append(["replace", w, SYNONYMS[w]])
                tokens = apply_rule(tokens, trace[-1])
        if frame.symmetric and self.rng.random() < 0.5:
            trace.append(["swap", slots["a"], slots["b"]])
            tokens = apply_rule(tokens, trace[-1])
        if not trace or tokens == x.split():
            t2 = (t + 1) % len(frame.templates)
            rule = ["template", frame.templates[t], frame.templates[t2]]
            trace = [rule]
            tokens = apply_rule(x.split(), rule)
        return " ".join(tokens), trace

    def hard_negative(self, frame: Frame, slots: dict[str, str], y: str) -> str:
        if self.rng.random() < 0.5:
            # entity swap on one slot, keeping the sentence shape
            key = self.choice(sorted(slots))
            old = slots[key]
            for _ in range(20):
                new = self.slots(frame)[key]
                if new != old and new not in slots.values():
                    break
            y_tokens = y.split()
            i = _find(y_tokens, old.split())
            if i >= 0 and new != old:
                return " ".join(y_tokens[:i] + new.split() + y_tokens[i + len(old.split()):])
        template = self.choice(frame.negative_templates)
        return template.format(**slots)


def synth_corpus(seed: int, n_pairs: int, config: SynthConfig | None = None) -> SynthCorpus:
    """Deterministic synthetic corpus with ``n_pairs`` positive pairs."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    g = _Grammar(rng, cfg)

    positives: list[SynthPair] = []
    meta: list[tuple[Frame, dict[str, str]]] = []
    seen: set[tuple[str, str]] = set()
    attempts = 0
    while len(positives) < n_pairs:
        attempts += 1
        if attempts > 50 * n_pairs + 1000:
            raise RuntimeError("grammar exhausted before reaching n_pairs unique pairs")
        frame, t, slots, x = g.sentence()
        y, trace = g.paraphrase(frame, t, slots, x)
        if (x, y) in seen or len(x.split()) > cfg.max_len or len(y.split()) > cfg.max_len:
            continue
        seen.add((x, y))
        positives.append(SynthPair(x, y, 1, trace, "positive", frame.name))
        meta.append((frame, slots))

    n_neg = int(round(n_pairs * cfg.negatives_per_positive))
    n_hard = int(round(n_neg * cfg.hard_negative_fraction))
    negatives: list[SynthPair] = []
    for k in range(n_neg):
        i = int(rng.integers(n_pairs))
        src = positives[i]
        if k < n_hard:
            frame, slots = meta[i]
            y_neg = g.hard_negative(frame, slots, src.y)
            kind = "hard"
        else:
            j = int(rng.integers(n_pairs))
            while meta[j][1] == meta[i][1] and n_pairs > 1:
                j = int(rng.integers(n_pairs))
            y_neg = positives[j].y
            kind = "random"
        negatives.append(SynthPair(src.x, y_neg, 0, [], kind, src.frame))

    used = {p.x for p in positives} | {p.y for p in positives}
    n_np = int(round(n_pairs * cfg.nonparallel_ratio))
    pool: list[str] = []
    pool_set: set[str] = set()
    attempts = 0
    while len(pool) < n_np and attempts < 100 * n_np + 1000:
        attempts += 1
        x = g.sentence()[3]
        if x in used or x in pool_set:
            continue
        pool.append(x)
        pool_set.add(x)

    n_test = int(round(n_pairs * cfg.test_fraction))
    n_test = min(n_test, n_pairs - 1) if n_pairs > 1 else 0
    order = rng.permutation(n_pairs)
    test = [positives[int(i)] for i in order[:n_test]]
    train = [positives[int(i)] for i in order[n_test:]]
    return SynthCorpus(train, test, negatives, pool, cfg)


def check_tokenization_stable() -> None:
    """Every grammar word survives the tokenizer unchanged (files round-trip)."""
    words = set()
    for f in FRAMES:
        for t in f.templates + f.negative_templates:
            words.update(w for w in t.split() if not w.startswith("{"))
    for pool in (PLACES, CONCEPTS, THINGS, SUBJECTS, ADJECTIVES, list(SYNONYMS.values()),
                 [o for objs in ACTIONS.values() for o in objs]):
        for item in pool:
            words.update(item.split())
    bad = [w for w in words if tokenize(w) != [w]]
    if bad:
        raise AssertionError(f"tokenizer splits grammar words: {bad}")
