"""``rbm`` command line: synthetic data, training modes, generation, scoring, evaluation, reports."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .artifacts import load_evaluator, load_generator, save_model
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config, save_config
from .evaluator import Evaluator
from .generator import Generator
from .metrics import sentence_scores
from .nn import Module
from .report import EVAL_COLUMNS, EVAL_SCHEMA_VERSION, SchemaError, build_report, format_table, write_report
from .rl import EvaluatorReward
from .synth import synth_corpus
from .text import MalformedFileError, ParaphrasePair, Vocab, build_vocab, load_pairs, load_sentences
from .training import (MetricsLog, MissingRequirementError, decode_greedy, evaluator_accuracy,
                       pretrain_generator, train_evaluator_sl, train_rbm_irl, train_rbm_sl, train_rl_rouge)

logger = logging.getLogger("rbm")

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

# flag -> dotted config key
_PATH_FLAGS = {
    "train": "data.train", "test": "data.test", "negatives": "data.negatives",
    "nonparallel": "data.nonparallel", "generator": "generator_checkpoint",
    "evaluator": "evaluator_checkpoint",
}


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: BaseException):
        self.phase = phase
        super().__init__(f"{phase}: {type(cause).__name__}: {cause}")


class _Phase:
    """Context manager that tags runtime failures with the phase name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        logger.info("phase %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, (PhaseError, MissingRequirementError, ConfigError, KeyboardInterrupt)):
            raise PhaseError(self.name, ev) from ev
        return False


def _setup_logging() -> None:
    level = os.environ.get("RBM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError([f"RBM_LOG: {level!r} not one of error, info, debug"])
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (flags override it)")
    common.add_argument("--seed", type=int, help="root seed; every phase seed derives from it")
    common.add_argument("--workers", type=int, help="worker pool size (default: logical cores)")
    common.add_argument("--out-dir", help="directory for all artifacts of this run")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, VALUE parsed as JSON when possible")

    p = argparse.ArgumentParser(prog="rbm", description=__doc__)
    sub = p.add_subparsers(dest="mode", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="write a synthetic paraphrase corpus")
    s.add_argument("--n", type=int, help="number of paraphrase pairs")

    def paths(sp, *names):
        for n in names:
            sp.add_argument(f"--{n}", help=f"{n} file" if n not in ("generator", "evaluator")
                            else f"{n} checkpoint (.npz)")

    paths(sub.add_parser("pretrain", parents=[common], help="MLE-pretrain the generator"),
          "train", "test")
    paths(sub.add_parser("train-eval-sl", parents=[common], help="train the evaluator as a classifier"),
          "train", "test", "negatives")
    paths(sub.add_parser("train-rbm-sl", parents=[common], help="RL with a frozen supervised evaluator"),
          "train", "test", "negatives", "nonparallel", "generator", "evaluator")
    paths(sub.add_parser("train-rbm-irl", parents=[common], help="alternating IRL evaluator + RL generator"),
          "train", "test", "nonparallel", "generator", "evaluator")
    paths(sub.add_parser("train-rl-rouge", parents=[common], help="RL with ROUGE-2 reward and EMA baseline"),
          "train", "test", "generator")
    g = sub.add_parser("generate", parents=[common], help="paraphrase sentences to JSONL")
    paths(g, "generator")
    g.add_argument("--input", required=True, help="one sentence per line, or a pair TSV (first column)")
    g.add_argument("--sample", action="store_true", help="sample instead of greedy decoding")
    sc = sub.add_parser("score", parents=[common], help="evaluator scores for a pair file, as TSV")
    paths(sc, "evaluator")
    sc.add_argument("--pairs", required=True)
    ev = sub.add_parser("evaluate", parents=[common], help="per-pair ROUGE/BLEU CSV on a test set")
    paths(ev, "generator", "evaluator", "test")
    r = sub.add_parser("report", parents=[common], help="comparison table from metrics/evaluation CSVs")
    r.add_argument("csvs", nargs="+")
    r.add_argument("--names", nargs="*", help="model names, one per CSV")
    return p


def _parse_value(v: str):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"mode": args.mode}
    for item in args.set:
        if "=" not in item:
            raise ConfigError([f"--set {item!r}: expected KEY=VALUE"])
        k, v = item.split("=", 1)
        overrides[k.strip()] = _parse_value(v)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    elif not args.config:
        overrides["workers"] = os.cpu_count() or 1
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    for flag, key in _PATH_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "n", None) is not None:
        overrides["data.synth_pairs"] = args.n
    cfg = apply_overrides(cfg, overrides)
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    return cfg.effective()


_REQUIRED = {
    "pretrain": ["data.train"],
    "train-eval-sl": ["data.train"],
    "train-rbm-sl": ["data.train"],
    "train-rbm-irl": ["data.train"],
    "train-rl-rouge": ["data.train"],
    "generate": ["generator_checkpoint"],
    "score": ["evaluator_checkpoint"],
    "evaluate": ["generator_checkpoint", "data.test"],
}


def _get(cfg, dotted: str):
    node = cfg
    for p in dotted.split("."):
        node = getattr(node, p)
    return node


def check_paths(cfg: ExperimentConfig, extra: dict[str, str] | None = None) -> None:
    errs = []
    for key in _REQUIRED.get(cfg.mode, []):
        if not _get(cfg, key):
            errs.append(f"{key}: required for {cfg.mode}")
    if cfg.mode == "train-rbm-sl" and not cfg.data.negatives and not cfg.evaluator_checkpoint:
        errs.append("data.negatives: train-rbm-sl requires a non-paraphrase (negative) pair file "
                    "to train its evaluator (or --evaluator with a trained checkpoint)")
    paths = {k: _get(cfg, k) for k in _PATH_FLAGS.values()}
    paths.update(extra or {})
    for key, value in paths.items():
        if value and not Path(value).exists():
            errs.append(f"{key}: file not found: {value}")
    if errs:
        raise ConfigError(errs)


# data -----------------------------------------------------------------------

def _pairs(path, max_len) -> list[ParaphrasePair]:
    return load_pairs(path, max_len=max_len).pairs if path else []


class Data:
    def __init__(self, cfg: ExperimentConfig):
        d = cfg.data
        train = _pairs(d.train, d.max_len)
        self.positives = [p for p in train if p.positive]
        self.negatives = [p for p in train if not p.positive] + _pairs(d.negatives, d.max_len)
        test = [p for p in _pairs(d.test, d.max_len) if p.positive]
        if not test and d.heldout_fraction > 0 and len(self.positives) > 10:
            rng = cfg.rng("split")
            order = rng.permutation(len(self.positives))
            k = max(1, int(round(d.heldout_fraction * len(self.positives))))
            test = [self.positives[i] for i in order[:k]]
            self.positives = [self.positives[i] for i in sorted(order[k:])]
        self.heldout = test[: cfg.train.heldout_size]
        self.pool = load_sentences(d.nonparallel, d.max_len) if d.nonparallel else []

    def vocab(self, size: int) -> Vocab:
        corpus = [p.x.tokens for p in self.positives] + [p.y.tokens for p in self.positives]
        corpus += [p.x.tokens for p in self.negatives] + [p.y.tokens for p in self.negatives]
        corpus += [s.tokens for s in self.pool]
        return build_vocab(corpus, size)


def _generator(cfg, vocab_fn) -> tuple[Generator, bool]:
    if cfg.generator_checkpoint:
        return load_generator(cfg.generator_checkpoint)[0], True
    return Generator(vocab_fn(), cfg.generator, cfg.rng("init-generator")), False


def _evaluator(cfg, vocab_fn) -> tuple[Evaluator, bool]:
    if cfg.evaluator_checkpoint:
        return load_evaluator(cfg.evaluator_checkpoint)[0], True
    return Evaluator(vocab_fn(), cfg.evaluator, cfg.rng("init-evaluator")), False


class Run:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.log = MetricsLog()
        self.summary: list[str] = [f"mode: {cfg.mode}", f"seed: {cfg.seed}"]
        self._vocab: Vocab | None = None
        self._last_ckpt = 0

    def vocab_from(self, data: Data):
        def make():
            if self._vocab is None:
                self._vocab = data.vocab(self.cfg.data.vocab_size)
            return self._vocab
        return make

    def checkpointer(self, model: Module):
        every = self.cfg.checkpoint_every

        def on_eval(step: int) -> None:
            if every and step - self._last_ckpt >= every:
                save_model(model, self.out / "checkpoints" / f"generator_step{step:07d}.npz", step=step)
                self._last_ckpt = step
        return on_eval

    def finish(self) -> None:
        if self.log.rows:
            self.log.write(self.out / "metrics.csv")
        (self.out / "summary.txt").write_text("\n".join(self.summary) + "\n", encoding="utf-8")


# modes ------------------------------------------------------------------------

def mode_synth(run: Run) -> None:
    cfg = run.cfg
    with _Phase("synth"):
        corpus = synth_corpus(cfg.seed_for("synth"), cfg.data.synth_pairs, cfg.synth)
        files = corpus.write(run.out)
    run.summary += [f"pairs: {len(corpus.positives)} (train {len(corpus.train)}, test {len(corpus.test)})",
                    f"negatives: {len(corpus.negatives)}", f"non-parallel: {len(corpus.nonparallel)}"]
    run.summary += [f"wrote {f.name}" for f in files]


def mode_pretrain(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        data = Data(cfg)
        gen, _ = _generator(cfg, run.vocab_from(data))
    with _Phase("pretrain"):
        pretrain_generator(gen, data.positives, cfg.train, cfg.rng("pretrain"), run.log, data.heldout)
        save_model(gen, run.out / "generator.npz", phase="pretrain")
    _summarize_gen(run, "pretrain")


def mode_train_eval_sl(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        data = Data(cfg)
        ev, _ = _evaluator(cfg, run.vocab_from(data))
        held = _labelled_heldout(cfg, data)
    with _Phase("train-eval-sl"):
        train_evaluator_sl(ev, data.positives, data.negatives, cfg.train, cfg.rng("train-eval-sl"), run.log, held)
        save_model(ev, run.out / "evaluator.npz", phase="train-eval-sl")
    if held:
        run.summary.append(f"held-out accuracy: {evaluator_accuracy(ev, held):.4f} on {len(held)} pairs")


def _labelled_heldout(cfg, data: Data) -> list[ParaphrasePair]:
    # negatives are never split off the training data; score a held-out slice of them when a test file has them
    test = _pairs(cfg.data.test, cfg.data.max_len)
    return test if any(not p.positive for p in test) else []


def _summarize_gen(run: Run, phase: str) -> None:
    row = run.log.last()
    if row:
        for k in ("heldout_rouge1", "heldout_rouge2", "heldout_rougeL", "heldout_bleu", "heldout_reward"):
            if row[k] != "":
                run.summary.append(f"{phase} {k}: {float(row[k]):.4f}")


def mode_rbm_sl(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        data = Data(cfg)
        vocab = run.vocab_from(data)
        gen, gen_ready = _generator(cfg, vocab)
        ev, ev_ready = _evaluator(cfg, vocab)
    if not ev_ready and not data.negatives:
        raise MissingRequirementError("train-rbm-sl: no negative (non-paraphrase) pairs were found")
    rng = cfg.rng("rl")
    with _Phase("train-eval-sl"):
        if not ev_ready:
            train_evaluator_sl(ev, data.positives, data.negatives, cfg.train, cfg.rng("train-eval-sl"), run.log)
            save_model(ev, run.out / "evaluator.npz", phase="train-eval-sl")
    with _Phase("pretrain"):
        if not gen_ready:
            pretrain_generator(gen, data.positives, cfg.train, cfg.rng("pretrain"), run.log, data.heldout, ev)
            save_model(gen, run.out / "generator_mle.npz", phase="pretrain")
    with _Phase("rbm-sl"):
        digest = ev.digest()
        _, stats = train_rbm_sl(data.positives, data.negatives, data.pool, gen, ev, cfg.train, cfg.rl,
                                rng, run.log, data.heldout, evaluator_trained=True, generator_pretrained=True,
                                on_eval=run.checkpointer(gen))
        save_model(gen, run.out / "generator.npz", phase="rbm-sl", steps=stats.steps)
    run.summary.append(f"evaluator digest unchanged: {digest == ev.digest()}")
    run.summary.append(f"RL steps: {stats.steps}, references consumed: {stats.references_consumed}")
    _summarize_gen(run, "rbm-sl")


def mode_rbm_irl(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        data = Data(cfg)
        vocab = run.vocab_from(data)
        gen, gen_ready = _generator(cfg, vocab)
        ev, _ = _evaluator(cfg, vocab)
    with _Phase("pretrain"):
        if not gen_ready:
            pretrain_generator(gen, data.positives, cfg.train, cfg.rng("pretrain"), run.log, data.heldout)
            save_model(gen, run.out / "generator_mle.npz", phase="pretrain")
    with _Phase("rbm-irl"):
        _, _, stats = train_rbm_irl(data.positives, data.pool, gen, ev, cfg.train, cfg.rl, cfg.rng("irl"),
                                    run.log, data.heldout, generator_pretrained=True,
                                    on_eval=run.checkpointer(gen))
        save_model(gen, run.out / "generator.npz", phase="rbm-irl")
        save_model(ev, run.out / "evaluator.npz", phase="rbm-irl")
    run.summary.append(f"margin satisfaction: {stats.margin_before:.4f} -> {stats.margin_after:.4f}")
    run.summary.append("delta3 schedule: " + ", ".join(f"{d:g}" for d in stats.delta3_trace))
    _summarize_gen(run, "rbm-irl")


def mode_rl_rouge(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        data = Data(cfg)
        gen, gen_ready = _generator(cfg, run.vocab_from(data))
    with _Phase("pretrain"):
        if not gen_ready:
            pretrain_generator(gen, data.positives, cfg.train, cfg.rng("pretrain"), run.log, data.heldout)
            save_model(gen, run.out / "generator_mle.npz", phase="pretrain")
    with _Phase("rl-rouge"):
        _, stats = train_rl_rouge(data.positives, gen, cfg.train, cfg.rl, cfg.rng("rl"), run.log, data.heldout,
                                  generator_pretrained=True, on_eval=run.checkpointer(gen))
        save_model(gen, run.out / "generator.npz", phase="rl-rouge", steps=stats.steps)
    _summarize_gen(run, "rl-rouge")


def _read_inputs(path, max_len):
    text = Path(path).read_text(encoding="utf-8")
    if "\t" in text:
        return [p.x for p in load_pairs(path, max_len=max_len).pairs]
    return load_sentences(path, max_len)


def mode_generate(run: Run, args) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        gen, _ = load_generator(cfg.generator_checkpoint)
        xs = _read_inputs(args.input, cfg.data.max_len)
    with _Phase("generate"):
        rng = cfg.rng("generate")
        out = run.out / "generations.jsonl"
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for i in range(0, len(xs), 256):
                for g in gen.generate(xs[i:i + 256], greedy=not args.sample, rng=rng):
                    fh.write(json.dumps({"input": g.source.text, "output": " ".join(g.tokens),
                                         "logprob_sum": float(np.sum(g.logprobs))}) + "\n")
    run.summary.append(f"generated {len(xs)} outputs -> {out.name}")


def mode_score(run: Run, args) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        ev, _ = load_evaluator(cfg.evaluator_checkpoint)
        pairs = load_pairs(args.pairs, max_len=cfg.data.max_len).pairs
    with _Phase("score"):
        s = ev.scores([p.x for p in pairs], [p.y for p in pairs]) if pairs else []
        out = run.out / "scores.tsv"
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["sentence1", "sentence2", "label", "score"])
            for p, v in zip(pairs, s):
                w.writerow([p.x.text, p.y.text, p.label, repr(float(v))])
    run.summary.append(f"scored {len(pairs)} pairs -> {out.name}")


def mode_evaluate(run: Run) -> None:
    cfg = run.cfg
    with _Phase("load-data"):
        gen, _ = load_generator(cfg.generator_checkpoint)
        ev = load_evaluator(cfg.evaluator_checkpoint)[0] if cfg.evaluator_checkpoint else None
        pairs = [p for p in _pairs(cfg.data.test, cfg.data.max_len) if p.positive]
        if not pairs:
            raise MissingRequirementError("evaluate: the test file has no paraphrase pairs")
    with _Phase("evaluate"):
        xs = [p.x for p in pairs]
        outs = decode_greedy(gen, xs)
        rewards = EvaluatorReward(ev).batch(xs, outs, range(len(xs))) if ev is not None else None
        rows = []
        for i, (p, o) in enumerate(zip(pairs, outs)):
            s = sentence_scores(o, p.y.tokens)
            rows.append([EVAL_SCHEMA_VERSION, i, p.x.text, p.y.text, " ".join(o), s.rouge1, s.rouge2,
                         s.rougeL, s.bleu, None if rewards is None else float(rewards[i])])
        cols = np.array([[r[k] for k in range(5, 9)] for r in rows], dtype=float)
        means = cols.mean(axis=0)
        mean_reward = None if rewards is None else float(np.mean(rewards))
        out = run.out / "evaluation.csv"
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_COLUMNS)
            for r in rows + [[EVAL_SCHEMA_VERSION, "MEAN", "", "", "", *means, mean_reward]]:
                w.writerow([("" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                            for v in r])
        with open(run.out / "generations.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for p, o in zip(pairs, outs):
                fh.write(json.dumps({"input": p.x.text, "output": " ".join(o), "reference": p.y.text}) + "\n")
    run.summary += [f"test pairs: {len(pairs)}", f"ROUGE-1 {means[0]:.4f}  ROUGE-2 {means[1]:.4f}  "
                    f"ROUGE-L {means[2]:.4f}  BLEU {means[3]:.4f}"]
    if mean_reward is not None:
        run.summary.append(f"mean evaluator reward {mean_reward:.4f}")


def mode_report(run: Run, args) -> None:
    with _Phase("report"):
        if args.names and len(args.names) != len(args.csvs):
            raise ConfigError([f"--names: got {len(args.names)} names for {len(args.csvs)} CSVs"])
        rows, series = build_report(args.csvs, args.names)
        write_report(rows, series, run.out)
    table = format_table(rows)
    print(table)
    run.summary.append(table)


def run(cfg: ExperimentConfig, args=None) -> None:
    r = Run(cfg)
    save_config(cfg, r.out / "effective_config.json")
    dispatch = {
        "synth-data": lambda: mode_synth(r),
        "pretrain": lambda: mode_pretrain(r),
        "train-eval-sl": lambda: mode_train_eval_sl(r),
        "train-rbm-sl": lambda: mode_rbm_sl(r),
        "train-rbm-irl": lambda: mode_rbm_irl(r),
        "train-rl-rouge": lambda: mode_rl_rouge(r),
        "generate": lambda: mode_generate(r, args),
        "score": lambda: mode_score(r, args),
        "evaluate": lambda: mode_evaluate(r),
        "report": lambda: mode_report(r, args),
    }
    try:
        dispatch[cfg.mode]()
    finally:
        r.finish()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        extra = {"input": args.input} if getattr(args, "input", None) else {}
        if getattr(args, "pairs", None):
            extra["pairs"] = args.pairs
        for i, c in enumerate(getattr(args, "csvs", None) or []):
            extra[f"csvs[{i}]"] = c
        check_paths(cfg, extra)
        run(cfg, args)
    except ConfigError as e:
        for msg in e.errors:
            print(f"rbm: error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except MissingRequirementError as e:
        print(f"rbm: error: missing requirement: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except PhaseError as e:
        cause = e.__cause__
        if isinstance(cause, (MalformedFileError, CheckpointError, SchemaError)):
            print(f"rbm: error in phase {e.phase}: {cause}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"rbm: error in phase {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
