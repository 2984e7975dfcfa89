"""Command-line entry point: gen-golden, train, run, benchmark, stats, validate.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np

from . import seq2seq, studentlm
from .checkpoint import CheckpointError
from .config import RunConfig
from .data import DatasetError
from .expr import validate_sequence
from .golden import (
    ConfigError,
    CorpusFormatError,
    TeacherError,
    build_corpus,
    build_prompt,
    corpus_load,
    corpus_save,
    corpus_stats,
    default_prompt_spec,
    parse_response,
    request_teacher,
    scripted_teacher,
    teacher_error_rate,
)
from .search import write_trace
from .teaming import POLICIES, PolicyKind, run_policy

log = logging.getLogger("featforge")

CORPUS_FILE = "corpus.jsonl"
DIAGNOSTICS_FILE = "teacher_diagnostics.csv"
SEQ2SEQ_FILE = "seq2seq.ffsq2"
STUDENT_FILE = "student.ffslm"


class GradientCheckFailed(RuntimeError):
    pass


def _out(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_corpus(cfg: RunConfig, vocab):
    path = Path(cfg.output_dir) / CORPUS_FILE
    if not path.is_file():
        raise ConfigError(f"corpus not found: {path} (run gen-golden first)")
    return corpus_load(path, vocab)


# --- gen-golden ---------------------------------------------------------------------------

def _teacher_candidates(cfg: RunConfig, dataset, vocab):
    """Returns (candidate sequences, teacher error rate)."""
    if cfg.teacher_mode == "scripted":
        lo, hi = cfg.segments_per_sequence
        seqs = scripted_teacher(dataset, vocab, cfg.corpus_size, (lo, hi), cfg.teacher_seed(),
                                cfg.planted_segments(vocab), cfg.max_segment_len)
        return seqs, 0.0
    tcfg = cfg.teacher_config()
    tcfg.api_key()  # fail fast with a configuration error
    prompt = build_prompt(dataset, vocab, default_prompt_spec(vocab, cfg.task))
    parses, seqs = [], []
    for _ in range(2 * cfg.corpus_size):
        if len(seqs) >= cfg.corpus_size:
            break
        parsed = parse_response(request_teacher(prompt, tcfg), vocab)
        parses.append(parsed)
        if len(parsed.sequence):
            seqs.append(parsed.sequence)
    return seqs, teacher_error_rate(parses)


def cmd_gen_golden(cfg: RunConfig) -> int:
    dataset = cfg.load_dataset()
    vocab = cfg.vocabulary(dataset.n_features)
    out = _out(cfg)
    cands, err_rate = _teacher_candidates(cfg, dataset, vocab)
    source = "scripted" if cfg.teacher_mode == "scripted" else "teacher_api"
    corpus, skipped = build_corpus(cands, dataset, vocab, cfg.model_config(), cfg.seed, source)
    if not len(corpus):
        raise RuntimeError(f"no usable golden examples (skipped: {skipped})")
    corpus_save(corpus, out / CORPUS_FILE)
    stats = corpus_stats(corpus)
    with open(out / DIAGNOSTICS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "name", "teacher_error_rate", "simple_ops", "complex_ops", "simple_ratio", "count"])
        w.writerow(["summary", "all", repr(err_rate), stats.simple_ops, stats.complex_ops,
                    repr(stats.simple_ratio), len(corpus)])
        for i in range(dataset.n_features):
            w.writerow(["feature", f"f{i}", "", "", "", "", stats.feature_usage.get(i, 0)])
    log.info("wrote %d golden examples (skipped %s)", len(corpus), skipped)
    return 0


# --- train -----------------------------------------------------------------------------------

def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]) if history else ["epoch"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else v) for k, v in row.items()})


def cmd_train(cfg: RunConfig) -> int:
    dataset = cfg.load_dataset()
    vocab = cfg.vocabulary(dataset.n_features)
    corpus = _load_corpus(cfg, vocab)
    out = _out(cfg)
    tcfg, lcfg = cfg.train_config(), cfg.lm_config()
    ml, ml_hist = seq2seq.train_joint(corpus, tcfg)
    student, lm_hist = studentlm.train_student(corpus, lcfg, vocab)

    gc = cfg.gradient_check
    sample = list(zip(corpus.sequences, corpus.scores))[: int(gc["n_sequences"])]
    ml_err = seq2seq.gradient_check(ml, sample, gc["epsilon"], tcfg.alpha, int(gc["n_coords"]))
    lm_err = studentlm.gradient_check(student, sample, gc["epsilon"], lcfg.perf_loss_weight, int(gc["n_coords"]))
    log.info("gradient check max relative error: seq2seq %.3e, student %.3e", ml_err, lm_err)
    _write_json(out / "gradient_check.json", {"seq2seq": ml_err, "studentlm": lm_err,
                                               "threshold": gc["threshold"]})
    if max(ml_err, lm_err) > gc["threshold"]:
        raise GradientCheckFailed(
            f"gradient check failed: seq2seq {ml_err:.3e}, student {lm_err:.3e} > {gc['threshold']}")

    seq2seq.checkpoint_save(ml, out / SEQ2SEQ_FILE)
    studentlm.checkpoint_save(student, out / STUDENT_FILE)
    _write_history(out / "seq2seq_loss.csv", ml_hist)
    _write_history(out / "student_loss.csv", lm_hist)
    return 0


# --- run / benchmark ------------------------------------------------------------------------

def _load_artifacts(cfg: RunConfig):
    dataset = cfg.load_dataset()
    vocab = cfg.vocabulary(dataset.n_features)
    corpus = _load_corpus(cfg, vocab)
    out = Path(cfg.output_dir)
    for name in (SEQ2SEQ_FILE, STUDENT_FILE):
        if not (out / name).is_file():
            raise ConfigError(f"checkpoint not found: {out / name} (run train first)")
    ml = seq2seq.checkpoint_load(out / SEQ2SEQ_FILE, vocab)
    student = studentlm.checkpoint_load(out / STUDENT_FILE, vocab)
    return dataset, corpus, ml, student


def _run_one(cfg, dataset, corpus, ml, student, policy, eval_seed):
    return run_policy(dataset, corpus, policy, ml, student, cfg.search_config(), cfg.teaming_config(),
                      cfg.model_config(), eval_seed)


def cmd_run(cfg: RunConfig, policy: str) -> int:
    dataset, corpus, ml, student = _load_artifacts(cfg)
    out = _out(cfg)
    report, result = _run_one(cfg, dataset, corpus, ml, student, policy, cfg.seed)
    doc = {**report.to_dict(), "run_config": cfg.to_dict()}
    _write_json(out / f"report_{report.policy}.json", doc)
    (out / f"report_{report.policy}.md").write_text(
        "| policy | performance (error rate) |\n|---|---|\n" + report.markdown_row() + "\n")
    write_trace(result, out / f"trace_{report.policy}.csv")
    _write_json(out / f"timing_{report.policy}.json", report.timing)
    print(report.markdown_row())
    return 0


def cmd_benchmark(cfg: RunConfig) -> int:
    dataset, corpus, ml, student = _load_artifacts(cfg)
    out = _out(cfg)
    seeds = [cfg.seed + i for i in range(cfg.bench_seeds)]
    reports = {p.value: [] for p in POLICIES}
    for s in seeds:
        for p in POLICIES:
            report, _ = _run_one(cfg, dataset, corpus, ml, student, p, s)
            reports[p.value].append(report)

    def mean(xs):
        # NaN (an arm with no valid candidate) propagates instead of raising
        return float(np.mean(xs))

    originals = [r.original_score for r in reports[POLICIES[0].value]]
    header = "| dataset | original | " + " | ".join(p.value for p in POLICIES) + " |"
    cells = [f"{mean([r.score for r in reports[p.value]]):.4f} ({100 * mean([r.error_rate for r in reports[p.value]]):.1f}%)"
             for p in POLICIES]
    grid = "\n".join([header, "|" + "---|" * (len(POLICIES) + 2),
                      f"| {dataset.id} | {mean(originals):.4f} | " + " | ".join(cells) + " |"]) + "\n"
    (out / "benchmark.md").write_text(grid)

    with open(out / "stability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "eval_seed", "score", "error_rate", "policy_mean", "policy_std"])
        for p in POLICIES:
            scores = [r.score for r in reports[p.value]]
            sd = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
            for s, r in zip(seeds, reports[p.value]):
                w.writerow([p.value, s, repr(r.score), repr(r.error_rate), repr(mean(scores)), repr(sd)])

    with open(out / "efficiency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "median_epochs_to_converge", "mean_seconds_per_epoch"])
        for p in POLICIES:
            rs = reports[p.value]
            w.writerow([p.value, statistics.median(r.epochs_to_converge for r in rs),
                        f"{mean([r.timing['seconds_per_epoch'] for r in rs]):.4f}"])

    _write_json(out / "benchmark.json", {
        "policies": {k: [r.to_dict() for r in v] for k, v in reports.items()},
        "eval_seeds": seeds,
        "run_config": cfg.to_dict(),
    })
    print(grid, end="")
    return 0


# --- stats / validate -----------------------------------------------------------------------

def cmd_stats(cfg: RunConfig) -> int:
    dataset = cfg.load_dataset()
    corpus = _load_corpus(cfg, cfg.vocabulary(dataset.n_features))
    st = corpus_stats(corpus)
    print(json.dumps({**st.__dict__, "simple_ratio": st.simple_ratio}, indent=2, sort_keys=True, default=str))
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    """Re-check that the corpus and both checkpoints load and share one vocabulary."""
    dataset, corpus, ml, student = _load_artifacts(cfg)
    problems = []
    if ml.vocab.fingerprint != student.vocab.fingerprint:
        problems.append("checkpoint vocabularies differ")
    if len(corpus) == 0:
        problems.append("corpus is empty")
    for i, e in enumerate(corpus):
        bad = [r for r in validate_sequence(e.sequence) if not r.ok]
        if bad:
            problems.append(f"corpus entry {i}: {bad[0].kind}")
    for p in problems:
        print(p, file=sys.stderr)
    if not problems:
        print(f"ok: {len(corpus)} examples, vocabulary {ml.vocab.fingerprint}")
    return 1 if problems else 0


# --- argument handling ----------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--dataset", help="CSV path or 'synthetic[:seed]'")
    common.add_argument("--target")
    common.add_argument("--task", choices=["classification", "regression"])
    common.add_argument("--teacher-mode", choices=["scripted", "api"])
    common.add_argument("--corpus-size", type=int)
    common.add_argument("--epochs", type=int, help="training epochs for both models")
    common.add_argument("--lambda", dest="lam", type=float, help="teaming weight on the ML decoder")
    common.add_argument("--eta", type=float)
    common.add_argument("--steps", type=int, help="ascent steps per seed")
    common.add_argument("--n-seeds", type=int)
    common.add_argument("--mask", action=argparse.BooleanOptionalAction, default=None,
                        help="syntactic validity mask during teamed decoding")
    common.add_argument("--bench-seeds", type=int)
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. --set teaming.k=3")

    sub.add_parser("gen-golden", parents=[common], help="build the golden corpus")
    sub.add_parser("train", parents=[common], help="train the seq2seq model and the student")
    run = sub.add_parser("run", parents=[common], help="run one policy")
    run.add_argument("--policy", choices=[p.value for p in POLICIES], default=PolicyKind.TEAMING.value)
    sub.add_parser("benchmark", parents=[common], help="all policies over several seeds")
    sub.add_parser("stats", parents=[common], help="corpus statistics")
    sub.add_parser("validate", parents=[common], help="re-check corpus and checkpoints")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    flag_map = {
        "seed": "seed", "output_dir": "output_dir", "dataset": "dataset", "target": "target",
        "task": "task", "teacher_mode": "teacher_mode", "corpus_size": "corpus_size",
        "lam": "teaming.lam", "eta": "search.eta", "steps": "search.steps_per_seed",
        "n_seeds": "search.n_seeds", "mask": "teaming.syntactic_mask", "bench_seeds": "bench_seeds",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if args.epochs is not None:
        overrides["seq2seq.epochs"] = args.epochs
        overrides["student.epochs"] = args.epochs
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    return cfg.with_overrides(overrides).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-golden":
            return cmd_gen_golden(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "run":
            return cmd_run(cfg, args.policy)
        if args.command == "benchmark":
            return cmd_benchmark(cfg)
        if args.command == "stats":
            return cmd_stats(cfg)
        return cmd_validate(cfg)
    except (ConfigError, DatasetError, CorpusFormatError, CheckpointError) as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (GradientCheckFailed, TeacherError, RuntimeError, ValueError, ArithmeticError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
