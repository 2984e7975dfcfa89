"""Acceptance criteria 1-10; each test prints one PASS/FAIL line via ``record_criterion``."""

import itertools
import json
import os
import statistics
import time

import numpy as np
import pytest

from conftest import record_criterion
from featforge import seq2seq, studentlm
from featforge.cli import main
from featforge.config import RunConfig
from featforge.data import f1_macro, one_minus_rae
from featforge.expr import build_vocabulary, feature, op, validate_segment
from featforge.golden import build_corpus, corpus_load, corpus_save, scripted_teacher
from featforge.search import QuadraticEvaluator, ascend, select_seeds
from featforge.synthetic import make_synthetic
from featforge.teaming import TeamingConfig, combine, run_policy, team_decode

pytestmark = pytest.mark.slow

PLANT = "f0 f1 multiply"
BENCH_ARGS = ["--output-dir", "out", "--set", f'plant=["{PLANT}"]']
ARTIFACTS = ["corpus.jsonl", "teacher_diagnostics.csv", "seq2seq.ffsq2", "student.ffslm", "gradient_check.json",
             "report_teaming.json", "report_teaming.md", "trace_teaming.csv", "benchmark.md", "stability.csv",
             "benchmark.json"]


def stack_oracle(tokens) -> bool:
    """Independent simulator: operand counter plus an operator-seen flag."""
    height, saw_op = 0, False
    for t in tokens:
        if t.kind == "feature":
            height += 1
        else:
            if height < t.op.arity:
                return False
            height += 1 - t.op.arity
            saw_op = True
    return saw_op and height == 1


def run_pipeline(workdir):
    """gen-golden, train, run, benchmark at default settings; returns (out dir, seconds)."""
    cwd = os.getcwd()
    os.chdir(workdir)
    t0 = time.perf_counter()
    try:
        for cmd in (["gen-golden"], ["train"], ["run", "--policy", "teaming"], ["benchmark"]):
            assert main([*cmd, *BENCH_ARGS]) == 0, cmd
    finally:
        os.chdir(cwd)
    return workdir / "out", time.perf_counter() - t0


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out, seconds = run_pipeline(tmp_path_factory.mktemp("bench"))
    doc = json.loads((out / "benchmark.json").read_text())
    cfg = RunConfig.from_dict(doc["run_config"])
    cfg.output_dir = str(out)
    return {"out": out, "seconds": seconds, "doc": doc, "cfg": cfg}


@pytest.fixture(scope="module")
def artifacts(bench):
    cfg = bench["cfg"]
    dataset = cfg.load_dataset()
    vocab = cfg.vocabulary(dataset.n_features)
    out = bench["out"]
    return (dataset, corpus_load(out / "corpus.jsonl", vocab), seq2seq.checkpoint_load(out / "seq2seq.ffsq2", vocab),
            studentlm.checkpoint_load(out / "student.ffslm", vocab))


def test_criterion_01_postfix_oracle():
    # six tokens: three features, two binary operators, one unary
    alphabet = [feature(0), feature(1), feature(2), op("add"), op("multiply"), op("log")]
    t0 = time.perf_counter()
    n = agree = 0
    for length in range(1, 6):
        for tokens in itertools.product(alphabet, repeat=length):
            n += 1
            agree += bool(validate_segment(tokens).ok) == stack_oracle(tokens)
    seconds = time.perf_counter() - t0
    ok = agree == n and seconds < 5
    record_criterion(1, ok, f"{agree}/{n} token lists agree with stack oracle in {seconds:.2f}s")
    assert ok


def test_criterion_02_gradient_fidelity(small_pairs, vocab5):
    t0 = time.perf_counter()
    errs = {}
    for d_h in (4, 8, 16):
        p = seq2seq.init_params(vocab5, d_e=8, d_h=d_h, seed=d_h)
        errs[f"seq2seq d_h={d_h}"] = seq2seq.gradient_check(p, small_pairs[:4], epsilon=1e-5, n_coords=50)
    p = studentlm.init_params(vocab5, d_e=8, d_h=16, seed=1)
    errs["studentlm d_h=16"] = studentlm.gradient_check(p, small_pairs[:4], epsilon=1e-5, n_coords=50)
    seconds = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and seconds < 60
    record_criterion(2, ok, f"max relative error {worst:.2e} (<1e-4) in {seconds:.1f}s")
    assert ok, errs


def test_criterion_03_poe_algebra():
    rng = np.random.default_rng(0)
    tv_worst = norm_worst = 0.0
    argmax_ok = True
    for _ in range(1000):
        n = int(rng.integers(2, 20))
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        for lam, ref in ((1.0, a), (0.0, b)):
            q = combine(a, b, lam)
            argmax_ok &= int(np.argmax(q)) == int(np.argmax(ref))
            tv_worst = max(tv_worst, 0.5 * np.abs(q - ref).sum())
        q = combine(a, b, float(rng.uniform()))
        norm_worst = max(norm_worst, abs(q.sum() - 1.0))
    worked = np.abs(combine([0.9, 0.1], [0.5, 0.5], 0.5) - [0.75, 0.25]).max()
    ok = argmax_ok and tv_worst < 1e-9 and norm_worst < 1e-9 and worked < 1e-12
    record_criterion(3, ok, f"TV {tv_worst:.1e}, |sum-1| {norm_worst:.1e}, worked case {worked:.1e}")
    assert ok


def test_criterion_04_search_stability(bench, artifacts):
    rng = np.random.default_rng(0)
    fixture_ok = True
    for _ in range(50):
        ev = QuadraticEvaluator(rng.normal(size=6))
        traj = ascend(ev, rng.normal(0, 5, size=6), eta=0.1, steps=30)
        fixture_ok &= all(b >= a for a, b in zip(traj.predicted, traj.predicted[1:]))

    curves = [r["best_so_far"] for reps in bench["doc"]["policies"].values() for r in reps]
    curve_ok = all(all(b >= a for a, b in zip(c, c[1:])) for c in curves)

    dataset, corpus, ml, student = artifacts
    cfg = bench["cfg"]
    step0_ok = True
    for policy in ("traditional_ml", "teaming"):
        report, result = run_policy(dataset, corpus, policy, ml, student, cfg.search_config(),
                                    cfg.teaming_config(), cfg.model_config(), cfg.seed)
        starts = [c for c in result.candidates if c.step == 0]
        _, Z = select_seeds(ml, corpus, cfg.search_config().n_seeds)
        for c, z in zip(starts, Z):
            ref = (seq2seq.decode_greedy(ml, z, cfg.search_config().max_decode_len) if policy == "traditional_ml"
                   else team_decode(ml, student, z, cfg.teaming_config()))
            step0_ok &= np.array_equal(c.z, z) and c.decoded.raw_ids == ref.raw_ids
        valid0 = [c.score for c in starts if c.valid]
        if valid0:
            step0_ok &= result.best.score >= max(valid0)
    ok = fixture_ok and curve_ok and step0_ok
    record_criterion(4, ok, f"quadratic monotone={fixture_ok}, {len(curves)} best-so-far curves monotone={curve_ok}, "
                            f"step-0 inclusion={step0_ok}")
    assert ok


def _synthetic_pairs(n, seed):
    ds = make_synthetic(0)
    vocab = build_vocabulary(ds.n_features)
    corpus, _ = build_corpus(scripted_teacher(ds, vocab, 3 * n, (1, 3), seed), ds, vocab, limit=n)
    assert len(corpus) == n
    return vocab, list(zip(corpus.sequences, corpus.scores))


def test_criterion_05_memorization():
    vocab, pairs = _synthetic_pairs(50, 11)
    t0 = time.perf_counter()
    ml, _ = seq2seq.train_joint(pairs, seq2seq.TrainConfig(epochs=300), vocab=vocab)
    acc = seq2seq.reconstruction_accuracy(ml, [s for s, _ in pairs])
    t_ml = time.perf_counter() - t0

    vocab, pairs = _synthetic_pairs(20, 12)
    t0 = time.perf_counter()
    lm, _ = studentlm.train_student(pairs, studentlm.LMTrainConfig(epochs=300), vocab)
    regen = studentlm.regeneration_rate(lm, [s for s, _ in pairs])
    t_lm = time.perf_counter() - t0
    ok = acc >= 0.95 and regen >= 0.90 and t_ml < 180 and t_lm < 180
    record_criterion(5, ok, f"seq2seq token accuracy {acc:.3f} ({t_ml:.0f}s), "
                            f"student regeneration {regen:.2f} ({t_lm:.0f}s)")
    assert ok


def _policy_means(doc, key):
    return {p: statistics.fmean(r[key] for r in reps) for p, reps in doc["policies"].items()}


def test_criterion_06_directional_reproduction(bench):
    doc = bench["doc"]
    score = _policy_means(doc, "score")
    err = _policy_means(doc, "error_rate")
    original = statistics.fmean(r["original_score"] for r in doc["policies"]["teaming"])
    a = score["teaming"] >= score["traditional_ml"]
    b = score["teaming"] >= original + 0.05
    c = err["teaming"] <= err["wo_decoder_teaming"]
    fast = bench["seconds"] < 600
    ok = a and b and c and fast
    record_criterion(6, ok, f"teaming {score['teaming']:.4f} vs traditional {score['traditional_ml']:.4f} ({a}), "
                            f"vs original {original:.4f}+0.05 ({b}), error {err['teaming']:.3f} vs "
                            f"wo_decoder {err['wo_decoder_teaming']:.3f} ({c}), pipeline {bench['seconds']:.0f}s")
    assert ok


def test_planted_segment_found(bench):
    reports = bench["doc"]["policies"]["teaming"]
    hits = sum(PLANT in r["best_sequence"].split(" token_sep ") for r in reports)
    assert hits >= 3, [r["best_sequence"] for r in reports]


def test_criterion_07_masked_validity(artifacts):
    _, corpus, ml, student = artifacts
    rng = np.random.default_rng(7)
    Z = seq2seq.encode_many(ml, corpus.sequences)
    n, invalid = 10_000, 0
    t0 = time.perf_counter()
    for i in range(n):
        z = Z[rng.integers(len(Z))] + rng.normal(0, float(rng.choice([0.0, 0.5, 3.0])), size=ml.d_z)
        cfg = TeamingConfig(lam=float(rng.uniform()), strategy=str(rng.choice(["greedy", "top_k"])), k=5,
                            syntactic_mask=True, max_len=int(rng.integers(3, 65)), rng_seed=i)
        invalid += not team_decode(ml, student, z, cfg).valid
    seconds = time.perf_counter() - t0
    ok = invalid == 0
    record_criterion(7, ok, f"{invalid} invalid of {n} masked decodes ({seconds:.0f}s)")
    assert ok


def test_criterion_08_efficiency(bench):
    doc = bench["doc"]
    med = {p: statistics.median(r["epochs_to_converge"] for r in reps) for p, reps in doc["policies"].items()}
    ok = med["teaming"] <= med["traditional_ml"]
    record_criterion(8, ok, f"median epochs-to-converge teaming {med['teaming']} vs traditional_ml "
                            f"{med['traditional_ml']}")
    assert ok


def test_criterion_09_metrics():
    cases = [
        (f1_macro([0, 1, 1, 0], [0, 1, 1, 0]), 1.0),
        (f1_macro([1, 1, 0, 0, 0, 1], [1, 1, 1, 0, 0, 0]), 2 / 3),
        (f1_macro([1, 1, 1, 1], [0, 0, 1, 1]), 1 / 3),
        (one_minus_rae([3.0, 1.0, 4.0], [3.0, 1.0, 4.0]), 1.0),
        (one_minus_rae([1.0, 1.0], [0.0, 2.0]), 0.0),
    ]
    worst = max(abs(got - want) for got, want in cases)
    truth = np.array([0.5, 2.0, -1.0, 7.0])
    mean_exact = one_minus_rae(np.full(4, truth.mean()), truth) == 0.0
    ok = worst < 1e-12 and mean_exact
    record_criterion(9, ok, f"max deviation {worst:.1e}; constant-mean predictor exactly 0: {mean_exact}")
    assert ok


def test_criterion_10_determinism(bench, artifacts, tmp_path_factory):
    again, _ = run_pipeline(tmp_path_factory.mktemp("rerun"))
    differing = [n for n in ARTIFACTS if (bench["out"] / n).read_bytes() != (again / n).read_bytes()]

    _, corpus, ml, student = artifacts
    tmp = tmp_path_factory.mktemp("roundtrip")
    corpus_save(corpus, tmp / "c.jsonl")
    corpus_ok = corpus_load(tmp / "c.jsonl", corpus.vocab) == corpus
    corpus_ok &= (tmp / "c.jsonl").read_bytes() == (bench["out"] / "corpus.jsonl").read_bytes()
    seq2seq.checkpoint_save(ml, tmp / "m")
    studentlm.checkpoint_save(student, tmp / "s")
    ckpt_ok = ((tmp / "m").read_bytes() == (bench["out"] / "seq2seq.ffsq2").read_bytes()
               and (tmp / "s").read_bytes() == (bench["out"] / "student.ffslm").read_bytes())
    ok = not differing and corpus_ok and ckpt_ok
    record_criterion(10, ok, f"{len(ARTIFACTS) - len(differing)}/{len(ARTIFACTS)} artifacts byte-identical on rerun; "
                             f"corpus round trip {corpus_ok}, checkpoint round trip {ckpt_ok}")
    assert ok, differing
