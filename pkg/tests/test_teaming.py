import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featforge import seq2seq, studentlm
from featforge.decoding import decoded_from_ids
from featforge.expr import OPERATORS_BY_NAME, build_vocabulary, feature, make_sequence, op
from featforge.search import SearchConfig
from featforge.synthetic import make_synthetic
from featforge.teaming import (
    POLICIES,
    FingerprintMismatch,
    MissingArtifact,
    TeamingConfig,
    combine,
    epochs_to_converge,
    run_policy,
    syntactic_mask,
    team_decode,
)


class TestCombine:
    def test_reductions(self):
        a, b = np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.1, 0.8])
        np.testing.assert_allclose(combine(a, b, 1.0), a, atol=1e-12)
        np.testing.assert_allclose(combine(a, b, 0.0), b, atol=1e-12)

    def test_worked_example(self):
        out = combine([0.9, 0.1], [0.5, 0.5], 0.5)
        # sqrt(.45) : sqrt(.05) = 3 : 1
        np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-12)

    def test_floor_keeps_support(self):
        out = combine([1.0, 0.0], [0.0, 1.0], 0.5)
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_shape_and_lambda_checked(self):
        with pytest.raises(ValueError):
            combine([0.5, 0.5], [1.0], 0.5)
        with pytest.raises(ValueError):
            combine([0.5, 0.5], [0.5, 0.5], 1.5)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 8).flatmap(lambda n: st.tuples(
        st.lists(st.floats(1e-6, 1.0), min_size=n, max_size=n),
        st.lists(st.floats(1e-6, 1.0), min_size=n, max_size=n))), st.floats(0, 1), st.floats(0, 1))
    def test_normalized_and_monotone(self, pair, lam1, lam2):
        a = np.array(pair[0]) / sum(pair[0])
        b = np.array(pair[1]) / sum(pair[1])
        q = combine(a, b, lam1)
        assert abs(q.sum() - 1) < 1e-9 and np.all(q >= 0)
        # raising lambda moves mass toward tokens the ML decoder prefers
        lo, hi = sorted((lam1, lam2))
        i = int(np.argmax(np.log(a) - np.log(b)))
        assert combine(a, b, hi)[i] >= combine(a, b, lo)[i] - 1e-12


V2 = build_vocabulary(2, [OPERATORS_BY_NAME["add"], OPERATORS_BY_NAME["log"]])


def oracle_allowed(prefix, vocab, remaining):
    """Tokens from which some continuation of length <= remaining yields a valid stream."""
    out = np.zeros(vocab.size, dtype=bool)
    for t in range(vocab.size):
        if t == vocab.sos_id:
            continue
        for n in range(0, remaining):
            if any(decoded_from_ids(prefix[1:] + [t, *rest], vocab).valid
                   for rest in itertools.product(range(vocab.size), repeat=n)):
                out[t] = True
                break
    return out


class TestMask:
    def test_examples(self):
        v = V2
        f0, f1, add, log = (_tid(t) for t in ("f0", "f1", "add", "log"))
        m = syntactic_mask([v.sos_id], v)
        assert set(np.flatnonzero(m)) == {f0, f1}
        m = syntactic_mask([v.sos_id, f0], v)
        assert set(np.flatnonzero(m)) == {f0, f1, log}
        m = syntactic_mask([v.sos_id, f0, f1], v)
        assert set(np.flatnonzero(m)) == {f0, f1, log, add}
        m = syntactic_mask([v.sos_id, f0, log], v)
        assert set(np.flatnonzero(m)) == {f0, f1, log, v.sep_id, v.eos_id}

    def test_terminated_prefix(self):
        with pytest.raises(ValueError):
            syntactic_mask([V2.sos_id, _tid("f0"), _tid("log"), V2.eos_id], V2)

    @pytest.mark.parametrize("texts", [(), ("f0",), ("f0", "f1"), ("f0", "f0", "f1"), ("f1", "log"),
                                       ("f0", "log", "token_sep"), ("f0", "f1", "add", "token_sep", "f1")])
    @pytest.mark.parametrize("remaining", [1, 2, 3, 4, 5])
    def test_matches_exhaustive_oracle(self, texts, remaining):
        prefix = [V2.sos_id] + [_tid(t) for t in texts]
        expected = oracle_allowed(prefix, V2, remaining)
        np.testing.assert_array_equal(syntactic_mask(prefix, V2, remaining), expected)


def _tid(text):
    return next(i for i in range(V2.size) if V2.token(i).text == text)


@pytest.fixture(scope="module")
def models():
    vocab = build_vocabulary(5)
    ml = seq2seq.init_params(vocab, d_e=6, d_h=8, seed=0)
    lm = studentlm.init_params(vocab, d_e=6, d_h=8, seed=1)
    return ml, lm


class TestTeamDecode:
    def test_lambda_one_is_ml_greedy(self, models):
        ml, lm = models
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = rng.normal(size=ml.d_z)
            ref = seq2seq.decode_greedy(ml, z, 64)
            assert team_decode(ml, lm, z, TeamingConfig(lam=1.0)).raw_ids == ref.raw_ids
            assert team_decode(ml, None, z, TeamingConfig(lam=1.0)).raw_ids == ref.raw_ids

    def test_masked_fuzz_always_valid(self, models):
        ml, lm = models
        rng = np.random.default_rng(1)
        for i in range(150):
            cfg = TeamingConfig(lam=float(rng.uniform()), strategy="top_k", k=4, syntactic_mask=True,
                                max_len=int(rng.integers(3, 20)), rng_seed=i)
            out = team_decode(ml, lm, rng.normal(0, 3, size=ml.d_z), cfg)
            assert out.valid, out.text(ml.vocab)

    def test_seeded(self, models):
        ml, lm = models
        cfg = TeamingConfig(strategy="top_k", rng_seed=3)
        z = np.ones(ml.d_z)
        assert team_decode(ml, lm, z, cfg).raw_ids == team_decode(ml, lm, z, cfg).raw_ids

    def test_fingerprint_mismatch(self, models):
        ml, _ = models
        other = studentlm.init_params(build_vocabulary(4), d_e=4, d_h=4)
        with pytest.raises(FingerprintMismatch):
            team_decode(ml, other, np.zeros(ml.d_z))

    def test_student_required(self, models):
        ml, _ = models
        with pytest.raises(MissingArtifact):
            team_decode(ml, None, np.zeros(ml.d_z), TeamingConfig(lam=0.5))


def test_epochs_to_converge():
    assert epochs_to_converge([0.1, 0.5, 0.5, 0.5]) == 1
    assert epochs_to_converge([0.7, 0.7]) == 0
    assert epochs_to_converge([float("-inf"), 0.2, 0.2005, 0.3]) == 3
    assert epochs_to_converge([float("-inf")] * 3) == 3


@pytest.fixture(scope="module")
def env(models):
    ml, lm = models
    f, o = feature, op
    corpus = [(make_sequence([f(0), f(1), o("multiply")]), 0.6), (make_sequence([f(2), o("log")]), 0.2),
              (make_sequence([f(3), f(4), o("add")]), 0.4)]
    return ml, lm, corpus, make_synthetic(0, n_rows=100)


class TestPolicies:
    def run(self, env, policy, **kw):
        ml, lm, corpus, ds = env
        return run_policy(ds, corpus, policy, ml, lm,
                          SearchConfig(n_seeds=2, steps_per_seed=3, eta=0.5, early_stop=False),
                          TeamingConfig(lam=0.5, syntactic_mask=True), **kw)

    def test_ml_only_arms_identical(self, env):
        a, ra = self.run(env, "traditional_ml")
        b, rb = self.run(env, "wo_decoder_teaming")
        assert [c.decoded.raw_ids for c in ra.candidates] == [c.decoded.raw_ids for c in rb.candidates]
        assert a.config["teaming"]["lam"] == 1.0

    def test_no_search_arm_echo(self, env):
        rep, res = self.run(env, "teaming_wo_search")
        assert rep.config["search"]["steps_per_seed"] == 0
        assert rep.config["teaming"]["lam"] == 0.5
        assert {c.step for c in res.candidates} == {0}
        assert rep.n_candidates == 2

    def test_report_json(self, env):
        rep, _ = self.run(env, "teaming")
        d = json.loads(rep.to_json())
        assert "timing" not in d and d["policy"] == "teaming"
        assert 0 <= d["error_rate"] <= 1
        assert set(d["feature_usage"]) <= {f"f{i}" for i in range(5)}

    def test_missing_student(self, env):
        ml, _, corpus, ds = env
        with pytest.raises(MissingArtifact):
            run_policy(ds, corpus, "teaming", ml, None)

    def test_all_policies_named(self):
        assert [p.value for p in POLICIES] == ["traditional_ml", "teaming_wo_search", "wo_decoder_teaming", "teaming"]
