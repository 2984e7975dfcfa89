import csv

import numpy as np
import pytest

from featforge.decoding import decoded_from_ids
from featforge.expr import feature, make_sequence, op
from featforge.search import (
    LinearEvaluator,
    QuadraticEvaluator,
    SearchConfig,
    ascend,
    grad_score,
    search,
    select_seeds,
    write_trace,
)
from featforge.seq2seq import encode_many, init_params
from featforge.synthetic import make_synthetic


class TestAscend:
    def test_linear_closed_form(self):
        w = np.array([0.5, -1.0, 2.0])
        z0 = np.array([1.0, 1.0, 1.0])
        ev = LinearEvaluator(w)
        np.testing.assert_array_equal(grad_score(ev, z0), w)
        traj = ascend(ev, z0, eta=0.1, steps=5)
        for k, z in enumerate(traj.points):
            np.testing.assert_allclose(z, z0 + k * 0.1 * w, atol=1e-12)

    def test_quadratic_monotone(self):
        center = np.array([2.0, -1.0])
        ev = QuadraticEvaluator(center)
        # eta < 1/L with L = 2
        traj = ascend(ev, np.array([-3.0, 4.0]), eta=0.2, steps=20)
        dist = [np.linalg.norm(z - center) for z in traj.points]
        assert all(b < a for a, b in zip(dist, dist[1:]))
        assert all(b >= a for a, b in zip(traj.predicted, traj.predicted[1:]))

    def test_zero_eta_constant(self):
        traj = ascend(LinearEvaluator(np.ones(2)), np.array([3.0, 4.0]), eta=0.0, steps=4)
        assert len(traj.points) == 5
        for z in traj.points:
            np.testing.assert_array_equal(z, [3.0, 4.0])

    def test_patience_stops_flat(self):
        traj = ascend(LinearEvaluator(np.ones(2)), np.zeros(2), eta=0.0, steps=10, patience=3)
        assert traj.stopped == "no_improvement" and len(traj.points) == 4

    def test_non_finite_truncates(self):
        traj = ascend(LinearEvaluator(np.array([1e308])), np.array([0.0]), eta=10.0, steps=5)
        assert traj.stopped == "non_finite"
        assert len(traj.points) == 1
        assert all(np.all(np.isfinite(z)) for z in traj.points)

    def test_bad_arguments(self):
        ev = LinearEvaluator(np.ones(2))
        with pytest.raises(ValueError):
            ascend(ev, np.zeros(2), 0.1, 0)
        with pytest.raises(ValueError):
            ascend(ev, np.zeros(2), -0.1, 2)
        with pytest.raises(ValueError):
            grad_score(ev, np.zeros(3))
        with pytest.raises(ValueError):
            SearchConfig(eta=0)


@pytest.fixture(scope="module")
def setup():
    from featforge.expr import build_vocabulary

    vocab = build_vocabulary(5)
    params = init_params(vocab, d_e=4, d_h=6, seed=1)
    f, o = feature, op
    seqs = [
        make_sequence([f(0), f(1), o("multiply")]),
        make_sequence([f(2), o("square")]),
        make_sequence([f(3), f(4), o("add")]),
        make_sequence([f(0), o("sin")]),
    ]
    corpus = list(zip(seqs, [0.3, 0.9, 0.3, 0.5]))
    return params, corpus, make_synthetic(0, n_rows=120)


class TestSelectSeeds:
    def test_order_and_ties(self, setup):
        params, corpus, _ = setup
        idx, Z = select_seeds(params, corpus, 3)
        assert idx == [1, 3, 0]
        np.testing.assert_allclose(Z, encode_many(params, [corpus[i][0] for i in idx]))

    def test_too_many(self, setup):
        params, corpus, _ = setup
        with pytest.raises(ValueError):
            select_seeds(params, corpus, 5)


class TestSearch:
    def test_bounds_and_step_zero(self, setup):
        params, corpus, ds = setup
        cfg = SearchConfig(eta=0.5, steps_per_seed=4, n_seeds=3, early_stop=False)
        res = search(params, corpus, ds, config=cfg)
        assert len(res.candidates) <= 3 * 5
        assert res.n_evaluations <= len(res.candidates)
        _, Z = select_seeds(params, corpus, 3)
        starts = [c for c in res.candidates if c.step == 0]
        assert [c.seed_index for c in starts] == res.seed_indices
        for c, z in zip(starts, Z):
            np.testing.assert_array_equal(c.z, z)
        assert len(res.best_so_far) == 5
        assert all(b >= a for a, b in zip(res.best_so_far, res.best_so_far[1:]))

    def test_steps_zero_decodes_seeds_only(self, setup):
        params, corpus, ds = setup
        res = search(params, corpus, ds, config=SearchConfig(steps_per_seed=0, n_seeds=2))
        assert [c.step for c in res.candidates] == [0, 0]

    def test_invalid_ranked_last(self, setup):
        params, corpus, ds = setup
        v = params.vocab
        good = make_sequence([feature(0), feature(1), op("multiply")])
        good_ids = good.wire_ids(v)[1:]
        calls = []

        def decoder(z):
            calls.append(z)
            # alternate: an unterminated stream, then a valid one
            if len(calls) % 2:
                return decoded_from_ids([v.id(feature(0))] * 3, v)
            return decoded_from_ids(good_ids, v)

        cfg = SearchConfig(steps_per_seed=1, n_seeds=2, early_stop=False, eta=0.1)
        res = search(params, corpus, ds, config=cfg, decoder=decoder)
        assert res.error_rate == 0.5
        flags = [c.valid for c in res.ranked]
        assert flags == sorted(flags, reverse=True)
        assert res.best.valid and res.best.sequence == good
        assert res.ranked[-1].reason == "unterminated"

    def test_domain_error_marks_invalid(self, setup):
        params, corpus, ds = setup
        v = params.vocab
        # second segment divides by zero on every row
        ids = make_sequence([feature(0), feature(1), op("add")],
                            [feature(0), feature(0), feature(0), op("subtract"), op("divide")]).wire_ids(v)[1:]
        res = search(params, corpus, ds, config=SearchConfig(steps_per_seed=0, n_seeds=1),
                     decoder=lambda z: decoded_from_ids(ids, v))
        c = res.candidates[0]
        assert not c.valid and c.reason == "domain_error" and c.actual is not None

    def test_trace_csv(self, setup, tmp_path):
        params, corpus, ds = setup
        res = search(params, corpus, ds, config=SearchConfig(steps_per_seed=2, n_seeds=2))
        write_trace(res, tmp_path / "t.csv")
        rows = list(csv.DictReader(open(tmp_path / "t.csv")))
        assert len(rows) == len(res.candidates)
        assert list(rows[0]) == ["seed", "step", "predicted", "actual", "valid", "canonical_text"]
