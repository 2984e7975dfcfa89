import numpy as np
import pytest

from featforge import nn, seq2seq
from featforge.checkpoint import CheckpointError
from featforge.expr import build_vocabulary, feature, make_sequence, op
from featforge.seq2seq import (
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    decode_greedy,
    decode_step,
    encode,
    encode_many,
    estimate,
    grad_score,
    gradient_check,
    init_params,
    loss_and_grads,
    train_joint,
)


@pytest.fixture
def tiny(vocab5):
    return init_params(vocab5, d_e=6, d_h=8, seed=0)


class TestGradients:
    @pytest.mark.parametrize("d_h", [4, 8, 16])
    def test_matches_finite_differences(self, vocab5, small_pairs, d_h):
        params = init_params(vocab5, d_e=5, d_h=d_h, seed=d_h)
        assert gradient_check(params, small_pairs[:3], epsilon=1e-5, n_coords=20) < 1e-4

    def test_corrupted_gradient_detected(self, tiny, small_pairs, monkeypatch):
        real = seq2seq.loss_and_grads

        def broken(*args, **kw):
            losses, g = real(*args, **kw)
            g["dec_Wh"] = g["dec_Wh"] * 1.1
            return losses, g

        monkeypatch.setattr(seq2seq, "loss_and_grads", broken)
        assert gradient_check(tiny, small_pairs[:2], n_coords=10) > 1e-3

    def test_alpha_one_leaves_evaluator_untouched(self, tiny, small_pairs):
        ids, mask = nn.pad_batch([s.wire_ids(tiny.vocab) for s, _ in small_pairs])
        scores = np.array([v for _, v in small_pairs])
        _, g = loss_and_grads(tiny, ids, mask, scores, 1.0)
        for name in ("eval_W1", "eval_b1", "eval_W2", "eval_b2"):
            assert not np.any(g[name])
        _, g0 = loss_and_grads(tiny, ids, mask, scores, 0.0)
        assert not np.any(g0["out_W"]) and not np.any(g0["dec_Wx"])

    def test_grad_score_matches_finite_differences(self, tiny):
        z = np.random.default_rng(1).normal(size=tiny.d_z)
        g = grad_score(tiny, z)
        eps = 1e-6
        num = np.array([(estimate(tiny, z + eps * e) - estimate(tiny, z - eps * e)) / (2 * eps)
                        for e in np.eye(tiny.d_z)])
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


class TestForward:
    def test_estimate_manual(self, tiny):
        z = np.linspace(-1, 1, tiny.d_z)
        t = tiny.tensors
        hidden = np.tanh(z @ t["eval_W1"] + t["eval_b1"])
        assert estimate(tiny, z) == pytest.approx(float(hidden @ t["eval_W2"][:, 0] + t["eval_b2"][0]), abs=1e-12)

    def test_latent_shape_and_batch_consistency(self, tiny, small_pairs):
        seqs = [s for s, _ in small_pairs]
        Z = encode_many(tiny, seqs)
        assert Z.shape == (len(seqs), 16)
        for s, z in zip(seqs, Z):
            np.testing.assert_allclose(encode(tiny, s), z, atol=1e-12)

    def test_wrong_latent_dim(self, tiny):
        with pytest.raises(ValueError):
            estimate(tiny, np.zeros(5))

    def test_decode_step_distribution(self, vocab5):
        params = init_params(vocab5, seed=0)
        z = encode(params, make_sequence([feature(0), feature(1), op("add")]))
        p = decode_step(params, z, [vocab5.sos_id])
        assert p.shape == (vocab5.size,)
        assert abs(p.sum() - 1) < 1e-9 and np.all(p > 0)
        assert p.max() / p.min() < 10

    def test_prefix_must_start_with_sos(self, tiny):
        with pytest.raises(ValueError):
            decode_step(tiny, np.zeros(tiny.d_z), [0])
        with pytest.raises(KeyError):
            decode_step(tiny, np.zeros(tiny.d_z), [tiny.vocab.sos_id, 99])

    def test_greedy_bounded(self, tiny):
        out = decode_greedy(tiny, np.zeros(tiny.d_z), max_len=5)
        assert len(out.raw_ids) <= 5
        assert out.distributions.shape == (len(out.raw_ids), tiny.vocab.size)


class TestTraining:
    def test_memorizes_one_sequence(self, vocab5):
        s = make_sequence([feature(0), feature(3), op("multiply")], [feature(2), op("log")])
        cfg = TrainConfig(epochs=150, learning_rate=1e-2, d_e=8, d_h=16)
        params, hist = train_joint([(s, 0.5)], cfg, vocab=vocab5)
        assert hist[-1]["loss_rec"] < hist[0]["loss_rec"]
        out = decode_greedy(params, encode(params, s))
        assert out.valid and out.sequence == s

    def test_deterministic(self, vocab5, small_pairs):
        cfg = TrainConfig(epochs=3, d_e=4, d_h=6, rng_seed=9)
        a, ha = train_joint(small_pairs, cfg, vocab=vocab5)
        b, hb = train_joint(small_pairs, cfg, vocab=vocab5)
        assert ha == hb
        for k in a.tensors:
            np.testing.assert_array_equal(a[k], b[k])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(alpha=1.5)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)

    def test_empty_corpus(self, vocab5):
        with pytest.raises(ValueError):
            train_joint([], TrainConfig(epochs=1), vocab=vocab5)


class TestCheckpoint:
    def test_round_trip(self, tiny, tmp_path):
        path = tmp_path / "m.ffsq2"
        checkpoint_save(tiny, path)
        back = checkpoint_load(path, tiny.vocab)
        z = np.linspace(0, 1, tiny.d_z)
        assert estimate(back, z) == estimate(tiny, z)
        assert decode_greedy(back, z).raw_ids == decode_greedy(tiny, z).raw_ids
        checkpoint_save(back, tmp_path / "again.ffsq2")
        assert path.read_bytes() == (tmp_path / "again.ffsq2").read_bytes()

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"NOTAMODEL")
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "bad")

    def test_fingerprint_mismatch(self, tiny, tmp_path):
        checkpoint_save(tiny, tmp_path / "m")
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "m", build_vocabulary(4))

    def test_truncated(self, tiny, tmp_path):
        checkpoint_save(tiny, tmp_path / "m")
        data = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(data[:-8])
        with pytest.raises(CheckpointError):
            checkpoint_load(tmp_path / "t")
